use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the localization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the domain of the operation (zero distance,
    /// point off the map, degenerate geometry).
    #[error("domain error: {0}")]
    Domain(String),

    /// A value failed validation while building a domain object.
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    /// City generation cannot honor the requested layout.
    #[error("cannot construct city: {0}")]
    Construction(String),

    /// Least-squares path-loss fit failed for one segment.
    #[error("path-loss fit failed for {segment} segment: {reason}")]
    Fit {
        segment: &'static str,
        reason: String,
    },

    /// Gain-network training produced a non-finite loss.
    #[error("training diverged at epoch {epoch} (last finite epoch: {last_finite_epoch:?})")]
    Training {
        epoch: usize,
        last_finite_epoch: Option<usize>,
    },

    /// No particle ever reached a finite objective.
    #[error("localization failed for user {user}: {reason}")]
    Localization { user: usize, reason: String },

    /// An experiment stage failed; wraps the underlying cause.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tag an error with the experiment stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
