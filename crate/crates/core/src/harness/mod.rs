//! Experiment orchestration: configs, Monte-Carlo runs, and error CDFs.

mod cdf;
pub mod config;
mod experiment;

pub use cdf::{make_cdf, CdfCurve};
pub use config::{ExperimentConfig, StageSeeds};
pub use experiment::{
    read_errors, run_experiment, run_trial, ErrorRow, ExperimentReport, ModelSummary, TraceRow,
    TrialOutcome, TrialSummary,
};

/// Environment variable that sets the worker-thread count.
pub const WORKERS_ENV: &str = "HYBRIDLOC_WORKERS";

/// Configures the global worker pool from [`WORKERS_ENV`], if set.
/// Returns the thread count in effect.
pub fn init_workers() -> usize {
    if let Some(n) = std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        // a pool may already exist (tests, embedding); keep it then
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    rayon::current_num_threads()
}
