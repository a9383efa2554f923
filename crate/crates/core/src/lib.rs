//! UAV-aided localization of ground radio users from received signal strength.
//!
//! The crate simulates RSS measurements collected by a UAV over a 3D city,
//! learns a hybrid channel model (segmented log-distance path loss plus a
//! neural antenna-gain term), and localizes users with a particle swarm that
//! classifies every measurement as LoS or NLoS from the city map.
//!
//! Modules, bottom-up:
//! - [`citymap`]: buildings, LoS queries, random city generation
//! - [`channel`]: ground-truth propagation and measurement synthesis
//! - [`netgain`]: the feedforward gain approximator
//! - [`learning`]: two-phase channel fitting and hybrid prediction
//! - [`pso`]: per-user swarm localization
//! - [`harness`]: Monte-Carlo experiments and CLI plumbing

// Validation is written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod citymap;
mod error;
pub mod geometry;
pub mod harness;
pub mod learning;
pub mod netgain;
pub mod pso;

pub use channel::{GroundTruth, Measurement, PathLossParams, Segment};
pub use citymap::{Building, CityMap, CitySpec};
pub use error::{Error, Result};
pub use geometry::{Point2, Point3, UavPose};
pub use learning::{GainTerm, HybridChannelModel, TrainingSet};
pub use netgain::GainNetwork;
pub use pso::{LocalizationResult, PsoConfig};

/// Mixes a base seed with a stream index (splitmix64 finalizer), giving
/// independent, reproducible seeds per user, trial, or stage.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
