//! Serializable configuration for experiments and the individual CLI stages.
//!
//! Every field has a default, so `{}` is a valid config for any stage.
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::{GroundTruth, PoseSpec};
use crate::citymap::{CityMap, CitySpec};
use crate::geometry::Point2;
use crate::learning::{read_json, write_json, TrainConfig};
use crate::pso::PsoConfig;
use crate::Result;

/// Base seeds, one per randomized stage. Trial `t` of a stage uses
/// `derive_seed(stage_seed, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSeeds {
    pub city: u64,
    pub train_data: u64,
    pub train_gain: u64,
    pub test_data: u64,
    pub pso: u64,
}

impl Default for StageSeeds {
    fn default() -> Self {
        Self {
            city: 1,
            train_data: 2,
            train_gain: 3,
            test_data: 4,
            pso: 5,
        }
    }
}

impl StageSeeds {
    /// Replaces every stage seed with one derived from `base`.
    pub fn from_base(base: u64) -> Self {
        let d = |i| crate::derive_seed(base, i);
        Self {
            city: d(1),
            train_data: d(2),
            train_gain: d(3),
            test_data: d(4),
            pso: d(5),
        }
    }
}

/// A full Monte-Carlo comparison of the hybrid and path-loss-only models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Load this map instead of generating one per trial.
    pub map: Option<PathBuf>,
    pub city: CitySpec,
    pub receiver_height: f64,
    pub truth: GroundTruth,
    pub train_users: usize,
    pub train_poses: PoseSpec,
    pub test_users: usize,
    pub test_poses: PoseSpec,
    pub train: TrainConfig,
    pub pso: PsoConfig,
    pub trials: usize,
    pub seeds: StageSeeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            map: None,
            city: CitySpec::default(),
            receiver_height: 0.0,
            truth: GroundTruth::default(),
            train_users: 10,
            train_poses: PoseSpec::default(),
            test_users: 10,
            test_poses: PoseSpec::default(),
            train: TrainConfig::default(),
            pso: PsoConfig::default(),
            trials: 20,
            seeds: StageSeeds::default(),
        }
    }
}

/// `gen-data`: simulate a measurement campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub map: Option<PathBuf>,
    pub city: CitySpec,
    pub receiver_height: f64,
    pub truth: GroundTruth,
    /// Explicit user positions; when empty, `user_count` outdoor users are drawn.
    pub users: Vec<Point2>,
    pub user_count: usize,
    pub poses: PoseSpec,
    pub seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            map: None,
            city: CitySpec::default(),
            receiver_height: 0.0,
            truth: GroundTruth::default(),
            users: Vec::new(),
            user_count: 10,
            poses: PoseSpec::default(),
            seed: 0,
        }
    }
}

/// `fit-pathloss`: phase one on a labeled campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub map: PathBuf,
    pub measurements: PathBuf,
    pub truth: PathBuf,
    pub receiver_height: f64,
    pub sigma2_los: f64,
    pub sigma2_nlos: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            map: "map.json".into(),
            measurements: "measurements.jsonl".into(),
            truth: "truth.jsonl".into(),
            receiver_height: 0.0,
            sigma2_los: 2.0,
            sigma2_nlos: 5.0,
        }
    }
}

/// `train-gain`: phase two with path loss frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainGainConfig {
    pub map: PathBuf,
    pub measurements: PathBuf,
    pub truth: PathBuf,
    pub pathloss: PathBuf,
    pub receiver_height: f64,
    pub train: TrainConfig,
}

impl Default for TrainGainConfig {
    fn default() -> Self {
        Self {
            map: "map.json".into(),
            measurements: "measurements.jsonl".into(),
            truth: "truth.jsonl".into(),
            pathloss: "pathloss.json".into(),
            receiver_height: 0.0,
            train: TrainConfig::default(),
        }
    }
}

/// `localize`: swarm search for every user in a measurement log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizeConfig {
    pub map: PathBuf,
    pub measurements: PathBuf,
    pub pathloss: PathBuf,
    /// Gain checkpoint; without one the path-loss-only model is used.
    pub gain_model: Option<PathBuf>,
    /// Optional truth sidecar for error reporting.
    pub truth: Option<PathBuf>,
    pub receiver_height: f64,
    pub pso: PsoConfig,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            map: "map.json".into(),
            measurements: "measurements.jsonl".into(),
            pathloss: "pathloss.json".into(),
            gain_model: Some("gain_model.json".into()),
            truth: None,
            receiver_height: 0.0,
            pso: PsoConfig::default(),
        }
    }
}

/// Loads a JSON config of any stage type.
pub fn load_config<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    read_json(path.as_ref())
}

pub fn save_config<T: Serialize>(path: impl AsRef<Path>, cfg: &T) -> Result<()> {
    write_json(path.as_ref(), cfg)
}

/// Resolves `p` against `base` unless it is absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Map from a file (relative to `base`) or generated from `city`.
pub fn load_or_generate_map(
    base: &Path,
    map: Option<&Path>,
    city: &CitySpec,
    seed: u64,
    receiver_height: f64,
) -> Result<CityMap> {
    let m = match map {
        Some(p) => CityMap::load(resolve(base, p))?,
        None => city.generate(seed)?,
    };
    m.with_receiver_height(receiver_height)
}
