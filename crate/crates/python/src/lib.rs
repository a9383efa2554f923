//! Python bindings for `hybridloc`.
//!
//! Points cross the boundary as tuples, UAV poses as `(x, y, z, heading)`,
//! and measurements as `(n, k, x, y, z, heading, g)`.

// pyo3's generated wrappers trip this lint on `PyResult` returns.
#![allow(clippy::useless_conversion)]

use std::collections::BTreeMap;
use std::path::Path;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use hybridloc::channel::{self, AntennaPattern, GroundTruth, PoseSpec};
use hybridloc::harness::{self, ExperimentConfig};
use hybridloc::learning::{self, TrainConfig};
use hybridloc::netgain::{self, CheckpointMeta};
use hybridloc::{
    CitySpec, Error, GainTerm, Measurement, PathLossParams, Point2, Point3, PsoConfig, Segment,
    TrainingSet, UavPose,
};

type Pose = (f64, f64, f64, f64);
type Record = (usize, usize, f64, f64, f64, f64, f64);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn pose(p: Pose) -> PyResult<UavPose> {
    UavPose::new(Point3::new(p.0, p.1, p.2), p.3).map_err(py_err)
}

fn to_poses(ps: Vec<Pose>) -> PyResult<Vec<UavPose>> {
    ps.into_iter().map(pose).collect()
}

fn measurement(r: Record) -> PyResult<Measurement> {
    Ok(Measurement {
        n: r.0,
        k: r.1,
        pose: pose((r.2, r.3, r.4, r.5))?,
        g: r.6,
    })
}

fn record(m: &Measurement) -> Record {
    let p = m.pose.position;
    (m.n, m.k, p.x, p.y, p.z, m.pose.heading, m.g)
}

fn parse_pattern(name: &str) -> PyResult<AntennaPattern> {
    match name {
        "anisotropic" => Ok(AntennaPattern::Anisotropic),
        "isotropic" => Ok(AntennaPattern::Isotropic),
        _ => Err(PyValueError::new_err(format!(
            "unknown antenna pattern {name:?}"
        ))),
    }
}

fn segment(los: bool) -> Segment {
    Segment::from_los(los)
}

#[pyclass(name = "CityMap", module = "hybridloc_py")]
#[derive(Clone)]
struct PyCityMap(hybridloc::CityMap);

#[pymethods]
impl PyCityMap {
    /// Building-free map over `[x0, x1] x [y0, y1]`.
    #[staticmethod]
    fn empty(x0: f64, y0: f64, x1: f64, y1: f64) -> PyResult<Self> {
        hybridloc::CityMap::empty(Point2::new(x0, y0), Point2::new(x1, y1))
            .map(Self)
            .map_err(py_err)
    }

    /// Random city on a square extent `[0, size]^2`.
    #[staticmethod]
    #[pyo3(signature = (seed, building_count = 36, size = 300.0))]
    fn generate(seed: u64, building_count: usize, size: f64) -> PyResult<Self> {
        let spec = CitySpec {
            building_count,
            extent_min: Point2::new(0.0, 0.0),
            extent_max: Point2::new(size, size),
            ..CitySpec::default()
        };
        spec.generate(seed).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        hybridloc::CityMap::load(path).map(Self).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(py_err)
    }

    fn extent(&self) -> ((f64, f64), (f64, f64)) {
        let (lo, hi) = self.0.extent();
        ((lo.x, lo.y), (hi.x, hi.y))
    }

    /// `[(x0, y0, x1, y1, height), ...]`
    fn buildings(&self) -> Vec<(f64, f64, f64, f64, f64)> {
        self.0
            .buildings()
            .iter()
            .map(|b| (b.min.x, b.min.y, b.max.x, b.max.y, b.height))
            .collect()
    }

    fn is_los(&self, uav: (f64, f64, f64), user: (f64, f64)) -> PyResult<bool> {
        self.0
            .is_los(
                Point3::new(uav.0, uav.1, uav.2),
                Point2::new(user.0, user.1),
            )
            .map_err(py_err)
    }

    fn classify(&self, poses: Vec<Pose>, user: (f64, f64)) -> PyResult<Vec<bool>> {
        self.0
            .classify(&to_poses(poses)?, Point2::new(user.0, user.1))
            .map_err(py_err)
    }

    /// Random flight: `count` poses with altitudes in `[z_min, z_max]`.
    #[pyo3(signature = (count, seed, z_min = 40.0, z_max = 100.0))]
    fn sample_poses(&self, count: usize, seed: u64, z_min: f64, z_max: f64) -> PyResult<Vec<Pose>> {
        use rand::SeedableRng;
        let spec = PoseSpec {
            count,
            altitude_min: z_min,
            altitude_max: z_max,
            ..PoseSpec::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ps = spec.sample(&self.0, &mut rng).map_err(py_err)?;
        Ok(ps
            .iter()
            .map(|p| (p.position.x, p.position.y, p.position.z, p.heading))
            .collect())
    }

    fn __repr__(&self) -> String {
        let ((x0, y0), (x1, y1)) = self.extent();
        format!(
            "CityMap(extent=({x0}, {y0})..({x1}, {y1}), buildings={})",
            self.0.buildings().len()
        )
    }
}

#[pyclass(name = "PathLoss", module = "hybridloc_py")]
#[derive(Clone)]
struct PyPathLoss(PathLossParams);

#[pymethods]
impl PyPathLoss {
    #[new]
    #[pyo3(signature = (alpha_los = 2.2, alpha_nlos = 3.2, beta_los = -32.0, beta_nlos = -35.0, sigma2_los = 2.0, sigma2_nlos = 5.0))]
    fn new(
        alpha_los: f64,
        alpha_nlos: f64,
        beta_los: f64,
        beta_nlos: f64,
        sigma2_los: f64,
        sigma2_nlos: f64,
    ) -> PyResult<Self> {
        let p = PathLossParams {
            alpha_los,
            alpha_nlos,
            beta_los,
            beta_nlos,
            sigma2_los,
            sigma2_nlos,
        };
        p.validate().map_err(py_err)?;
        Ok(Self(p))
    }

    #[getter]
    fn alpha_los(&self) -> f64 {
        self.0.alpha_los
    }
    #[getter]
    fn alpha_nlos(&self) -> f64 {
        self.0.alpha_nlos
    }
    #[getter]
    fn beta_los(&self) -> f64 {
        self.0.beta_los
    }
    #[getter]
    fn beta_nlos(&self) -> f64 {
        self.0.beta_nlos
    }

    /// Mean received power (dB) at 3D distance `d`.
    fn path_loss(&self, los: bool, d: f64) -> PyResult<f64> {
        self.0.path_loss(segment(los), d).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let p = &self.0;
        format!(
            "PathLoss(alpha=({}, {}), beta=({}, {}), sigma2=({}, {}))",
            p.alpha_los, p.alpha_nlos, p.beta_los, p.beta_nlos, p.sigma2_los, p.sigma2_nlos
        )
    }
}

#[pyclass(name = "GainNetwork", module = "hybridloc_py")]
#[derive(Clone)]
struct PyGainNetwork(hybridloc::GainNetwork);

#[pymethods]
impl PyGainNetwork {
    /// The standard 4-60-60-40-40-1 network with seeded initialization.
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> Self {
        Self(hybridloc::GainNetwork::standard(seed))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        hybridloc::GainNetwork::load(path)
            .map(|(n, _)| Self(n))
            .map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let meta = CheckpointMeta {
            trained_on: String::new(),
            seed: 0,
            epochs: 0,
        };
        self.0.save(path, meta).map_err(py_err)
    }

    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    fn layer_sizes(&self) -> Vec<usize> {
        self.0.layer_sizes()
    }

    /// Predicted gain (dB) for a UAV pose toward a ground point `(x, y, z)`.
    fn gain(&self, uav: Pose, user: (f64, f64, f64)) -> PyResult<f64> {
        let f =
            netgain::features(&pose(uav)?, Point3::new(user.0, user.1, user.2)).map_err(py_err)?;
        Ok(self.0.forward(&f))
    }

    /// Raw network output for a 4-element feature vector.
    fn forward(&self, x: [f64; 4]) -> f64 {
        self.0.forward(&netgain::GainFeatures(x))
    }
}

/// Ground-truth antenna gain (dB).
#[pyfunction]
fn true_antenna_gain(uav: Pose, user: (f64, f64, f64)) -> PyResult<f64> {
    channel::true_antenna_gain(&pose(uav)?, Point3::new(user.0, user.1, user.2)).map_err(py_err)
}

/// Simulates one measurement per (pose, user) pair.
///
/// Returns `(measurements, los_labels)`, both user-major.
#[pyfunction]
#[pyo3(signature = (city, users, poses, seed, shadowing = true, pattern = "anisotropic", params = None))]
fn synthesize(
    city: &PyCityMap,
    users: Vec<(f64, f64)>,
    poses: Vec<Pose>,
    seed: u64,
    shadowing: bool,
    pattern: &str,
    params: Option<PyPathLoss>,
) -> PyResult<(Vec<Record>, Vec<bool>)> {
    let truth = GroundTruth {
        params: params.map(|p| p.0).unwrap_or_default(),
        pattern: parse_pattern(pattern)?,
        shadowing,
    };
    let users: Vec<Point2> = users.into_iter().map(|(x, y)| Point2::new(x, y)).collect();
    let ds = channel::synthesize_dataset(&city.0, &truth, &users, &to_poses(poses)?, seed)
        .map_err(py_err)?;
    Ok((
        ds.measurements.iter().map(record).collect(),
        ds.truth.iter().map(|t| t.los).collect(),
    ))
}

fn training_set(
    city: &PyCityMap,
    records: Vec<Record>,
    users: Vec<(f64, f64)>,
) -> PyResult<TrainingSet> {
    let ms = records
        .into_iter()
        .map(measurement)
        .collect::<PyResult<Vec<_>>>()?;
    let known: BTreeMap<usize, Point2> = users
        .into_iter()
        .enumerate()
        .map(|(k, (x, y))| (k, Point2::new(x, y)))
        .collect();
    TrainingSet::new(&city.0, &ms, &known).map_err(py_err)
}

/// Phase one: per-segment least squares. `users[k]` is the position of user `k`.
#[pyfunction]
#[pyo3(signature = (city, measurements, users, sigma2_los = 2.0, sigma2_nlos = 5.0))]
fn fit_pathloss(
    city: &PyCityMap,
    measurements: Vec<Record>,
    users: Vec<(f64, f64)>,
    sigma2_los: f64,
    sigma2_nlos: f64,
) -> PyResult<PyPathLoss> {
    let train = training_set(city, measurements, users)?;
    learning::fit_pathloss(&train, sigma2_los, sigma2_nlos)
        .map(PyPathLoss)
        .map_err(py_err)
}

/// Phase two: trains the gain network with path loss frozen.
///
type LogRow = (usize, f64, f64);

/// Returns the network and the log as `[(epoch, loss_train, loss_val), ...]`.
#[pyfunction]
#[pyo3(signature = (city, measurements, users, pathloss, seed = 0, epochs = 500))]
fn train_gain(
    py: Python<'_>,
    city: &PyCityMap,
    measurements: Vec<Record>,
    users: Vec<(f64, f64)>,
    pathloss: &PyPathLoss,
    seed: u64,
    epochs: usize,
) -> PyResult<(PyGainNetwork, Vec<LogRow>)> {
    let train = training_set(city, measurements, users)?;
    let cfg = TrainConfig {
        seed,
        epochs,
        ..TrainConfig::default()
    };
    let trained = py
        .allow_threads(|| learning::train_gain(&train, &pathloss.0, &cfg))
        .map_err(py_err)?;
    let log = trained
        .log
        .iter()
        .map(|e| (e.epoch, e.loss_train, e.loss_val))
        .collect();
    Ok((PyGainNetwork(trained.network), log))
}

/// Localizes one user. Without `gain` the path-loss-only model is used.
///
/// Returns `((x, y), objective, trace)`.
#[pyfunction]
#[pyo3(signature = (city, measurements, pathloss, gain = None, seed = 0, particles = 100, iterations = 150))]
#[allow(clippy::too_many_arguments)]
fn localize(
    py: Python<'_>,
    city: &PyCityMap,
    measurements: Vec<Record>,
    pathloss: &PyPathLoss,
    gain: Option<PyGainNetwork>,
    seed: u64,
    particles: usize,
    iterations: usize,
) -> PyResult<((f64, f64), f64, Vec<f64>)> {
    let ms = measurements
        .into_iter()
        .map(measurement)
        .collect::<PyResult<Vec<_>>>()?;
    let term = gain.map_or(GainTerm::Zero, |g| GainTerm::Network(g.0));
    let model = hybridloc::HybridChannelModel::new(pathloss.0, term).map_err(py_err)?;
    let cfg = PsoConfig {
        seed,
        particles,
        iterations,
        ..PsoConfig::default()
    };
    let user = ms.first().map_or(0, |m| m.k);
    let r = py
        .allow_threads(|| hybridloc::pso::localize(&model, &city.0, user, &ms, &cfg))
        .map_err(py_err)?;
    Ok(((r.estimate.x, r.estimate.y), r.objective, r.trace))
}

/// Empirical CDF as `(errors, probabilities)`.
#[pyfunction]
fn make_cdf(errors: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let c = harness::make_cdf(&errors).map_err(py_err)?;
    Ok((c.errors, c.probabilities))
}

/// Runs a Monte-Carlo comparison from a JSON config string; returns the
/// report as JSON. Relative paths in the config resolve against `base`.
#[pyfunction]
#[pyo3(signature = (config_json, out, base = "."))]
fn run_experiment(py: Python<'_>, config_json: &str, out: &str, base: &str) -> PyResult<String> {
    let cfg: ExperimentConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let report = py
        .allow_threads(|| harness::run_experiment(&cfg, Path::new(base), Path::new(out)))
        .map_err(py_err)?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
pub fn hybridloc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCityMap>()?;
    m.add_class::<PyPathLoss>()?;
    m.add_class::<PyGainNetwork>()?;
    m.add_function(wrap_pyfunction!(true_antenna_gain, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(fit_pathloss, m)?)?;
    m.add_function(wrap_pyfunction!(train_gain, m)?)?;
    m.add_function(wrap_pyfunction!(localize, m)?)?;
    m.add_function(wrap_pyfunction!(make_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
