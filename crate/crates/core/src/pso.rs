//! Map-aware particle swarm localization.
//!
//! Each particle is a candidate ground position. Its cost is the negative
//! log-likelihood of the user's measurements under the channel model, with
//! every measurement classified LoS/NLoS by the map *as if* the user stood at
//! the particle. Users are localized independently.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{Measurement, Segment};
use crate::citymap::CityMap;
use crate::geometry::Point2;
use crate::learning::{read_json, write_json, HybridChannelModel};
use crate::{derive_seed, Error, Result};

/// Swarm settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsoConfig {
    pub particles: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    /// Maximum step length per iteration (m); `None` means 10% of the map diagonal.
    pub velocity_cap: Option<f64>,
    pub seed: u64,
    /// Reuse LoS labels within square cells of this edge (m); `None` classifies exactly.
    pub label_cell: Option<f64>,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            particles: 100,
            iterations: 150,
            inertia: 0.72,
            cognitive: 1.49,
            social: 1.49,
            velocity_cap: None,
            seed: 0,
            label_cell: None,
        }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::invalid("PSO config", "need at least one particle"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("PSO config", "need at least one iteration"));
        }
        if !(self.inertia > 0.0 && self.inertia < 1.0) {
            return Err(Error::invalid(
                "PSO config",
                format!("inertia {} not in (0, 1)", self.inertia),
            ));
        }
        if !(self.cognitive >= 0.0 && self.social >= 0.0) {
            return Err(Error::invalid(
                "PSO config",
                "acceleration weights must be non-negative",
            ));
        }
        if let Some(c) = self.velocity_cap {
            if !(c > 0.0) {
                return Err(Error::invalid(
                    "PSO config",
                    "velocity cap must be positive",
                ));
            }
        }
        if let Some(c) = self.label_cell {
            if !(c > 0.0) {
                return Err(Error::invalid("PSO config", "label cell must be positive"));
            }
        }
        Ok(())
    }

    fn cap(&self, map: &CityMap) -> f64 {
        self.velocity_cap.unwrap_or(0.1 * map.diagonal())
    }
}

/// A swarm member.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub position: Point2,
    pub velocity: Point2,
    pub best_position: Point2,
    pub best_objective: f64,
}

/// Outcome of localizing one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub user: usize,
    pub estimate: Point2,
    pub objective: f64,
    /// Global-best objective after initialization, then after each iteration.
    pub trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_m: Option<f64>,
}

/// Negative log-likelihood of `measurements` given fixed labels.
fn labeled_objective(
    model: &HybridChannelModel,
    map: &CityMap,
    measurements: &[Measurement],
    candidate: Point2,
    labels: &[bool],
) -> f64 {
    let u = map.ground_point(candidate);
    let p = &model.params;
    let Ok(gains) = model.gain.gains(measurements.iter().map(|m| &m.pose), u) else {
        return f64::INFINITY;
    };
    let mut los_count = 0usize;
    let mut sum = 0.0;
    for ((m, &los), gain) in measurements.iter().zip(labels).zip(gains) {
        let z = Segment::from_los(los);
        los_count += usize::from(los);
        match p.path_loss(z, m.pose.position.distance(&u)) {
            Ok(pl) => {
                let r = m.g - (pl + gain);
                sum += r * r / p.sigma2(z);
            }
            Err(_) => return f64::INFINITY,
        }
    }
    p.log_variance_ratio() * los_count as f64 + sum
}

/// Cost of placing the user at `candidate`; `+inf` off the map.
pub fn objective(
    model: &HybridChannelModel,
    map: &CityMap,
    measurements: &[Measurement],
    candidate: Point2,
) -> f64 {
    if !candidate.is_finite() || !map.contains(candidate) {
        return f64::INFINITY;
    }
    let labels: Vec<bool> = measurements
        .iter()
        .map(|m| map.segment_is_clear(m.pose.position, map.ground_point(candidate)))
        .collect();
    labeled_objective(model, map, measurements, candidate, &labels)
}

type CellLabels = HashMap<(i64, i64), std::sync::Arc<Vec<bool>>>;

/// LoS labels memoized per quantized candidate cell, evaluated at cell centers.
struct LabelCache {
    cell: f64,
    entries: Mutex<CellLabels>,
}

impl LabelCache {
    fn new(cell: f64) -> Self {
        Self {
            cell,
            entries: Mutex::new(HashMap::new()),
        }
    }

    fn center(&self, p: Point2) -> ((i64, i64), Point2) {
        let i = (p.x / self.cell).floor();
        let j = (p.y / self.cell).floor();
        (
            (i as i64, j as i64),
            Point2::new((i + 0.5) * self.cell, (j + 0.5) * self.cell),
        )
    }

    fn labels(
        &self,
        map: &CityMap,
        measurements: &[Measurement],
        p: Point2,
    ) -> std::sync::Arc<Vec<bool>> {
        let (key, c) = self.center(p);
        if let Some(v) = self.entries.lock().unwrap().get(&key) {
            return v.clone();
        }
        let c = map.ground_point(c);
        let v: std::sync::Arc<Vec<bool>> = std::sync::Arc::new(
            measurements
                .iter()
                .map(|m| map.segment_is_clear(m.pose.position, c))
                .collect(),
        );
        self.entries.lock().unwrap().insert(key, v.clone());
        v
    }
}

/// Objective using labels shared across a `cell`-sized square.
pub fn objective_memoized(
    model: &HybridChannelModel,
    map: &CityMap,
    measurements: &[Measurement],
    candidate: Point2,
    cell: f64,
) -> f64 {
    objective_cached(model, map, measurements, candidate, &LabelCache::new(cell))
}

fn objective_cached(
    model: &HybridChannelModel,
    map: &CityMap,
    measurements: &[Measurement],
    candidate: Point2,
    cache: &LabelCache,
) -> f64 {
    if !candidate.is_finite() || !map.contains(candidate) {
        return f64::INFINITY;
    }
    let labels = cache.labels(map, measurements, candidate);
    labeled_objective(model, map, measurements, candidate, &labels)
}

/// Runs the swarm for one user and returns its global best.
pub fn localize(
    model: &HybridChannelModel,
    map: &CityMap,
    user: usize,
    measurements: &[Measurement],
    cfg: &PsoConfig,
) -> Result<LocalizationResult> {
    cfg.validate()?;
    if measurements.is_empty() {
        return Err(Error::Localization {
            user,
            reason: "no measurements".into(),
        });
    }
    let cache = cfg.label_cell.map(LabelCache::new);
    let eval = |p: Point2| match &cache {
        Some(c) => objective_cached(model, map, measurements, p, c),
        None => objective(model, map, measurements, p),
    };
    let eval_all =
        |ps: &[Particle]| -> Vec<f64> { ps.par_iter().map(|p| eval(p.position)).collect() };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = map.extent();
    let cap = cfg.cap(map);
    let mut swarm: Vec<Particle> = (0..cfg.particles)
        .map(|_| {
            let p = Point2::new(rng.gen_range(lo.x..=hi.x), rng.gen_range(lo.y..=hi.y));
            Particle {
                position: p,
                velocity: Point2::new(0.0, 0.0),
                best_position: p,
                best_objective: f64::INFINITY,
            }
        })
        .collect();
    let initial = eval_all(&swarm);
    for (p, f) in swarm.iter_mut().zip(initial) {
        p.best_objective = f;
    }
    let pick_best = |swarm: &[Particle]| -> (Point2, f64) {
        swarm
            .iter()
            .fold((swarm[0].best_position, f64::INFINITY), |acc, p| {
                if p.best_objective < acc.1 {
                    (p.best_position, p.best_objective)
                } else {
                    acc
                }
            })
    };
    let (mut gbest, mut gbest_f) = pick_best(&swarm);
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    trace.push(gbest_f);

    for _ in 0..cfg.iterations {
        for p in swarm.iter_mut() {
            let (r1x, r1y, r2x, r2y): (f64, f64, f64, f64) =
                (rng.gen(), rng.gen(), rng.gen(), rng.gen());
            let mut vx = cfg.inertia * p.velocity.x
                + cfg.cognitive * r1x * (p.best_position.x - p.position.x)
                + cfg.social * r2x * (gbest.x - p.position.x);
            let mut vy = cfg.inertia * p.velocity.y
                + cfg.cognitive * r1y * (p.best_position.y - p.position.y)
                + cfg.social * r2y * (gbest.y - p.position.y);
            let speed = vx.hypot(vy);
            if speed > cap {
                vx *= cap / speed;
                vy *= cap / speed;
            }
            p.velocity = Point2::new(vx, vy);
            p.position = map.clamp(Point2::new(p.position.x + vx, p.position.y + vy));
        }
        let values = eval_all(&swarm);
        for (p, f) in swarm.iter_mut().zip(values) {
            if f < p.best_objective {
                p.best_objective = f;
                p.best_position = p.position;
            }
        }
        let (b, f) = pick_best(&swarm);
        if f < gbest_f {
            gbest = b;
            gbest_f = f;
        }
        trace.push(gbest_f);
    }

    if !gbest_f.is_finite() {
        return Err(Error::Localization {
            user,
            reason: "no particle reached a finite objective".into(),
        });
    }
    Ok(LocalizationResult {
        user,
        estimate: gbest,
        objective: objective(model, map, measurements, gbest),
        trace,
        error_m: None,
    })
}

/// Splits measurements by user id, ordered by id.
pub fn group_by_user(measurements: &[Measurement]) -> Vec<(usize, Vec<Measurement>)> {
    let mut groups: BTreeMap<usize, Vec<Measurement>> = BTreeMap::new();
    for m in measurements {
        groups.entry(m.k).or_default().push(*m);
    }
    groups.into_iter().collect()
}

/// Localizes each user group independently, in input order.
///
/// User `k` runs with seed `derive_seed(cfg.seed, k)`, so its result does not
/// depend on which other users are present. When `truth` has the user's
/// position, `error_m` is filled in.
pub fn localize_all(
    model: &HybridChannelModel,
    map: &CityMap,
    groups: &[(usize, Vec<Measurement>)],
    cfg: &PsoConfig,
    truth: Option<&BTreeMap<usize, Point2>>,
) -> Vec<Result<LocalizationResult>> {
    groups
        .par_iter()
        .map(|(k, ms)| {
            let user_cfg = PsoConfig {
                seed: derive_seed(cfg.seed, *k as u64),
                ..cfg.clone()
            };
            let mut r = localize(model, map, *k, ms, &user_cfg)?;
            r.error_m = truth
                .and_then(|t| t.get(k))
                .map(|u| u.distance(&r.estimate));
            Ok(r)
        })
        .collect()
}

/// One line of a results file: a result, or the reason a user failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ResultEntry {
    Ok(LocalizationResult),
    Failed { user: usize, failure: String },
}

impl ResultEntry {
    pub fn from_result(user: usize, r: &Result<LocalizationResult>) -> Self {
        match r {
            Ok(v) => ResultEntry::Ok(v.clone()),
            Err(e) => ResultEntry::Failed {
                user,
                failure: e.to_string(),
            },
        }
    }
}

pub fn write_results(path: impl AsRef<Path>, entries: &[ResultEntry]) -> Result<()> {
    write_json(path.as_ref(), &entries)
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultEntry>> {
    read_json(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{
        synthesize_dataset, AntennaPattern, GroundTruth, PathLossParams, PoseSpec,
    };
    use crate::citymap::{Building, CitySpec};
    use crate::geometry::{Point3, UavPose};
    use crate::learning::GainTerm;
    use approx::assert_abs_diff_eq;

    fn perfect_model() -> HybridChannelModel {
        HybridChannelModel::new(
            PathLossParams::default(),
            GainTerm::Analytic(AntennaPattern::Anisotropic),
        )
        .unwrap()
    }

    fn scenario(
        map: &CityMap,
        user: Point2,
        n: usize,
        shadowing: bool,
        seed: u64,
    ) -> Vec<Measurement> {
        let poses = PoseSpec {
            count: n,
            ..PoseSpec::default()
        }
        .sample(map, &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap();
        let truth = GroundTruth {
            shadowing,
            ..GroundTruth::default()
        };
        synthesize_dataset(map, &truth, &[user], &poses, seed)
            .unwrap()
            .measurements
    }

    #[test]
    fn zero_residual_at_truth() {
        let map = CitySpec::default().generate(1).unwrap();
        let user = Point2::new(2.0, 150.0);
        let ms = scenario(&map, user, 50, false, 3);
        let n_los = map
            .classify(&ms.iter().map(|m| m.pose).collect::<Vec<_>>(), user)
            .unwrap()
            .iter()
            .filter(|l| **l)
            .count();
        let f = objective(&perfect_model(), &map, &ms, user);
        assert_abs_diff_eq!(f, (2.0_f64 / 5.0).ln() * n_los as f64, epsilon = 1e-9);
    }

    #[test]
    fn single_measurement_by_hand() {
        // user at origin; one UAV above a building, one beside it
        let map = CityMap::new(
            Point2::new(-50.0, -50.0),
            Point2::new(50.0, 50.0),
            vec![Building::new(Point2::new(10.0, -5.0), Point2::new(20.0, 5.0), 30.0).unwrap()],
        )
        .unwrap();
        let model = perfect_model();
        let c = Point2::new(0.0, 0.0);

        // NLoS: from (40,0,10) the ray passes through the building
        let pose = UavPose::new(Point3::new(40.0, 0.0, 10.0), 0.0).unwrap();
        let m = Measurement {
            n: 1,
            k: 0,
            pose,
            g: -80.0,
        };
        let d = (40.0_f64 * 40.0 + 10.0 * 10.0).sqrt();
        let rho = (10.0_f64).atan2(40.0);
        let phi = -std::f64::consts::FRAC_PI_2; // user due west of the UAV
        let gain = 15.0 * (rho.cos().abs() + 2.0 * phi.sin().abs());
        let pred = -35.0 - 32.0 * d.log10() + gain;
        let hand = (-80.0 - pred).powi(2) / 5.0;
        assert_abs_diff_eq!(objective(&model, &map, &[m], c), hand, epsilon = 1e-9);

        // LoS: same pose but north of the building row
        let pose = UavPose::new(Point3::new(0.0, 30.0, 40.0), 0.5).unwrap();
        let m = Measurement {
            n: 1,
            k: 0,
            pose,
            g: -60.0,
        };
        let d = 50.0_f64;
        let rho = (40.0_f64).atan2(30.0);
        let phi = std::f64::consts::PI; // due south
        let gain = 15.0 * (rho.cos().abs() + 2.0 * (phi + 0.5).sin().abs());
        let pred = -32.0 - 22.0 * d.log10() + gain;
        let hand = (2.0_f64 / 5.0).ln() + (-60.0 - pred).powi(2) / 2.0;
        assert_abs_diff_eq!(objective(&model, &map, &[m], c), hand, epsilon = 1e-9);
    }

    #[test]
    fn objective_is_order_invariant_and_infinite_off_map() {
        let map = CitySpec::default().generate(2).unwrap();
        let mut ms = scenario(&map, Point2::new(100.0, 100.0), 40, true, 4);
        let model = perfect_model();
        let c = Point2::new(90.0, 120.0);
        let a = objective(&model, &map, &ms, c);
        ms.reverse();
        let b = objective(&model, &map, &ms, c);
        assert_abs_diff_eq!(a, b, epsilon = 1e-9 * a.abs());
        assert_eq!(
            objective(&model, &map, &ms, Point2::new(-1.0, 5.0)),
            f64::INFINITY
        );
    }

    #[test]
    fn memoized_labels_match_cell_centers() {
        let map = CitySpec::default().generate(3).unwrap();
        let ms = scenario(&map, Point2::new(100.0, 100.0), 30, true, 5);
        let model = perfect_model();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let p = Point2::new(rng.gen_range(0.0..300.0), rng.gen_range(0.0..300.0));
            let center = Point2::new(
                (p.x / 0.5).floor() * 0.5 + 0.25,
                (p.y / 0.5).floor() * 0.5 + 0.25,
            );
            let poses: Vec<UavPose> = ms.iter().map(|m| m.pose).collect();
            let exact_center = map.classify(&poses, center).unwrap();
            let labels = LabelCache::new(0.5).labels(&map, &ms, p);
            assert_eq!(*labels, exact_center);
            // with identical labels the objective is identical
            if map.classify(&poses, p).unwrap() == exact_center {
                assert_eq!(
                    objective_memoized(&model, &map, &ms, p, 0.5),
                    objective(&model, &map, &ms, p)
                );
            }
        }
    }

    #[test]
    fn trace_is_non_increasing_and_objective_recomputed() {
        let map = CitySpec::default().generate(4).unwrap();
        let ms = scenario(&map, Point2::new(60.0, 200.0), 60, true, 6);
        let cfg = PsoConfig {
            particles: 20,
            iterations: 30,
            seed: 9,
            ..PsoConfig::default()
        };
        let r = localize(&perfect_model(), &map, 0, &ms, &cfg).unwrap();
        assert_eq!(r.trace.len(), 31);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(
            r.objective,
            objective(&perfect_model(), &map, &ms, r.estimate)
        );
        assert_eq!(r.objective, *r.trace.last().unwrap());
    }

    #[test]
    fn result_beats_every_initial_particle() {
        let map = CitySpec::default().generate(5).unwrap();
        let ms = scenario(&map, Point2::new(200.0, 30.0), 40, true, 7);
        let cfg = PsoConfig {
            particles: 15,
            iterations: 10,
            seed: 2,
            ..PsoConfig::default()
        };
        let r = localize(&perfect_model(), &map, 0, &ms, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..cfg.particles {
            let p = Point2::new(rng.gen_range(0.0..=300.0), rng.gen_range(0.0..=300.0));
            assert!(r.objective <= objective(&perfect_model(), &map, &ms, p));
        }
    }

    #[test]
    fn single_particle_returns_its_best_visit() {
        let map = CitySpec::default().generate(6).unwrap();
        let ms = scenario(&map, Point2::new(150.0, 150.0), 20, true, 8);
        let cfg = PsoConfig {
            particles: 1,
            iterations: 5,
            ..PsoConfig::default()
        };
        let r = localize(&perfect_model(), &map, 0, &ms, &cfg).unwrap();
        assert!(map.contains(r.estimate));
        assert_eq!(r.objective, *r.trace.last().unwrap());
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let map = CitySpec::default().generate(7).unwrap();
        let ms = scenario(&map, Point2::new(150.0, 150.0), 30, true, 8);
        let cfg = PsoConfig {
            particles: 10,
            iterations: 10,
            seed: 3,
            ..PsoConfig::default()
        };
        let a = localize(&perfect_model(), &map, 0, &ms, &cfg).unwrap();
        let b = localize(&perfect_model(), &map, 0, &ms, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            PsoConfig {
                particles: 0,
                ..PsoConfig::default()
            },
            PsoConfig {
                iterations: 0,
                ..PsoConfig::default()
            },
            PsoConfig {
                inertia: 1.0,
                ..PsoConfig::default()
            },
            PsoConfig {
                velocity_cap: Some(0.0),
                ..PsoConfig::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn users_are_independent() {
        let map = CitySpec::default().generate(8).unwrap();
        let a = scenario(&map, Point2::new(40.0, 40.0), 20, true, 1)
            .into_iter()
            .map(|m| Measurement { k: 3, ..m })
            .collect::<Vec<_>>();
        let b = scenario(&map, Point2::new(250.0, 250.0), 20, true, 2)
            .into_iter()
            .map(|m| Measurement { k: 7, ..m })
            .collect::<Vec<_>>();
        let cfg = PsoConfig {
            particles: 10,
            iterations: 8,
            seed: 11,
            ..PsoConfig::default()
        };
        let model = perfect_model();
        let both = localize_all(&model, &map, &[(3, a.clone()), (7, b.clone())], &cfg, None);
        let swapped = localize_all(&model, &map, &[(7, b), (3, a.clone())], &cfg, None);
        let alone = localize_all(&model, &map, &[(3, a.clone())], &cfg, None);
        assert_eq!(both[0].as_ref().unwrap(), swapped[1].as_ref().unwrap());
        assert_eq!(both[0].as_ref().unwrap(), alone[0].as_ref().unwrap());
        let direct = localize(
            &model,
            &map,
            3,
            &a,
            &PsoConfig {
                seed: derive_seed(11, 3),
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(&direct, alone[0].as_ref().unwrap());
    }

    #[test]
    fn failures_are_per_user() {
        let map = CitySpec::default().generate(9).unwrap();
        let ms = scenario(&map, Point2::new(40.0, 40.0), 10, true, 1);
        let cfg = PsoConfig {
            particles: 5,
            iterations: 3,
            ..PsoConfig::default()
        };
        let out = localize_all(
            &perfect_model(),
            &map,
            &[(0, ms), (1, Vec::new())],
            &cfg,
            None,
        );
        assert!(out[0].is_ok());
        assert!(matches!(out[1], Err(Error::Localization { user: 1, .. })));
    }

    #[test]
    fn results_file_round_trip() {
        let r = LocalizationResult {
            user: 2,
            estimate: Point2::new(1.5, -2.25),
            objective: 12.0,
            trace: vec![20.0, 12.0],
            error_m: Some(0.5),
        };
        let entries = vec![
            ResultEntry::Ok(r.clone()),
            ResultEntry::Ok(LocalizationResult { error_m: None, ..r }),
            ResultEntry::Failed {
                user: 4,
                failure: "boom".into(),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("results.json");
        write_results(&p, &entries).unwrap();
        assert_eq!(read_results(&p).unwrap(), entries);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.matches("error_m").count(), 1);
    }
}
