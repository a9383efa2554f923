//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails, unless the config lists that criterion
//! under `known_failures` with a reason. Known failures still print FAIL.
//! Settings that are not fixed below are read from `configs/acceptance.json`
//! at the workspace root.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use hybridloc::channel::{
    sample_outdoor_users, synthesize_dataset, true_antenna_gain, AntennaPattern, GroundTruth,
    PoseSpec,
};
use hybridloc::harness::{make_cdf, read_errors, run_experiment, ExperimentConfig};
use hybridloc::learning::{fit_pathloss, train_gain, user_positions, GainTerm, TrainConfig};
use hybridloc::netgain::{
    features, GainFeatures, GainSample, STANDARD_ACTIVATIONS, STANDARD_LAYERS,
};
use hybridloc::pso::{localize, objective};
use hybridloc::{
    CityMap, CitySpec, GainNetwork, HybridChannelModel, Point2, Point3, PsoConfig, TrainingSet,
};

const PARAM_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-5;
/// Derivatives smaller than this are compared absolutely.
const FD_FLOOR: f64 = 1e-4;
const LOS_STEP: f64 = 0.1;
const GRAZE_EPS: f64 = 1e-6;
const LOC_TOL_M: f64 = 1.0;
const GRID_STEP: f64 = 0.5;

#[derive(Deserialize)]
struct AcceptanceConfig {
    gain_rmse_tolerance_db: f64,
    gain_seed: u64,
    monte_carlo: ExperimentConfig,
    determinism: ExperimentConfig,
    #[serde(default)]
    known_failures: BTreeMap<String, String>,
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let o = f();
    let el = t.elapsed();
    Outcome {
        pass: o.pass && el < limit,
        detail: format!(
            "{}; {:.1}s (limit {}s)",
            o.detail,
            el.as_secs_f64(),
            limit.as_secs()
        ),
    }
}

fn path_loss_recovery() -> Outcome {
    let map = CitySpec::default().generate(7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let users = sample_outdoor_users(&map, 10, &mut rng).unwrap();
    let poses = PoseSpec::default().sample(&map, &mut rng).unwrap();
    let truth = GroundTruth {
        pattern: AntennaPattern::Isotropic,
        shadowing: false,
        ..GroundTruth::default()
    };
    let ds = synthesize_dataset(&map, &truth, &users, &poses, 7).unwrap();
    let train = TrainingSet::new(&map, &ds.measurements, &user_positions(&ds.truth)).unwrap();
    let p = fit_pathloss(&train, 2.0, 5.0).unwrap();
    let t = &truth.params;
    let err = [
        p.alpha_los - t.alpha_los,
        p.alpha_nlos - t.alpha_nlos,
        p.beta_los - t.beta_los,
        p.beta_nlos - t.beta_nlos,
    ]
    .iter()
    .fold(0.0_f64, |m, e| m.max(e.abs()));
    check(
        err < PARAM_TOL,
        format!("max |param error| {err:.2e} (tol {PARAM_TOL:e})"),
    )
}

/// Resamples the input until every relu pre-activation is clear of its kink.
fn away_from_kinks(net: &GainNetwork, rng: &mut ChaCha8Rng) -> GainFeatures {
    loop {
        let x = GainFeatures([
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(-3.2..3.2),
        ]);
        let pre = net.preactivations(&x);
        let clear = pre
            .iter()
            .zip(net.activations())
            .filter(|(_, a)| *a == hybridloc::netgain::Activation::Relu)
            .all(|(z, _)| z.iter().all(|v| v.abs() > 1e-2));
        if clear {
            return x;
        }
    }
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    let mut checked = 0usize;
    for point in 0..100u64 {
        let mut net =
            GainNetwork::new(&STANDARD_LAYERS, &STANDARD_ACTIVATIONS, 1000 + point).unwrap();
        for b in net.params_mut() {
            *b += rng.gen_range(-0.05..0.05);
        }
        let x = away_from_kinks(&net, &mut rng);
        let batch = [GainSample {
            x,
            target: rng.gen_range(-10.0..40.0),
            weight: rng.gen_range(0.2..0.5),
        }];
        let (_, grad) = net.gradient(&batch);
        // a random subset of coordinates plus the last layer in full
        let n = net.param_count();
        let mut idx: Vec<usize> = (0..40).map(|_| rng.gen_range(0..n)).collect();
        idx.extend(n - 41..n);
        for i in idx {
            let orig = net.params()[i];
            net.params_mut()[i] = orig + FD_STEP;
            let up = net.loss(&batch);
            net.params_mut()[i] = orig - FD_STEP;
            let down = net.loss(&batch);
            net.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(FD_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    check(
        worst < FD_REL_TOL,
        format!("max relative error {worst:.2e} over {checked} coordinates at 100 points (tol {FD_REL_TOL:e})"),
    )
}

fn gain_approximation(cfg: &AcceptanceConfig) -> Outcome {
    let seed = cfg.gain_seed;
    let map = CitySpec::default().generate(seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = sample_outdoor_users(&map, 10, &mut rng).unwrap();
    let poses = PoseSpec::default().sample(&map, &mut rng).unwrap();
    let truth = GroundTruth {
        shadowing: false,
        ..GroundTruth::default()
    };
    let ds = synthesize_dataset(&map, &truth, &users, &poses, seed).unwrap();
    let train = TrainingSet::new(&map, &ds.measurements, &user_positions(&ds.truth)).unwrap();
    let trained = train_gain(
        &train,
        &truth.params,
        &TrainConfig {
            seed,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    // held out: the same users seen from a fresh flight
    let fresh = PoseSpec::default().sample(&map, &mut rng).unwrap();
    let mut se = 0.0;
    for u in &users {
        let u = map.ground_point(*u);
        for p in &fresh {
            let e = trained.network.forward(&features(p, u).unwrap())
                - true_antenna_gain(p, u).unwrap();
            se += e * e;
        }
    }
    let rmse = (se / (users.len() * fresh.len()) as f64).sqrt();
    let tol = cfg.gain_rmse_tolerance_db;
    check(
        rmse < tol,
        format!(
            "{} records, held-out RMSE {rmse:.3} dB (tol {tol} dB)",
            train.len()
        ),
    )
}

/// Exact slab test against an open box grown by `grow` on every side.
fn box_blocks(b: &hybridloc::Building, a: Point3, c: Point3, grow: f64) -> bool {
    let lo = [b.min.x - grow, b.min.y - grow];
    let hi = [b.max.x + grow, b.max.y + grow];
    let (p, d) = ([a.x, a.y], [c.x - a.x, c.y - a.y]);
    let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
    for k in 0..2 {
        if d[k] == 0.0 {
            if p[k] <= lo[k] || p[k] >= hi[k] {
                return false;
            }
        } else {
            let (u, v) = ((lo[k] - p[k]) / d[k], (hi[k] - p[k]) / d[k]);
            t0 = t0.max(u.min(v));
            t1 = t1.min(u.max(v));
        }
    }
    if t0 >= t1 {
        return false;
    }
    let z = |t: f64| a.z + t * (c.z - a.z);
    z(t0).min(z(t1)) < b.height + grow
}

fn sampled_clear(map: &CityMap, a: Point3, c: Point3) -> bool {
    let steps = (a.distance(&c) / LOS_STEP).ceil().max(1.0) as usize;
    (1..steps).all(|i| {
        let t = i as f64 / steps as f64;
        let q = Point3::new(
            a.x + t * (c.x - a.x),
            a.y + t * (c.y - a.y),
            a.z + t * (c.z - a.z),
        );
        !map.buildings()
            .iter()
            .any(|b| b.footprint_contains(q.xy()) && q.z < b.height)
    })
}

fn los_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut agree, mut grazing, mut total, mut blocked) = (0usize, 0usize, 0usize, 0usize);
    let mut mismatches = Vec::new();
    for city in 0..10 {
        let map = CitySpec::default().generate(400 + city).unwrap();
        let (lo, hi) = map.extent();
        for _ in 0..1000 {
            let uav = Point3::new(
                rng.gen_range(lo.x..hi.x),
                rng.gen_range(lo.y..hi.y),
                rng.gen_range(1.0..100.0),
            );
            let user = Point2::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y));
            total += 1;
            let g = map.ground_point(user);
            let outer = map
                .buildings()
                .iter()
                .any(|b| box_blocks(b, uav, g, GRAZE_EPS));
            let inner = map
                .buildings()
                .iter()
                .any(|b| box_blocks(b, uav, g, -GRAZE_EPS));
            if outer != inner {
                grazing += 1;
                continue;
            }
            let exact = map.is_los(uav, user).unwrap();
            blocked += usize::from(!exact);
            if exact == sampled_clear(&map, uav, g) {
                agree += 1;
            } else {
                mismatches.push((city, uav, user, exact));
            }
        }
    }
    let compared = total - grazing;
    for m in mismatches.iter().take(3) {
        eprintln!("  LoS mismatch (city, uav, user, exact): {m:?}");
    }
    check(
        agree == compared,
        format!(
            "{agree}/{compared} agree ({blocked} blocked), {grazing} grazing excluded of {total}"
        ),
    )
}

fn brute_force_argmin(
    model: &HybridChannelModel,
    map: &CityMap,
    ms: &[hybridloc::Measurement],
) -> Point2 {
    let (lo, hi) = map.extent();
    let nx = ((hi.x - lo.x) / GRID_STEP).round() as usize;
    let ny = ((hi.y - lo.y) / GRID_STEP).round() as usize;
    let mut best = (f64::INFINITY, lo);
    for i in 0..=nx {
        for j in 0..=ny {
            let c = Point2::new(lo.x + i as f64 * GRID_STEP, lo.y + j as f64 * GRID_STEP);
            let v = objective(model, map, ms, c);
            if v < best.0 {
                best = (v, c);
            }
        }
    }
    best.1
}

fn pso_identifiability() -> Outcome {
    let map = CityMap::empty(Point2::new(0.0, 0.0), Point2::new(300.0, 300.0)).unwrap();
    let truth = GroundTruth {
        shadowing: false,
        ..GroundTruth::default()
    };
    let model = HybridChannelModel::new(truth.params, GainTerm::Analytic(truth.pattern)).unwrap();
    let mut hits = 0;
    let mut worst_basin = 0.0_f64;
    for run in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + run);
        let user = Point2::new(rng.gen_range(0.0..300.0), rng.gen_range(0.0..300.0));
        let poses = PoseSpec::default().sample(&map, &mut rng).unwrap();
        let ds = synthesize_dataset(&map, &truth, &[user], &poses, run).unwrap();
        let cfg = PsoConfig {
            seed: run,
            ..PsoConfig::default()
        };
        let r = localize(&model, &map, 0, &ds.measurements, &cfg).unwrap();
        if r.estimate.distance(&user) < LOC_TOL_M {
            hits += 1;
        }
        if run < 3 {
            let g = brute_force_argmin(&model, &map, &ds.measurements);
            worst_basin = worst_basin.max(g.distance(&r.estimate));
        }
    }
    check(
        hits >= 95 && worst_basin < 2.0 * GRID_STEP,
        format!("{hits}/100 within {LOC_TOL_M} m; max |pso - grid argmin| {worst_basin:.3} m over 3 runs"),
    )
}

fn hybrid_beats_baseline(cfg: &ExperimentConfig) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(cfg, &workspace_root(), dir.path()).unwrap();
    let rows = read_errors(dir.path().join("errors.csv")).unwrap();
    let errors = |model: &str| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.model == model)
            .map(|r| r.error_m)
            .collect()
    };
    let h = make_cdf(&errors("hybrid")).unwrap();
    let b = make_cdf(&errors("baseline")).unwrap();
    let pass = h.median() < b.median()
        && h.quantile(0.5) < b.quantile(0.5)
        && h.quantile(0.8) < b.quantile(0.8)
        && report.failures() == 0;
    check(
        pass,
        format!(
            "{} trials; median {:.2} vs {:.2} m, p80 {:.2} vs {:.2} m (hybrid vs baseline), {} failures",
            report.trials,
            h.median(),
            b.median(),
            h.quantile(0.8),
            b.quantile(0.8),
            report.failures()
        ),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn determinism(cfg: &ExperimentConfig) -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(cfg, &workspace_root(), a.path()).unwrap();
    run_experiment(cfg, &workspace_root(), b.path()).unwrap();
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let differing: Vec<_> = sa
        .iter()
        .filter(|(k, v)| sb.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    check(
        sa.len() == sb.len() && differing.is_empty(),
        format!(
            "{} files compared, {} differ {:?}",
            sa.len(),
            differing.len(),
            differing
        ),
    )
}

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    let cfg_path = workspace_root().join("configs/acceptance.json");
    let cfg: AcceptanceConfig =
        serde_json::from_str(&std::fs::read_to_string(&cfg_path).expect("acceptance config"))
            .unwrap();
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let secs = Duration::from_secs;
    let criteria: Vec<(&str, Criterion)> = vec![
        (
            "path-loss recovery",
            Box::new(|| timed(secs(5), path_loss_recovery)),
        ),
        (
            "gradient correctness",
            Box::new(|| timed(secs(10), gradient_correctness)),
        ),
        (
            "gain approximation",
            Box::new(|| timed(secs(300), || gain_approximation(&cfg))),
        ),
        (
            "LoS oracle equivalence",
            Box::new(|| timed(secs(30), los_oracle)),
        ),
        (
            "PSO identifiability",
            Box::new(|| timed(secs(120), pso_identifiability)),
        ),
        (
            "hybrid beats baseline",
            Box::new(|| timed(secs(1800), || hybrid_beats_baseline(&cfg.monte_carlo))),
        ),
        ("determinism", Box::new(|| determinism(&cfg.determinism))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let o = run();
        let known = cfg.known_failures.get(&(i + 1).to_string());
        failed += usize::from(!o.pass && known.is_none());
        println!(
            "{} {}. {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
        match (o.pass, known) {
            (false, Some(why)) => println!("   known failure: {why}"),
            (true, Some(_)) => println!("   listed as a known failure but passed"),
            _ => {}
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
