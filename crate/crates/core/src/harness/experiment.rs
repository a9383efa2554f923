use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cdf::make_cdf;
use super::config::{load_or_generate_map, ExperimentConfig};
use crate::channel::{sample_outdoor_users, synthesize_dataset, PathLossParams, Segment};
use crate::citymap::CityMap;
use crate::geometry::Point2;
use crate::learning::{
    fit_pathloss, train_gain, write_json, write_training_log, EpochLog, FitReport, GainTerm,
    HybridChannelModel, TrainConfig, TrainingRecord, TrainingSet,
};
use crate::netgain::{CheckpointMeta, GainNetwork};
use crate::pso::{
    group_by_user, localize_all, write_results, LocalizationResult, PsoConfig, ResultEntry,
};
use crate::{derive_seed, Error, Result};

/// Measured vs. predicted power for one test measurement, both models
/// evaluated at the user's true position with the true label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub trial: usize,
    pub user: usize,
    pub n: usize,
    pub los: u8,
    pub measured: f64,
    pub hybrid: f64,
    pub baseline: f64,
}

/// One localization error sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub trial: usize,
    pub user: usize,
    pub model: String,
    pub error_m: f64,
}

/// Everything produced by one Monte-Carlo trial.
#[derive(Debug)]
pub struct TrialOutcome {
    pub trial: usize,
    pub map: CityMap,
    pub fit: FitReport,
    pub train_records: usize,
    pub train_log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub network: GainNetwork,
    pub test_users: Vec<Point2>,
    pub hybrid: Vec<Result<LocalizationResult>>,
    pub baseline: Vec<Result<LocalizationResult>>,
    pub traces: Vec<TraceRow>,
}

impl TrialOutcome {
    fn errors(results: &[Result<LocalizationResult>]) -> Vec<f64> {
        results
            .iter()
            .filter_map(|r| r.as_ref().ok().and_then(|r| r.error_m))
            .collect()
    }

    pub fn hybrid_errors(&self) -> Vec<f64> {
        Self::errors(&self.hybrid)
    }

    pub fn baseline_errors(&self) -> Vec<f64> {
        Self::errors(&self.baseline)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub samples: usize,
    pub failures: usize,
    pub median_m: Option<f64>,
    pub p80_m: Option<f64>,
    pub mean_m: Option<f64>,
}

impl ModelSummary {
    fn new(errors: &[f64], failures: usize) -> Self {
        let cdf = make_cdf(errors).ok();
        Self {
            samples: errors.len(),
            failures,
            median_m: cdf.as_ref().map(|c| c.median()),
            p80_m: cdf.as_ref().map(|c| c.quantile(0.8)),
            mean_m: (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub fit: FitReport,
    pub train_records: usize,
    pub best_epoch: usize,
    pub hybrid: ModelSummary,
    pub baseline: ModelSummary,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub trials: usize,
    pub hybrid: ModelSummary,
    pub baseline: ModelSummary,
    pub per_trial: Vec<TrialSummary>,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.hybrid.failures + self.baseline.failures
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Path-loss fit that tolerates a segment the map never produces (e.g. no
/// buildings, so no NLoS links): the unobserved segment reuses the observed
/// segment's line. Such a map never labels a link with the missing segment.
fn fit_observed(train: &TrainingSet, sigma2_los: f64, sigma2_nlos: f64) -> Result<PathLossParams> {
    let (los, nlos) = (train.count(Segment::Los), train.count(Segment::Nlos));
    if (los == 0) == (nlos == 0) {
        return fit_pathloss(train, sigma2_los, sigma2_nlos);
    }
    let missing = if los == 0 {
        Segment::Los
    } else {
        Segment::Nlos
    };
    warn!(
        "no {} training records; reusing the other segment's fit",
        missing.name()
    );
    let mut both = train.clone();
    both.records
        .extend(train.records.iter().map(|r| TrainingRecord {
            segment: missing,
            ..*r
        }));
    fit_pathloss(&both, sigma2_los, sigma2_nlos)
}

/// Runs one trial in memory: city, training campaign, two-phase learning,
/// test campaign, and paired hybrid/baseline localization.
pub fn run_trial(cfg: &ExperimentConfig, base: &Path, trial: usize) -> Result<TrialOutcome> {
    let t = trial as u64;
    let s = &cfg.seeds;
    let map = stage(
        "map",
        load_or_generate_map(
            base,
            cfg.map.as_deref(),
            &cfg.city,
            derive_seed(s.city, t),
            cfg.receiver_height,
        ),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s.train_data, t));
    let train = stage(
        "train-data",
        (|| {
            let users = sample_outdoor_users(&map, cfg.train_users, &mut rng)?;
            let poses = cfg.train_poses.sample(&map, &mut rng)?;
            let ds =
                synthesize_dataset(&map, &cfg.truth, &users, &poses, rand::Rng::gen(&mut rng))?;
            let positions: BTreeMap<usize, Point2> = users.iter().copied().enumerate().collect();
            TrainingSet::new(&map, &ds.measurements, &positions)
        })(),
    )?;

    let sigma = &cfg.truth.params;
    let params = stage(
        "fit-pathloss",
        fit_observed(&train, sigma.sigma2_los, sigma.sigma2_nlos),
    )?;
    let fit = stage("fit-pathloss", FitReport::new(&train, &params))?;

    let train_cfg = TrainConfig {
        seed: derive_seed(s.train_gain, t),
        ..cfg.train.clone()
    };
    let trained = stage("train-gain", train_gain(&train, &params, &train_cfg))?;
    let hybrid_model = HybridChannelModel::new(params, GainTerm::Network(trained.network.clone()))?;
    let baseline_model = hybrid_model.baseline();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s.test_data, t));
    let (test_users, test) = stage(
        "test-data",
        (|| {
            let users = sample_outdoor_users(&map, cfg.test_users, &mut rng)?;
            let poses = cfg.test_poses.sample(&map, &mut rng)?;
            let ds =
                synthesize_dataset(&map, &cfg.truth, &users, &poses, rand::Rng::gen(&mut rng))?;
            Ok((users, ds))
        })(),
    )?;

    let truth: BTreeMap<usize, Point2> = test_users.iter().copied().enumerate().collect();
    let groups = group_by_user(&test.measurements);
    let pso = PsoConfig {
        seed: derive_seed(s.pso, t),
        ..cfg.pso.clone()
    };
    stage("localize", pso.validate())?;
    let hybrid = localize_all(&hybrid_model, &map, &groups, &pso, Some(&truth));
    let baseline = localize_all(&baseline_model, &map, &groups, &pso, Some(&truth));

    let traces = stage(
        "channel-trace",
        test.measurements
            .iter()
            .zip(&test.truth)
            .map(|(m, tr)| {
                let z = Segment::from_los(tr.los);
                let u = map.ground_point(tr.user);
                Ok(TraceRow {
                    trial,
                    user: m.k,
                    n: m.n,
                    los: u8::from(tr.los),
                    measured: m.g,
                    hybrid: hybrid_model.predict(&m.pose, u, z)?,
                    baseline: baseline_model.predict(&m.pose, u, z)?,
                })
            })
            .collect::<Result<Vec<_>>>(),
    )?;

    Ok(TrialOutcome {
        trial,
        map,
        fit,
        train_records: train.len(),
        train_log: trained.log,
        best_epoch: trained.best_epoch,
        network: trained.network,
        test_users,
        hybrid,
        baseline,
        traces,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_errors(path: impl AsRef<Path>) -> Result<Vec<ErrorRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|e| e.map_err(Error::from)).collect()
}

fn entries(groups: &[Result<LocalizationResult>], users: usize) -> Vec<ResultEntry> {
    debug_assert_eq!(groups.len(), users);
    groups
        .iter()
        .enumerate()
        .map(|(k, r)| ResultEntry::from_result(k, r))
        .collect()
}

fn write_trial(dir: &Path, o: &TrialOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    o.map.save(dir.join("map.json"))?;
    o.fit.save(dir.join("fit_report.json"))?;
    write_training_log(dir.join("training_log.csv"), &o.train_log)?;
    o.network.save(
        dir.join("gain_model.json"),
        CheckpointMeta {
            trained_on: format!("trial {}", o.trial),
            seed: 0,
            epochs: o.best_epoch,
        },
    )?;
    write_results(
        dir.join("results_hybrid.json"),
        &entries(&o.hybrid, o.test_users.len()),
    )?;
    write_results(
        dir.join("results_baseline.json"),
        &entries(&o.baseline, o.test_users.len()),
    )?;
    write_csv(&dir.join("channel_trace.csv"), &o.traces)
}

/// Runs every trial, writes all artifacts under `out`, and returns the report.
///
/// Per trial: `trial_NNN/{map.json, fit_report.json, training_log.csv,
/// gain_model.json, results_hybrid.json, results_baseline.json,
/// channel_trace.csv}`. Top level: `config.json`, `errors.csv`,
/// `cdf_hybrid.csv`, `cdf_baseline.csv`, `report.json`. Outputs depend only
/// on the config, so reruns are byte-identical.
pub fn run_experiment(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<ExperimentReport> {
    if cfg.trials == 0 {
        return Err(Error::invalid(
            "experiment config",
            "trials must be positive",
        ));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    super::config::save_config(out.join("config.json"), cfg)?;

    let outcomes: Vec<TrialOutcome> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let o = run_trial(cfg, base, t)?;
            write_trial(&out.join(format!("trial_{t:03}")), &o)?;
            info!(
                "trial {t}: hybrid median {:?}, baseline median {:?}",
                ModelSummary::new(&o.hybrid_errors(), 0).median_m,
                ModelSummary::new(&o.baseline_errors(), 0).median_m
            );
            Ok(o)
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let (mut all_h, mut all_b) = (Vec::new(), Vec::new());
    let (mut fail_h, mut fail_b) = (0, 0);
    let mut per_trial = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        for (name, results) in [("hybrid", &o.hybrid), ("baseline", &o.baseline)] {
            for r in results.iter().flatten() {
                if let Some(e) = r.error_m {
                    rows.push(ErrorRow {
                        trial: o.trial,
                        user: r.user,
                        model: name.to_string(),
                        error_m: e,
                    });
                }
            }
        }
        let (eh, eb) = (o.hybrid_errors(), o.baseline_errors());
        let (fh, fb) = (
            o.hybrid.iter().filter(|r| r.is_err()).count(),
            o.baseline.iter().filter(|r| r.is_err()).count(),
        );
        per_trial.push(TrialSummary {
            trial: o.trial,
            fit: o.fit.clone(),
            train_records: o.train_records,
            best_epoch: o.best_epoch,
            hybrid: ModelSummary::new(&eh, fh),
            baseline: ModelSummary::new(&eb, fb),
        });
        all_h.extend(eh);
        all_b.extend(eb);
        fail_h += fh;
        fail_b += fb;
    }
    write_csv(&out.join("errors.csv"), &rows)?;
    if let Ok(c) = make_cdf(&all_h) {
        c.save_csv(out.join("cdf_hybrid.csv"))?;
    }
    if let Ok(c) = make_cdf(&all_b) {
        c.save_csv(out.join("cdf_baseline.csv"))?;
    }
    let report = ExperimentReport {
        trials: cfg.trials,
        hybrid: ModelSummary::new(&all_h, fail_h),
        baseline: ModelSummary::new(&all_b, fail_b),
        per_trial,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}
