use std::collections::BTreeSet;

use hybridloc::channel::{AntennaPattern, GroundTruth, PoseSpec};
use hybridloc::harness::config::load_config;
use hybridloc::harness::{
    read_errors, run_experiment, CdfCurve, ExperimentConfig, ExperimentReport,
};
use hybridloc::learning::{read_training_log, FitReport, TrainConfig};
use hybridloc::pso::read_results;
use hybridloc::{CityMap, CitySpec, Error, GainNetwork, PsoConfig};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        trials: 2,
        train_users: 8,
        train_poses: PoseSpec {
            count: 300,
            ..PoseSpec::default()
        },
        test_users: 3,
        test_poses: PoseSpec {
            count: 60,
            ..PoseSpec::default()
        },
        train: TrainConfig {
            epochs: 20,
            ..TrainConfig::default()
        },
        pso: PsoConfig {
            particles: 40,
            iterations: 60,
            ..PsoConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn trivial_scenario_localizes_both_models() {
    let cfg = ExperimentConfig {
        city: CitySpec {
            building_count: 0,
            ..CitySpec::default()
        },
        truth: GroundTruth {
            pattern: AntennaPattern::Isotropic,
            shadowing: false,
            ..GroundTruth::default()
        },
        ..small()
    };
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, std::path::Path::new("."), dir.path()).unwrap();
    assert_eq!(report.failures(), 0);
    assert!(report.hybrid.median_m.unwrap() < 1.0, "{:?}", report.hybrid);
    assert!(
        report.baseline.median_m.unwrap() < 1.0,
        "{:?}",
        report.baseline
    );
}

#[test]
fn outputs_round_trip_and_pair_models() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let report = run_experiment(&cfg, std::path::Path::new("."), d).unwrap();

    let back: ExperimentReport = load_config(d.join("report.json")).unwrap();
    assert_eq!(back, report);
    assert_eq!(
        load_config::<ExperimentConfig>(d.join("config.json")).unwrap(),
        cfg
    );

    let rows = read_errors(d.join("errors.csv")).unwrap();
    let keys = |m: &str| -> BTreeSet<(usize, usize)> {
        rows.iter()
            .filter(|r| r.model == m)
            .map(|r| (r.trial, r.user))
            .collect()
    };
    assert_eq!(keys("hybrid"), keys("baseline"));
    assert_eq!(keys("hybrid").len(), cfg.trials * cfg.test_users);

    for m in ["hybrid", "baseline"] {
        let c = CdfCurve::load_csv(d.join(format!("cdf_{m}.csv"))).unwrap();
        assert_eq!(c.probabilities.last(), Some(&1.0));
    }
    let t = d.join("trial_000");
    CityMap::load(t.join("map.json")).unwrap();
    FitReport::load(t.join("fit_report.json")).unwrap();
    GainNetwork::load(t.join("gain_model.json")).unwrap();
    assert!(!read_training_log(t.join("training_log.csv"))
        .unwrap()
        .is_empty());
    assert_eq!(
        read_results(t.join("results_hybrid.json")).unwrap().len(),
        cfg.test_users
    );
    assert_eq!(
        read_results(t.join("results_baseline.json")).unwrap().len(),
        cfg.test_users
    );

    let mut trace = csv::Reader::from_path(t.join("channel_trace.csv")).unwrap();
    let n = trace.records().count();
    assert_eq!(n, cfg.test_users * cfg.test_poses.count);
}

#[test]
fn stage_failures_are_named() {
    let cfg = ExperimentConfig {
        map: Some("does/not/exist.json".into()),
        ..small()
    };
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&cfg, std::path::Path::new("."), dir.path()).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "map", .. }), "{err}");

    let cfg = ExperimentConfig {
        truth: GroundTruth {
            shadowing: false,
            ..GroundTruth::default()
        },
        train_users: 1,
        train_poses: PoseSpec {
            count: 1,
            ..PoseSpec::default()
        },
        ..small()
    };
    let err = run_experiment(&cfg, std::path::Path::new("."), dir.path()).unwrap_err();
    assert!(
        matches!(
            err,
            Error::Stage {
                stage: "fit-pathloss",
                ..
            }
        ),
        "{err}"
    );
}
