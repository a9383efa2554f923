//! Command-line front end.
//!
//! Every subcommand takes `--config <file.json>` and `--out <dir>`; `--seed`
//! overrides the config's seed(s). Exit status is 0 only on full success.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hybridloc::channel::{
    read_measurements, read_truth, sample_outdoor_users, synthesize_dataset, write_measurements,
    write_truth,
};
use hybridloc::citymap::CitySpec;
use hybridloc::harness::config::{
    load_config, load_or_generate_map, resolve, save_config, FitConfig, GenDataConfig,
    LocalizeConfig, TrainGainConfig,
};
use hybridloc::harness::{init_workers, run_experiment, ExperimentConfig, StageSeeds};
use hybridloc::learning::{
    fit_pathloss, train_gain, user_positions, write_training_log, FitReport, GainTerm,
    HybridChannelModel, TrainingSet,
};
use hybridloc::netgain::{CheckpointMeta, GainNetwork};
use hybridloc::pso::{group_by_user, localize_all, write_results, ResultEntry};
use hybridloc::{CityMap, Error, PathLossParams, Result};

#[derive(Parser)]
#[command(
    name = "hybridloc",
    version,
    about = "UAV-aided RSS localization with hybrid channel models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file (missing fields take defaults)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random city map
    GenMap(Common),
    /// Simulate a UAV measurement campaign
    GenData(Common),
    /// Fit LoS/NLoS path-loss parameters from a labeled campaign
    FitPathloss(Common),
    /// Train the antenna-gain network with path loss frozen
    TrainGain(Common),
    /// Localize every user in a measurement log
    Localize(Common),
    /// Run the Monte-Carlo hybrid-vs-baseline comparison
    Evaluate(Common),
}

impl Common {
    fn load<T: Default + for<'de> serde::Deserialize<'de>>(&self) -> Result<T> {
        match &self.config {
            Some(p) => load_config(p),
            None => Ok(T::default()),
        }
    }

    /// Directory that relative paths in the config are resolved against.
    fn base(&self) -> PathBuf {
        self.config
            .as_ref()
            .and_then(|p| p.parent())
            .map(Path::to_path_buf)
            .unwrap_or_default()
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).map_err(|e| Error::Io {
            path: self.out.clone(),
            source: e,
        })?;
        Ok(&self.out)
    }
}

/// `gen-map` accepts a bare city spec plus a seed.
#[derive(serde::Deserialize, serde::Serialize, Default)]
#[serde(default)]
struct GenMapConfig {
    city: CitySpec,
    seed: u64,
}

fn gen_map(c: &Common) -> Result<()> {
    let mut cfg: GenMapConfig = c.load()?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = c.out_dir()?;
    let map = cfg.city.generate(cfg.seed)?;
    map.save(out.join("map.json"))?;
    info!("wrote {} buildings", map.buildings().len());
    Ok(())
}

fn gen_data(c: &Common) -> Result<()> {
    let mut cfg: GenDataConfig = c.load()?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = c.out_dir()?;
    let base = c.base();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let map = load_or_generate_map(
        &base,
        cfg.map.as_deref(),
        &cfg.city,
        hybridloc::derive_seed(cfg.seed, 0),
        cfg.receiver_height,
    )?;
    let users = if cfg.users.is_empty() {
        sample_outdoor_users(&map, cfg.user_count, &mut rng)?
    } else {
        cfg.users.clone()
    };
    let poses = cfg.poses.sample(&map, &mut rng)?;
    let ds = synthesize_dataset(
        &map,
        &cfg.truth,
        &users,
        &poses,
        hybridloc::derive_seed(cfg.seed, 1),
    )?;
    map.save(out.join("map.json"))?;
    write_measurements(out.join("measurements.jsonl"), &ds.measurements)?;
    write_truth(out.join("truth.jsonl"), &ds.truth)?;
    save_config(out.join("config.json"), &cfg)?;
    info!("wrote {} measurements", ds.measurements.len());
    Ok(())
}

fn load_training(
    base: &Path,
    map: &Path,
    ms: &Path,
    truth: &Path,
    h: f64,
) -> Result<(CityMap, TrainingSet)> {
    let map = CityMap::load(resolve(base, map))?.with_receiver_height(h)?;
    let ms = read_measurements(resolve(base, ms))?;
    let truth = read_truth(resolve(base, truth))?;
    let train = TrainingSet::new(&map, &ms, &user_positions(&truth))?;
    Ok((map, train))
}

fn fit(c: &Common) -> Result<()> {
    let cfg: FitConfig = c.load()?;
    let out = c.out_dir()?;
    let (_, train) = load_training(
        &c.base(),
        &cfg.map,
        &cfg.measurements,
        &cfg.truth,
        cfg.receiver_height,
    )?;
    let params = fit_pathloss(&train, cfg.sigma2_los, cfg.sigma2_nlos)?;
    FitReport::new(&train, &params)?.save(out.join("fit_report.json"))?;
    save_config(out.join("pathloss.json"), &params)?;
    info!(
        "alpha {:.4}/{:.4}, beta {:.4}/{:.4}",
        params.alpha_los, params.alpha_nlos, params.beta_los, params.beta_nlos
    );
    Ok(())
}

fn train(c: &Common) -> Result<()> {
    let mut cfg: TrainGainConfig = c.load()?;
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    let out = c.out_dir()?;
    let base = c.base();
    let (_, train) = load_training(
        &base,
        &cfg.map,
        &cfg.measurements,
        &cfg.truth,
        cfg.receiver_height,
    )?;
    let params: PathLossParams = load_config(resolve(&base, &cfg.pathloss))?;
    let trained = train_gain(&train, &params, &cfg.train)?;
    trained.network.save(
        out.join("gain_model.json"),
        CheckpointMeta {
            trained_on: cfg.measurements.display().to_string(),
            seed: cfg.train.seed,
            epochs: trained.best_epoch,
        },
    )?;
    write_training_log(out.join("training_log.csv"), &trained.log)?;
    save_config(out.join("config.json"), &cfg)?;
    Ok(())
}

fn localize(c: &Common) -> Result<bool> {
    let mut cfg: LocalizeConfig = c.load()?;
    if let Some(s) = c.seed {
        cfg.pso.seed = s;
    }
    let out = c.out_dir()?;
    let base = c.base();
    let map = CityMap::load(resolve(&base, &cfg.map))?.with_receiver_height(cfg.receiver_height)?;
    let ms = read_measurements(resolve(&base, &cfg.measurements))?;
    let params: PathLossParams = load_config(resolve(&base, &cfg.pathloss))?;
    let gain = match &cfg.gain_model {
        Some(p) => GainTerm::Network(GainNetwork::load(resolve(&base, p))?.0),
        None => GainTerm::Zero,
    };
    let model = HybridChannelModel::new(params, gain)?;
    let truth = match &cfg.truth {
        Some(p) => Some(user_positions(&read_truth(resolve(&base, p))?)),
        None => None,
    };
    let groups = group_by_user(&ms);
    let results = localize_all(&model, &map, &groups, &cfg.pso, truth.as_ref());
    let entries: Vec<ResultEntry> = groups
        .iter()
        .zip(&results)
        .map(|((k, _), r)| ResultEntry::from_result(*k, r))
        .collect();
    write_results(out.join("results.json"), &entries)?;
    let failed = results.iter().filter(|r| r.is_err()).count();
    for r in results.iter().filter_map(|r| r.as_ref().err()) {
        error!("{r}");
    }
    Ok(failed == 0)
}

fn evaluate(c: &Common) -> Result<bool> {
    let mut cfg: ExperimentConfig = c.load()?;
    if let Some(s) = c.seed {
        cfg.seeds = StageSeeds::from_base(s);
    }
    let out = c.out_dir()?;
    let report = run_experiment(&cfg, &c.base(), out)?;
    println!(
        "hybrid median {:?} m, baseline median {:?} m over {} trials",
        report.hybrid.median_m, report.baseline.median_m, report.trials
    );
    Ok(report.failures() == 0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let workers = init_workers();
    info!("{workers} worker thread(s)");
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::GenMap(c) => gen_map(c).map(|_| true),
        Command::GenData(c) => gen_data(c).map(|_| true),
        Command::FitPathloss(c) => fit(c).map(|_| true),
        Command::TrainGain(c) => train(c).map(|_| true),
        Command::Localize(c) => localize(c),
        Command::Evaluate(c) => evaluate(c),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
