//! Offline two-phase channel learning and hybrid prediction.
//!
//! Phase one fits log-distance path loss per segment while ignoring the
//! antenna; phase two freezes those parameters and trains the gain network
//! on what the path loss leaves unexplained.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{AntennaPattern, Measurement, PathLossParams, Segment, TruthRecord};
use crate::citymap::CityMap;
use crate::geometry::{Point2, Point3, UavPose};
use crate::netgain::{features, Adam, GainFeatures, GainNetwork, GainSample};
use crate::{Error, Result};

/// A measurement from a user whose position is known, with derived geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingRecord {
    pub n: usize,
    pub k: usize,
    pub pose: UavPose,
    pub user: Point2,
    pub g: f64,
    pub segment: Segment,
    pub distance: f64,
    pub features: GainFeatures,
}

/// Labeled offline training data.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    pub records: Vec<TrainingRecord>,
}

/// User positions keyed by user id, as found in a truth sidecar.
pub fn user_positions(truth: &[TruthRecord]) -> BTreeMap<usize, Point2> {
    truth.iter().map(|t| (t.k, t.user)).collect()
}

impl TrainingSet {
    /// Labels every measurement against the map at its user's known position.
    pub fn new(
        map: &CityMap,
        measurements: &[Measurement],
        users: &BTreeMap<usize, Point2>,
    ) -> Result<Self> {
        let records = measurements
            .iter()
            .map(|m| {
                let user = *users.get(&m.k).ok_or_else(|| {
                    Error::invalid(
                        "training set",
                        format!("no known position for user {}", m.k),
                    )
                })?;
                let u = map.ground_point(user);
                Ok(TrainingRecord {
                    n: m.n,
                    k: m.k,
                    pose: m.pose,
                    user,
                    g: m.g,
                    segment: Segment::from_los(map.is_los(m.pose.position, user)?),
                    distance: m.pose.position.distance(&u),
                    features: features(&m.pose, u)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, z: Segment) -> usize {
        self.records.iter().filter(|r| r.segment == z).count()
    }
}

/// A pair of per-segment values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerSegment<T> {
    pub los: T,
    pub nlos: T,
}

impl<T> PerSegment<T> {
    pub fn get(&self, z: Segment) -> &T {
        match z {
            Segment::Los => &self.los,
            Segment::Nlos => &self.nlos,
        }
    }
}

/// Ordinary least squares of `g` on `-10 log10 d`, returning (slope, intercept).
fn fit_line(z: Segment, records: &[&TrainingRecord]) -> Result<(f64, f64)> {
    if records.len() < 2 {
        return Err(Error::Fit {
            segment: z.name(),
            reason: format!("{} record(s), need at least 2", records.len()),
        });
    }
    let n = records.len() as f64;
    let xs: Vec<f64> = records.iter().map(|r| -10.0 * r.distance.log10()).collect();
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = records.iter().map(|r| r.g).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, r) in xs.iter().zip(records) {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (r.g - mean_y);
    }
    if !(sxx > 1e-12 * n * (1.0 + mean_x * mean_x)) {
        return Err(Error::Fit {
            segment: z.name(),
            reason: "all records share the same distance".into(),
        });
    }
    let slope = sxy / sxx;
    Ok((slope, mean_y - slope * mean_x))
}

/// Phase one: per-segment least-squares path-loss fit with the antenna
/// ignored. The shadowing variances are known inputs and carried through.
pub fn fit_pathloss(
    train: &TrainingSet,
    sigma2_los: f64,
    sigma2_nlos: f64,
) -> Result<PathLossParams> {
    let split = |z: Segment| -> Vec<&TrainingRecord> {
        train.records.iter().filter(|r| r.segment == z).collect()
    };
    let (alpha_los, beta_los) = fit_line(Segment::Los, &split(Segment::Los))?;
    let (alpha_nlos, beta_nlos) = fit_line(Segment::Nlos, &split(Segment::Nlos))?;
    for (z, a) in [(Segment::Los, alpha_los), (Segment::Nlos, alpha_nlos)] {
        if !(a > 0.0) {
            return Err(Error::Fit {
                segment: z.name(),
                reason: format!("fitted exponent {a} is not positive"),
            });
        }
    }
    let params = PathLossParams {
        alpha_los,
        alpha_nlos,
        beta_los,
        beta_nlos,
        sigma2_los,
        sigma2_nlos,
    };
    params.validate()?;
    Ok(params)
}

/// Summary of a path-loss fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub alpha_los: f64,
    pub beta_los: f64,
    pub alpha_nlos: f64,
    pub beta_nlos: f64,
    pub residual_rms_per_segment: PerSegment<f64>,
    pub n_records_per_segment: PerSegment<usize>,
}

impl FitReport {
    pub fn new(train: &TrainingSet, params: &PathLossParams) -> Result<Self> {
        let rms = |z: Segment| -> Result<f64> {
            let mut sum = 0.0;
            let mut n = 0usize;
            for r in train.records.iter().filter(|r| r.segment == z) {
                let e = r.g - params.path_loss(z, r.distance)?;
                sum += e * e;
                n += 1;
            }
            Ok(if n == 0 { 0.0 } else { (sum / n as f64).sqrt() })
        };
        Ok(Self {
            alpha_los: params.alpha_los,
            beta_los: params.beta_los,
            alpha_nlos: params.alpha_nlos,
            beta_nlos: params.beta_nlos,
            residual_rms_per_segment: PerSegment {
                los: rms(Segment::Los)?,
                nlos: rms(Segment::Nlos)?,
            },
            n_records_per_segment: PerSegment {
                los: train.count(Segment::Los),
                nlos: train.count(Segment::Nlos),
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Optimizer settings for the gain network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a held-out improvement.
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 500,
            patience: 25,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::invalid(
                "train config",
                "learning rate and batch size must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid(
                "train config",
                "validation fraction must be in [0, 1)",
            ));
        }
        Ok(())
    }
}

/// Per-epoch mean weighted squared residuals. Epoch 0 is the untrained network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_train: f64,
    pub loss_val: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedGain {
    pub network: GainNetwork,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Residual targets `g - phi_z(d)` weighted by `1 / sigma_z^2`.
pub fn gain_samples(train: &TrainingSet, fixed: &PathLossParams) -> Result<Vec<GainSample>> {
    train
        .records
        .iter()
        .map(|r| {
            Ok(GainSample {
                x: r.features,
                target: r.g - fixed.path_loss(r.segment, r.distance)?,
                weight: 1.0 / fixed.sigma2(r.segment),
            })
        })
        .collect()
}

fn mean_loss(net: &GainNetwork, samples: &[GainSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    net.loss(samples) / samples.len() as f64
}

/// Phase two: trains a standard gain network with the path loss frozen.
pub fn train_gain(
    train: &TrainingSet,
    fixed: &PathLossParams,
    cfg: &TrainConfig,
) -> Result<TrainedGain> {
    train_gain_from(GainNetwork::standard(cfg.seed), train, fixed, cfg)
}

/// Phase two starting from a given network (its output bias is re-initialized).
///
/// Minimizes the weighted squared residual part of the negative
/// log-likelihood; the LoS-count term does not depend on the network and is
/// left out. Returns the parameters with the lowest held-out loss.
pub fn train_gain_from(
    mut net: GainNetwork,
    train: &TrainingSet,
    fixed: &PathLossParams,
    cfg: &TrainConfig,
) -> Result<TrainedGain> {
    cfg.validate()?;
    fixed.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set", "empty"));
    }
    let samples = gain_samples(train, fixed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (samples.len() as f64 * cfg.validation_fraction).round() as usize;
    let n_val = n_val.min(samples.len() - 1);
    let val: Vec<GainSample> = order[..n_val].iter().map(|&i| samples[i]).collect();
    let mut fit: Vec<GainSample> = order[n_val..].iter().map(|&i| samples[i]).collect();
    let held_out = |net: &GainNetwork, fit: &[GainSample]| {
        if val.is_empty() {
            mean_loss(net, fit)
        } else {
            mean_loss(net, &val)
        }
    };

    // start the linear output at the weighted mean residual
    let wsum: f64 = fit.iter().map(|s| s.weight).sum();
    let mean_target = fit.iter().map(|s| s.weight * s.target).sum::<f64>() / wsum;
    net.set_output_bias(mean_target);

    let mut log = vec![EpochLog {
        epoch: 0,
        loss_train: mean_loss(&net, &fit),
        loss_val: held_out(&net, &fit),
    }];
    let mut best = (log[0].loss_val, 0usize, net.params().to_vec());
    let mut opt = Adam::new(net.param_count(), cfg.learning_rate);
    let mut last_finite = Some(0);

    for epoch in 1..=cfg.epochs {
        fit.shuffle(&mut rng);
        for batch in fit.chunks(cfg.batch_size) {
            let (_, mut grad) = net.gradient(batch);
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(net.params_mut(), &grad);
        }
        let entry = EpochLog {
            epoch,
            loss_train: mean_loss(&net, &fit),
            loss_val: held_out(&net, &fit),
        };
        if !(entry.loss_train.is_finite() && entry.loss_val.is_finite()) {
            return Err(Error::Training {
                epoch,
                last_finite_epoch: last_finite,
            });
        }
        last_finite = Some(epoch);
        log.push(entry);
        if entry.loss_val < best.0 {
            best = (entry.loss_val, epoch, net.params().to_vec());
        } else if epoch - best.1 > cfg.patience {
            break;
        }
    }

    net.params_mut().copy_from_slice(&best.2);
    Ok(TrainedGain {
        network: net,
        log,
        best_epoch: best.1,
    })
}

pub fn write_training_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for e in log {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_training_log(path: impl AsRef<Path>) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|e| e.map_err(Error::from)).collect()
}

/// The antenna-gain term of a channel model.
#[derive(Debug, Clone, PartialEq)]
pub enum GainTerm {
    /// No antenna effect; the conventional path-loss-only model.
    Zero,
    /// A closed-form pattern (used for perfect-model studies).
    Analytic(AntennaPattern),
    /// A learned network.
    Network(GainNetwork),
}

impl GainTerm {
    pub fn gain(&self, pose: &UavPose, user: Point3) -> Result<f64> {
        match self {
            GainTerm::Zero => {
                if pose.position == user {
                    return Err(Error::Domain("UAV and candidate coincide".into()));
                }
                Ok(0.0)
            }
            GainTerm::Analytic(p) => p.gain(pose, user),
            GainTerm::Network(net) => Ok(net.forward(&features(pose, user)?)),
        }
    }

    /// Gains for many poses toward one user; equal to calling [`Self::gain`] per pose.
    pub fn gains<'a>(
        &self,
        poses: impl IntoIterator<Item = &'a UavPose>,
        user: Point3,
    ) -> Result<Vec<f64>> {
        match self {
            GainTerm::Network(net) => {
                let xs = poses
                    .into_iter()
                    .map(|p| features(p, user))
                    .collect::<Result<Vec<_>>>()?;
                Ok(net.forward_batch(&xs))
            }
            _ => poses.into_iter().map(|p| self.gain(p, user)).collect(),
        }
    }
}

/// Segmented path loss plus an antenna-gain term.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridChannelModel {
    pub params: PathLossParams,
    pub gain: GainTerm,
}

impl HybridChannelModel {
    pub fn new(params: PathLossParams, gain: GainTerm) -> Result<Self> {
        params.validate()?;
        Ok(Self { params, gain })
    }

    /// The same path loss with the antenna term removed.
    pub fn baseline(&self) -> Self {
        Self {
            params: self.params,
            gain: GainTerm::Zero,
        }
    }

    /// Predicted received power for a link of known segment.
    pub fn predict(&self, pose: &UavPose, user: Point3, z: Segment) -> Result<f64> {
        let d = pose.position.distance(&user);
        Ok(self.params.path_loss(z, d)? + self.gain.gain(pose, user)?)
    }
}
