//! Ground-truth air-to-ground radio simulation.
//!
//! Received power in dB is modeled as segmented log-distance path loss plus
//! the UAV antenna gain plus Gaussian shadowing, with the LoS/NLoS segment
//! chosen from the city map.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::citymap::CityMap;
use crate::geometry::{Point2, Point3, UavPose};
use crate::{Error, Result};

/// Propagation segment of a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Los,
    Nlos,
}

impl Segment {
    pub fn from_los(los: bool) -> Self {
        if los {
            Segment::Los
        } else {
            Segment::Nlos
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Segment::Los => "LoS",
            Segment::Nlos => "NLoS",
        }
    }
}

/// Log-distance path-loss parameters for both segments, plus the known
/// shadowing variances (dB^2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLossParams {
    pub alpha_los: f64,
    pub alpha_nlos: f64,
    pub beta_los: f64,
    pub beta_nlos: f64,
    pub sigma2_los: f64,
    pub sigma2_nlos: f64,
}

impl Default for PathLossParams {
    /// Urban-micro values used for the simulated city.
    fn default() -> Self {
        Self {
            alpha_los: 2.2,
            alpha_nlos: 3.2,
            beta_los: -32.0,
            beta_nlos: -35.0,
            sigma2_los: 2.0,
            sigma2_nlos: 5.0,
        }
    }
}

impl PathLossParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha_los,
            self.alpha_nlos,
            self.beta_los,
            self.beta_nlos,
            self.sigma2_los,
            self.sigma2_nlos,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("path-loss parameters", "non-finite value"));
        }
        if self.alpha_los <= 0.0 || self.alpha_nlos <= 0.0 {
            return Err(Error::invalid(
                "path-loss parameters",
                "exponents must be positive",
            ));
        }
        if self.sigma2_los <= 0.0 || self.sigma2_nlos <= 0.0 {
            return Err(Error::invalid(
                "path-loss parameters",
                "variances must be positive",
            ));
        }
        Ok(())
    }

    pub fn alpha(&self, z: Segment) -> f64 {
        match z {
            Segment::Los => self.alpha_los,
            Segment::Nlos => self.alpha_nlos,
        }
    }

    pub fn beta(&self, z: Segment) -> f64 {
        match z {
            Segment::Los => self.beta_los,
            Segment::Nlos => self.beta_nlos,
        }
    }

    pub fn sigma2(&self, z: Segment) -> f64 {
        match z {
            Segment::Los => self.sigma2_los,
            Segment::Nlos => self.sigma2_nlos,
        }
    }

    /// `ln(sigma2_los / sigma2_nlos)`, charged once per LoS measurement in
    /// the negative log-likelihood.
    pub fn log_variance_ratio(&self) -> f64 {
        (self.sigma2_los / self.sigma2_nlos).ln()
    }

    /// Mean received power `beta - 10 alpha log10(d)` in dB.
    pub fn path_loss(&self, z: Segment, d: f64) -> Result<f64> {
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Domain(format!("distance must be positive, got {d}")));
        }
        Ok(self.beta(z) - 10.0 * self.alpha(z) * d.log10())
    }
}

/// Elevation (from the horizontal plane) and azimuth (clockwise from north)
/// of `target` as seen from `from`.
pub fn elevation_azimuth(from: Point3, target: Point3) -> Result<(f64, f64)> {
    let dx = target.x - from.x;
    let dy = target.y - from.y;
    let dz = target.z - from.z;
    let horiz = dx.hypot(dy);
    if horiz == 0.0 && dz == 0.0 {
        return Err(Error::Domain("UAV and user coincide".into()));
    }
    Ok(((-dz).atan2(horiz), dx.atan2(dy)))
}

/// The simulated UAV antenna pattern `15 (|cos rho| + 2 |sin(phi + psi)|)`
/// in dB, with rho/phi the elevation/azimuth of the user from the UAV.
pub fn true_antenna_gain(pose: &UavPose, user: Point3) -> Result<f64> {
    let (rho, phi) = elevation_azimuth(pose.position, user)?;
    Ok(15.0 * (rho.cos().abs() + 2.0 * (phi + pose.heading).sin().abs()))
}

/// Antenna pattern used to generate ground-truth measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AntennaPattern {
    /// 0 dB in every direction.
    Isotropic,
    /// The direction- and heading-dependent pattern of [`true_antenna_gain`].
    #[default]
    Anisotropic,
}

impl AntennaPattern {
    pub fn gain(&self, pose: &UavPose, user: Point3) -> Result<f64> {
        match self {
            AntennaPattern::Isotropic => {
                elevation_azimuth(pose.position, user)?;
                Ok(0.0)
            }
            AntennaPattern::Anisotropic => true_antenna_gain(pose, user),
        }
    }
}

/// Everything needed to simulate measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundTruth {
    pub params: PathLossParams,
    pub pattern: AntennaPattern,
    /// Draw shadowing noise; `false` gives the noiseless mean channel.
    pub shadowing: bool,
}

impl Default for GroundTruth {
    fn default() -> Self {
        Self {
            params: PathLossParams::default(),
            pattern: AntennaPattern::Anisotropic,
            shadowing: true,
        }
    }
}

impl GroundTruth {
    /// Noise-free mean received power for a labeled link.
    pub fn mean_gain(
        &self,
        map: &CityMap,
        pose: &UavPose,
        user: Point2,
        z: Segment,
    ) -> Result<f64> {
        let u = map.ground_point(user);
        let d = pose.position.distance(&u);
        Ok(self.params.path_loss(z, d)? + self.pattern.gain(pose, u)?)
    }
}

/// One RSS sample `g` (dB) at time index `n` (1-based) from user `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub n: usize,
    pub k: usize,
    pub pose: UavPose,
    pub g: f64,
}

/// Diagnostic ground truth for one measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub n: usize,
    pub k: usize,
    #[serde(with = "los_flag")]
    pub los: bool,
    pub user: Point2,
}

mod los_flag {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(D::Error::custom(format!(
                "los flag must be 0 or 1, got {v}"
            ))),
        }
    }
}

/// Simulated measurements with their hidden labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub measurements: Vec<Measurement>,
    pub truth: Vec<TruthRecord>,
}

/// Simulates one measurement per (pose, user) pair.
///
/// Records are ordered user-major: all poses of user 0, then user 1, and so
/// on. Shadowing draws are i.i.d. and fully determined by `seed`.
pub fn synthesize_dataset(
    map: &CityMap,
    truth: &GroundTruth,
    users: &[Point2],
    poses: &[UavPose],
    seed: u64,
) -> Result<Dataset> {
    truth.params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Dataset {
        measurements: Vec::with_capacity(users.len() * poses.len()),
        truth: Vec::with_capacity(users.len() * poses.len()),
    };
    for (k, &user) in users.iter().enumerate() {
        if !map.contains(user) {
            return Err(Error::Domain(format!(
                "user {k} at {user:?} outside map extent"
            )));
        }
        for (i, pose) in poses.iter().enumerate() {
            let los = map.is_los(pose.position, user)?;
            let z = Segment::from_los(los);
            let mut g = truth.mean_gain(map, pose, user, z)?;
            if truth.shadowing {
                g += truth.params.sigma2(z).sqrt() * unit.sample(&mut rng);
            }
            let n = i + 1;
            out.measurements.push(Measurement {
                n,
                k,
                pose: *pose,
                g,
            });
            out.truth.push(TruthRecord { n, k, los, user });
        }
    }
    Ok(out)
}

/// How UAV measurement positions are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlightPattern {
    /// Independent uniform positions and headings.
    Random,
    /// Boustrophedon sweep of parallel east-west lanes at the band's mid altitude.
    Lawnmower,
}

/// Pose sampling for a data-collection flight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseSpec {
    pub pattern: FlightPattern,
    pub count: usize,
    pub altitude_min: f64,
    pub altitude_max: f64,
}

impl Default for PoseSpec {
    fn default() -> Self {
        Self {
            pattern: FlightPattern::Random,
            count: 200,
            altitude_min: 40.0,
            altitude_max: 100.0,
        }
    }
}

impl PoseSpec {
    pub fn sample<R: Rng + ?Sized>(&self, map: &CityMap, rng: &mut R) -> Result<Vec<UavPose>> {
        use std::f64::consts::{FRAC_PI_2, PI};
        if !(self.altitude_min > 0.0 && self.altitude_min <= self.altitude_max) {
            return Err(Error::invalid(
                "pose spec",
                format!(
                    "altitude band [{}, {}]",
                    self.altitude_min, self.altitude_max
                ),
            ));
        }
        let (lo, hi) = map.extent();
        match self.pattern {
            FlightPattern::Random => (0..self.count)
                .map(|_| {
                    let p = Point3::new(
                        rng.gen_range(lo.x..=hi.x),
                        rng.gen_range(lo.y..=hi.y),
                        rng.gen_range(self.altitude_min..=self.altitude_max),
                    );
                    UavPose::new(p, rng.gen_range(-PI..PI))
                })
                .collect(),
            FlightPattern::Lawnmower => {
                if self.count == 0 {
                    return Ok(Vec::new());
                }
                let lanes = (self.count as f64).sqrt().ceil() as usize;
                let per_lane = self.count.div_ceil(lanes);
                let z = 0.5 * (self.altitude_min + self.altitude_max);
                let (mx, my) = (0.05 * map.width(), 0.05 * map.depth());
                let frac = |i: usize, n: usize| {
                    if n > 1 {
                        i as f64 / (n - 1) as f64
                    } else {
                        0.5
                    }
                };
                let mut poses = Vec::with_capacity(self.count);
                'sweep: for lane in 0..lanes {
                    let y = lo.y + my + frac(lane, lanes) * (map.depth() - 2.0 * my);
                    let eastbound = lane % 2 == 0;
                    for i in 0..per_lane {
                        let f = frac(i, per_lane);
                        let f = if eastbound { f } else { 1.0 - f };
                        let x = lo.x + mx + f * (map.width() - 2.0 * mx);
                        let heading = if eastbound { FRAC_PI_2 } else { -FRAC_PI_2 };
                        poses.push(UavPose::new(Point3::new(x, y, z), heading)?);
                        if poses.len() == self.count {
                            break 'sweep;
                        }
                    }
                }
                Ok(poses)
            }
        }
    }
}

/// Uniform user positions that avoid building interiors.
pub fn sample_outdoor_users<R: Rng + ?Sized>(
    map: &CityMap,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Point2>> {
    let (lo, hi) = map.extent();
    let mut users = Vec::with_capacity(count);
    let mut tries = 0usize;
    while users.len() < count {
        tries += 1;
        if tries > 1000 * (count + 1) {
            return Err(Error::Construction("no outdoor space for users".into()));
        }
        let p = Point2::new(rng.gen_range(lo.x..=hi.x), rng.gen_range(lo.y..=hi.y));
        if !map.is_indoor(p) {
            users.push(p);
        }
    }
    Ok(users)
}

#[derive(Serialize, Deserialize)]
struct MeasurementRecord {
    n: usize,
    k: usize,
    pos: Point3,
    psi: f64,
    g: f64,
}

fn write_lines<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Writes the line-delimited measurement log.
pub fn write_measurements(path: impl AsRef<Path>, ms: &[Measurement]) -> Result<()> {
    write_lines(
        path.as_ref(),
        ms.iter().map(|m| MeasurementRecord {
            n: m.n,
            k: m.k,
            pos: m.pose.position,
            psi: m.pose.heading,
            g: m.g,
        }),
    )
}

/// Reads and validates a measurement log.
pub fn read_measurements(path: impl AsRef<Path>) -> Result<Vec<Measurement>> {
    let records: Vec<MeasurementRecord> = read_lines(path.as_ref())?;
    records
        .into_iter()
        .map(|r| {
            if r.n < 1 {
                return Err(Error::invalid("measurement", "time index n must be >= 1"));
            }
            if !r.g.is_finite() {
                return Err(Error::invalid(
                    "measurement",
                    format!("non-finite RSS at n={}", r.n),
                ));
            }
            Ok(Measurement {
                n: r.n,
                k: r.k,
                pose: UavPose::new(r.pos, r.psi)?,
                g: r.g,
            })
        })
        .collect()
}

/// Writes the ground-truth sidecar.
pub fn write_truth(path: impl AsRef<Path>, truth: &[TruthRecord]) -> Result<()> {
    write_lines(path.as_ref(), truth.iter())
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<Vec<TruthRecord>> {
    read_lines(path.as_ref())
}
