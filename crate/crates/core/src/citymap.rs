//! 3D city geometry and map-based LoS/NLoS classification.
//!
//! Buildings are axis-aligned boxes standing on the ground plane. A link is
//! blocked only when the open segment between its endpoints passes strictly
//! through the interior of some box; touching a wall, an edge, or the roof
//! plane does not block.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Point2, Point3, UavPose};
use crate::{Error, Result};

/// Lowest building height produced by the generator (m).
pub const MIN_BUILDING_HEIGHT: f64 = 5.0;
/// Highest building height produced by the generator (m).
pub const MAX_BUILDING_HEIGHT: f64 = 40.0;

/// Rayleigh scale whose mean is 15 m before clamping.
pub fn default_height_scale() -> f64 {
    15.0 / (PI / 2.0).sqrt()
}

/// An extruded rectangular footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub min: Point2,
    pub max: Point2,
    pub height: f64,
}

impl Building {
    pub fn new(min: Point2, max: Point2, height: f64) -> Result<Self> {
        let b = Self { min, max, height };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.height.is_finite()) {
            return Err(Error::invalid("building", "non-finite coordinate"));
        }
        if !(self.min.x < self.max.x && self.min.y < self.max.y) {
            return Err(Error::invalid(
                "building",
                format!("footprint min {:?} not below max {:?}", self.min, self.max),
            ));
        }
        if self.height <= 0.0 {
            return Err(Error::invalid(
                "building",
                format!("height must be positive, got {}", self.height),
            ));
        }
        Ok(())
    }

    /// True if `p` is strictly inside the footprint.
    pub fn footprint_contains(&self, p: Point2) -> bool {
        self.min.x < p.x && p.x < self.max.x && self.min.y < p.y && p.y < self.max.y
    }

    fn overlaps(&self, other: &Building) -> bool {
        self.min.x < other.max.x
            && other.min.x < self.max.x
            && self.min.y < other.max.y
            && other.min.y < self.max.y
    }

    /// Whether the open segment `a -> b` passes through the open box.
    fn blocks(&self, a: Point3, b: Point3) -> bool {
        let dx = b.x - a.x;
        let dy = b.y - a.y;
        let mut t0 = 0.0_f64;
        let mut t1 = 1.0_f64;
        for (p, d, lo, hi) in [
            (a.x, dx, self.min.x, self.max.x),
            (a.y, dy, self.min.y, self.max.y),
        ] {
            if d == 0.0 {
                if !(lo < p && p < hi) {
                    return false;
                }
            } else {
                let ta = (lo - p) / d;
                let tb = (hi - p) / d;
                let (enter, exit) = if ta < tb { (ta, tb) } else { (tb, ta) };
                t0 = t0.max(enter);
                t1 = t1.min(exit);
                if t0 >= t1 {
                    return false;
                }
            }
        }
        // z is linear in t, so its infimum over (t0, t1) sits at an end.
        let z0 = a.z + t0 * (b.z - a.z);
        let z1 = a.z + t1 * (b.z - a.z);
        z0.min(z1) < self.height
    }
}

/// On-disk map layout.
#[derive(Serialize, Deserialize)]
struct MapFile {
    extent: [Point2; 2],
    buildings: Vec<Building>,
}

/// A bounded ground plane with buildings. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MapFile", into = "MapFile")]
pub struct CityMap {
    extent_min: Point2,
    extent_max: Point2,
    buildings: Vec<Building>,
    receiver_height: f64,
}

impl TryFrom<MapFile> for CityMap {
    type Error = Error;

    fn try_from(f: MapFile) -> Result<Self> {
        let map = CityMap::new(f.extent[0], f.extent[1], f.buildings)?;
        for (i, a) in map.buildings.iter().enumerate() {
            for (j, b) in map.buildings.iter().enumerate().skip(i + 1) {
                if a.overlaps(b) {
                    warn!("buildings {i} and {j} overlap");
                }
            }
        }
        Ok(map)
    }
}

impl From<CityMap> for MapFile {
    fn from(m: CityMap) -> Self {
        MapFile {
            extent: [m.extent_min, m.extent_max],
            buildings: m.buildings,
        }
    }
}

impl CityMap {
    /// Validates the extent and every building. Overlaps are permitted here.
    pub fn new(extent_min: Point2, extent_max: Point2, buildings: Vec<Building>) -> Result<Self> {
        if !(extent_min.is_finite() && extent_max.is_finite()) {
            return Err(Error::invalid("map extent", "non-finite bound"));
        }
        if !(extent_min.x < extent_max.x && extent_min.y < extent_max.y) {
            return Err(Error::invalid(
                "map extent",
                format!("{extent_min:?} .. {extent_max:?} is degenerate"),
            ));
        }
        for (i, b) in buildings.iter().enumerate() {
            b.validate()?;
            if b.min.x < extent_min.x
                || b.min.y < extent_min.y
                || b.max.x > extent_max.x
                || b.max.y > extent_max.y
            {
                return Err(Error::invalid(
                    "map",
                    format!("building {i} lies outside the extent"),
                ));
            }
        }
        Ok(Self {
            extent_min,
            extent_max,
            buildings,
            receiver_height: 0.0,
        })
    }

    /// A map with no buildings.
    pub fn empty(extent_min: Point2, extent_max: Point2) -> Result<Self> {
        Self::new(extent_min, extent_max, Vec::new())
    }

    /// Sets the ground receiver antenna height used in every query (default 0 m).
    pub fn with_receiver_height(mut self, h: f64) -> Result<Self> {
        if !(h.is_finite() && h >= 0.0) {
            return Err(Error::invalid("receiver height", format!("{h}")));
        }
        self.receiver_height = h;
        Ok(self)
    }

    pub fn receiver_height(&self) -> f64 {
        self.receiver_height
    }

    pub fn extent(&self) -> (Point2, Point2) {
        (self.extent_min, self.extent_max)
    }

    pub fn buildings(&self) -> &[Building] {
        &self.buildings
    }

    pub fn width(&self) -> f64 {
        self.extent_max.x - self.extent_min.x
    }

    pub fn depth(&self) -> f64 {
        self.extent_max.y - self.extent_min.y
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.depth())
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.extent_min.x
            && p.x <= self.extent_max.x
            && p.y >= self.extent_min.y
            && p.y <= self.extent_max.y
    }

    /// Clamps a point onto the extent.
    pub fn clamp(&self, p: Point2) -> Point2 {
        Point2::new(
            p.x.clamp(self.extent_min.x, self.extent_max.x),
            p.y.clamp(self.extent_min.y, self.extent_max.y),
        )
    }

    /// True if the ground point is strictly inside some building footprint.
    pub fn is_indoor(&self, p: Point2) -> bool {
        self.buildings.iter().any(|b| b.footprint_contains(p))
    }

    /// Ground position of a user as a 3D point (at the receiver height).
    pub fn ground_point(&self, user: Point2) -> Point3 {
        user.at_height(self.receiver_height)
    }

    /// True unless the open segment between `a` and `b` passes through
    /// some building's interior. Symmetric in its arguments.
    pub fn segment_is_clear(&self, a: Point3, b: Point3) -> bool {
        let (lo_x, hi_x) = (a.x.min(b.x), a.x.max(b.x));
        let (lo_y, hi_y) = (a.y.min(b.y), a.y.max(b.y));
        let lo_z = a.z.min(b.z);
        !self.buildings.iter().any(|bld| {
            bld.height > lo_z
                && bld.max.x >= lo_x
                && bld.min.x <= hi_x
                && bld.max.y >= lo_y
                && bld.min.y <= hi_y
                && bld.blocks(a, b)
        })
    }

    /// Line-of-sight test between a UAV position and a ground user.
    pub fn is_los(&self, uav: Point3, user: Point2) -> Result<bool> {
        if !(uav.z > 0.0) {
            return Err(Error::Domain(format!(
                "UAV altitude must be positive, got {}",
                uav.z
            )));
        }
        if !self.contains(uav.xy()) {
            return Err(Error::Domain(format!("UAV {uav:?} outside map extent")));
        }
        if !self.contains(user) {
            return Err(Error::Domain(format!("user {user:?} outside map extent")));
        }
        Ok(self.segment_is_clear(uav, self.ground_point(user)))
    }

    /// Per-pose LoS labels (`true` = LoS) for a single user.
    pub fn classify(&self, poses: &[UavPose], user: Point2) -> Result<Vec<bool>> {
        poses
            .iter()
            .map(|p| self.is_los(p.position, user))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Parameters for the random city generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CitySpec {
    pub extent_min: Point2,
    pub extent_max: Point2,
    pub building_count: usize,
    /// Rayleigh scale of building heights before clamping to [5, 40] m.
    pub height_scale: f64,
}

impl Default for CitySpec {
    fn default() -> Self {
        Self {
            extent_min: Point2::new(0.0, 0.0),
            extent_max: Point2::new(300.0, 300.0),
            building_count: 36,
            height_scale: default_height_scale(),
        }
    }
}

impl CitySpec {
    pub fn generate(&self, seed: u64) -> Result<CityMap> {
        generate_city(
            self.extent_min,
            self.extent_max,
            self.building_count,
            self.height_scale,
            seed,
        )
    }
}

/// Smallest admissible grid cell edge (m); below this no street fits.
const MIN_CELL: f64 = 4.0;

/// Draws a Rayleigh(scale) height clamped to [5, 40] m.
pub fn sample_building_height<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    let u: f64 = rng.gen();
    let r = scale * (-2.0 * (1.0 - u).ln()).sqrt();
    r.clamp(MIN_BUILDING_HEIGHT, MAX_BUILDING_HEIGHT)
}

/// Random city on a jittered block grid.
///
/// The extent is split into a grid with at least `building_count` cells;
/// a random subset of cells each receives one building, inset from the
/// cell borders so neighbours never touch and streets remain between them.
pub fn generate_city(
    extent_min: Point2,
    extent_max: Point2,
    building_count: usize,
    height_scale: f64,
    seed: u64,
) -> Result<CityMap> {
    let mut map = CityMap::empty(extent_min, extent_max)?;
    if building_count == 0 {
        return Ok(map);
    }
    if !(height_scale.is_finite() && height_scale > 0.0) {
        return Err(Error::Construction(format!(
            "height scale must be positive, got {height_scale}"
        )));
    }
    let (w, h) = (map.width(), map.depth());
    let cols = ((building_count as f64 * w / h).sqrt().ceil() as usize).max(1);
    let rows = building_count.div_ceil(cols);
    let (cell_w, cell_h) = (w / cols as f64, h / rows as f64);
    if cell_w < MIN_CELL || cell_h < MIN_CELL {
        return Err(Error::Construction(format!(
            "{building_count} buildings need {cols}x{rows} cells of {cell_w:.2}x{cell_h:.2} m, \
             below the {MIN_CELL} m minimum"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .collect();
    cells.shuffle(&mut rng);
    cells.truncate(building_count);
    cells.sort_unstable();

    let mut buildings = Vec::with_capacity(building_count);
    for (r, c) in cells {
        // a quarter of each cell is reserved for streets
        let avail_w = 0.75 * cell_w;
        let avail_h = 0.75 * cell_h;
        let bw = avail_w * rng.gen_range(0.6..=1.0);
        let bh = avail_h * rng.gen_range(0.6..=1.0);
        let x0 =
            extent_min.x + c as f64 * cell_w + 0.125 * cell_w + rng.gen_range(0.0..=avail_w - bw);
        let y0 =
            extent_min.y + r as f64 * cell_h + 0.125 * cell_h + rng.gen_range(0.0..=avail_h - bh);
        let height = sample_building_height(&mut rng, height_scale);
        buildings.push(Building::new(
            Point2::new(x0, y0),
            Point2::new(x0 + bw, y0 + bh),
            height,
        )?);
    }
    map.buildings = buildings;
    Ok(map)
}
