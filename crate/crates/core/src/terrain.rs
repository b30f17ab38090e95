//! Synthetic 2.5-D elevation beliefs: generation, grid storage, file I/O.
//!
//! A terrain is a per-cell Gaussian belief over elevation (mean and standard
//! deviation). Terrains are generated from a [`TerrainRecipe`]: smoothed value
//! noise for the base surface plus a list of parametric hazards, with the
//! uncertainty field derived from the local elevation gradient. The generator
//! is a stand-in for a real mapping pipeline; nothing here models a sensor.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::kv::{KvError, KvFile};
use crate::rng::{derive_seed, stream_rng};

pub const GRID_MAGIC: &str = "riskdiff-grid";
pub const GRID_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TerrainError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),
    #[error("hazard {index} extends outside the grid")]
    HazardOutOfBounds { index: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad grid file: {0}")]
    Format(String),
    #[error(transparent)]
    Kv(#[from] KvError),
}

/// Discretization of the map domain: cell counts, cell size, world origin of
/// the grid's lower-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: (f64, f64),
}

impl GridSpec {
    pub fn new(
        width: usize,
        height: usize,
        resolution: f64,
        origin: (f64, f64),
    ) -> Result<Self, TerrainError> {
        if width == 0 || height == 0 {
            return Err(TerrainError::InvalidSpec("zero-sized grid".into()));
        }
        if !resolution.is_finite() || resolution <= 0.0 {
            return Err(TerrainError::InvalidSpec(format!(
                "resolution must be positive, got {resolution}"
            )));
        }
        if !origin.0.is_finite() || !origin.1.is_finite() {
            return Err(TerrainError::InvalidSpec("non-finite origin".into()));
        }
        Ok(Self {
            width,
            height,
            resolution,
            origin,
        })
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix < self.width && iy < self.height);
        iy * self.width + ix
    }

    /// Cell containing a world point, or `None` outside the grid.
    pub fn cell_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let gx = (p[0] - self.origin.0) / self.resolution;
        let gy = (p[1] - self.origin.1) / self.resolution;
        if gx < 0.0 || gy < 0.0 {
            return None;
        }
        let ix = gx.floor() as usize;
        let iy = gy.floor() as usize;
        if ix >= self.width || iy >= self.height {
            return None;
        }
        Some((ix, iy))
    }

    /// World coordinates of a cell center.
    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.origin.0 + (ix as f64 + 0.5) * self.resolution,
            self.origin.1 + (iy as f64 + 0.5) * self.resolution,
        ]
    }

    /// World extent as (min_x, min_y, max_x, max_y).
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.origin.0,
            self.origin.1,
            self.origin.0 + self.width as f64 * self.resolution,
            self.origin.1 + self.height as f64 * self.resolution,
        )
    }
}

/// Hazard shapes understood by the generator.
///
/// `size` is the footprint diameter (side length for the square shapes) in
/// meters, `height` the elevation change in meters (depth for pits).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HazardShape {
    Ramp,
    Step,
    RockField,
    Pit,
}

impl HazardShape {
    pub fn name(&self) -> &'static str {
        match self {
            HazardShape::Ramp => "ramp",
            HazardShape::Step => "step",
            HazardShape::RockField => "rock-field",
            HazardShape::Pit => "pit",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "ramp" => Some(HazardShape::Ramp),
            "step" => Some(HazardShape::Step),
            "rock-field" => Some(HazardShape::RockField),
            "pit" => Some(HazardShape::Pit),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hazard {
    pub shape: HazardShape,
    /// Center, world meters.
    pub center: (f64, f64),
    /// Footprint diameter / side length, meters.
    pub size: f64,
    /// Elevation change, meters (depth for pits).
    pub height: f64,
}

/// Everything needed to deterministically synthesize an [`ElevationBelief`].
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainRecipe {
    pub spec: GridSpec,
    pub seed: u64,
    /// Base roughness amplitude, meters (std of the value-noise lattice).
    pub roughness_amp: f64,
    /// Lattice spacing of the value noise, cells.
    pub roughness_scale: f64,
    pub hazards: Vec<Hazard>,
    /// Lower bound of the uncertainty field, meters.
    pub noise_floor: f64,
    /// Gain mapping |local slope| to extra standard deviation.
    pub grad_std_gain: f64,
}

impl TerrainRecipe {
    /// Flat recipe with no roughness and no hazards.
    pub fn flat(spec: GridSpec, noise_floor: f64) -> Self {
        Self {
            spec,
            seed: 0,
            roughness_amp: 0.0,
            roughness_scale: 8.0,
            hazards: Vec::new(),
            noise_floor,
            grad_std_gain: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), TerrainError> {
        if self.roughness_amp < 0.0 || self.noise_floor < 0.0 || self.grad_std_gain < 0.0 {
            return Err(TerrainError::InvalidRecipe(
                "amplitudes and gains must be non-negative".into(),
            ));
        }
        if !self.roughness_scale.is_finite() || self.roughness_scale < 1.0 {
            return Err(TerrainError::InvalidRecipe(
                "roughness_scale must be at least one cell".into(),
            ));
        }
        let (min_x, min_y, max_x, max_y) = self.spec.extent();
        for (index, h) in self.hazards.iter().enumerate() {
            if h.size < 0.0 || h.height < 0.0 {
                return Err(TerrainError::InvalidRecipe(format!(
                    "hazard {index} has negative size or height"
                )));
            }
            let r = h.size / 2.0;
            let inside = h.center.0 - r >= min_x
                && h.center.0 + r <= max_x
                && h.center.1 - r >= min_y
                && h.center.1 + r <= max_y;
            if !inside {
                return Err(TerrainError::HazardOutOfBounds { index });
            }
        }
        Ok(())
    }

    const KEYS: &'static [&'static str] = &[
        "schema_version",
        "width",
        "height",
        "resolution",
        "origin_x",
        "origin_y",
        "seed",
        "roughness_amp",
        "roughness_scale",
        "noise_floor",
        "grad_std_gain",
        "hazard",
    ];

    /// Parse a recipe from a flat key-value file.
    ///
    /// Hazards repeat as `hazard = <shape> <cx> <cy> <size> <height>`.
    pub fn from_kv(kv: &KvFile) -> Result<Self, TerrainError> {
        kv.check_known_keys(Self::KEYS)?;
        let version: u32 = kv.parse_value("schema_version")?;
        if version != 1 {
            return Err(TerrainError::InvalidRecipe(format!(
                "unsupported recipe schema_version {version}"
            )));
        }
        let spec = GridSpec::new(
            kv.parse_value("width")?,
            kv.parse_value("height")?,
            kv.parse_value("resolution")?,
            (kv.parse_or("origin_x", 0.0)?, kv.parse_or("origin_y", 0.0)?),
        )?;
        let mut hazards = Vec::new();
        for raw in kv.get_all("hazard") {
            let parts: Vec<&str> = raw.split_whitespace().collect();
            if parts.len() != 5 {
                return Err(TerrainError::InvalidRecipe(format!(
                    "hazard needs `<shape> <cx> <cy> <size> <height>`, got `{raw}`"
                )));
            }
            let shape = HazardShape::from_name(parts[0]).ok_or_else(|| {
                TerrainError::InvalidRecipe(format!("unknown hazard shape `{}`", parts[0]))
            })?;
            let nums: Result<Vec<f64>, _> = parts[1..].iter().map(|s| s.parse()).collect();
            let nums = nums.map_err(|_| {
                TerrainError::InvalidRecipe(format!("bad hazard numbers in `{raw}`"))
            })?;
            hazards.push(Hazard {
                shape,
                center: (nums[0], nums[1]),
                size: nums[2],
                height: nums[3],
            });
        }
        let recipe = Self {
            spec,
            seed: kv.parse_or("seed", 0u64)?,
            roughness_amp: kv.parse_or("roughness_amp", 0.0)?,
            roughness_scale: kv.parse_or("roughness_scale", 8.0)?,
            hazards,
            noise_floor: kv.parse_or("noise_floor", 0.01)?,
            grad_std_gain: kv.parse_or("grad_std_gain", 0.0)?,
        };
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn load(path: &Path) -> Result<Self, TerrainError> {
        Self::from_kv(&KvFile::load(path)?)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.push("schema_version", 1);
        kv.push("width", self.spec.width);
        kv.push("height", self.spec.height);
        kv.push("resolution", self.spec.resolution);
        kv.push("origin_x", self.spec.origin.0);
        kv.push("origin_y", self.spec.origin.1);
        kv.push("seed", self.seed);
        kv.push("roughness_amp", self.roughness_amp);
        kv.push("roughness_scale", self.roughness_scale);
        kv.push("noise_floor", self.noise_floor);
        kv.push("grad_std_gain", self.grad_std_gain);
        for h in &self.hazards {
            kv.push(
                "hazard",
                format!(
                    "{} {} {} {} {}",
                    h.shape.name(),
                    h.center.0,
                    h.center.1,
                    h.size,
                    h.height
                ),
            );
        }
        kv
    }
}

/// Randomized hazard class inside a [`RecipeFamily`].
#[derive(Debug, Clone, PartialEq)]
pub struct HazardClass {
    pub shape: HazardShape,
    pub count: (usize, usize),
    pub size: (f64, f64),
    pub height: (f64, f64),
}

/// A distribution over terrain recipes: fixed grid and roughness settings,
/// randomized hazard placement per index. `recipe(i)` is deterministic in
/// `(family seed, i)`, which is how training corpora and evaluation suites
/// stay reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct RecipeFamily {
    pub spec: GridSpec,
    pub seed: u64,
    pub roughness_amp: f64,
    pub roughness_scale: f64,
    pub noise_floor: f64,
    pub grad_std_gain: f64,
    pub classes: Vec<HazardClass>,
}

impl RecipeFamily {
    const KEYS: &'static [&'static str] = &[
        "schema_version",
        "width",
        "height",
        "resolution",
        "origin_x",
        "origin_y",
        "seed",
        "roughness_amp",
        "roughness_scale",
        "noise_floor",
        "grad_std_gain",
        "hazard_class",
    ];

    pub fn recipe(&self, index: u64) -> TerrainRecipe {
        let mut rng = stream_rng(self.seed, index);
        let (min_x, min_y, max_x, max_y) = self.spec.extent();
        let mut hazards = Vec::new();
        for class in &self.classes {
            let range = class.count.1.saturating_sub(class.count.0);
            let count = class.count.0
                + if range > 0 {
                    (rng.random::<u64>() % (range as u64 + 1)) as usize
                } else {
                    0
                };
            for _ in 0..count {
                let size = class.size.0 + rng.random::<f64>() * (class.size.1 - class.size.0);
                let height =
                    class.height.0 + rng.random::<f64>() * (class.height.1 - class.height.0);
                let r = size / 2.0;
                let span_x = (max_x - r) - (min_x + r);
                let span_y = (max_y - r) - (min_y + r);
                if span_x <= 0.0 || span_y <= 0.0 {
                    continue;
                }
                let cx = min_x + r + rng.random::<f64>() * span_x;
                let cy = min_y + r + rng.random::<f64>() * span_y;
                hazards.push(Hazard {
                    shape: class.shape,
                    center: (cx, cy),
                    size,
                    height,
                });
            }
        }
        TerrainRecipe {
            spec: self.spec,
            seed: derive_seed(self.seed, index ^ 0x5eed),
            roughness_amp: self.roughness_amp,
            roughness_scale: self.roughness_scale,
            hazards,
            noise_floor: self.noise_floor,
            grad_std_gain: self.grad_std_gain,
        }
    }

    /// Parse from a flat file; hazard classes repeat as
    /// `hazard_class = <shape> <count_min> <count_max> <size_min> <size_max>
    /// <height_min> <height_max>`.
    pub fn from_kv(kv: &KvFile) -> Result<Self, TerrainError> {
        kv.check_known_keys(Self::KEYS)?;
        let version: u32 = kv.parse_value("schema_version")?;
        if version != 1 {
            return Err(TerrainError::InvalidRecipe(format!(
                "unsupported family schema_version {version}"
            )));
        }
        let spec = GridSpec::new(
            kv.parse_value("width")?,
            kv.parse_value("height")?,
            kv.parse_value("resolution")?,
            (kv.parse_or("origin_x", 0.0)?, kv.parse_or("origin_y", 0.0)?),
        )?;
        let mut classes = Vec::new();
        for raw in kv.get_all("hazard_class") {
            let parts: Vec<&str> = raw.split_whitespace().collect();
            if parts.len() != 7 {
                return Err(TerrainError::InvalidRecipe(format!(
                    "hazard_class needs 7 fields, got `{raw}`"
                )));
            }
            let shape = HazardShape::from_name(parts[0]).ok_or_else(|| {
                TerrainError::InvalidRecipe(format!("unknown hazard shape `{}`", parts[0]))
            })?;
            let count_min: usize = parts[1]
                .parse()
                .map_err(|_| TerrainError::InvalidRecipe(format!("bad count in `{raw}`")))?;
            let count_max: usize = parts[2]
                .parse()
                .map_err(|_| TerrainError::InvalidRecipe(format!("bad count in `{raw}`")))?;
            let nums: Result<Vec<f64>, _> = parts[3..].iter().map(|s| s.parse()).collect();
            let nums = nums.map_err(|_| {
                TerrainError::InvalidRecipe(format!("bad hazard_class numbers in `{raw}`"))
            })?;
            classes.push(HazardClass {
                shape,
                count: (count_min, count_max),
                size: (nums[0], nums[1]),
                height: (nums[2], nums[3]),
            });
        }
        Ok(Self {
            spec,
            seed: kv.parse_or("seed", 0u64)?,
            roughness_amp: kv.parse_or("roughness_amp", 0.0)?,
            roughness_scale: kv.parse_or("roughness_scale", 8.0)?,
            noise_floor: kv.parse_or("noise_floor", 0.01)?,
            grad_std_gain: kv.parse_or("grad_std_gain", 0.0)?,
            classes,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TerrainError> {
        Self::from_kv(&KvFile::load(path)?)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.push("schema_version", 1);
        kv.push("width", self.spec.width);
        kv.push("height", self.spec.height);
        kv.push("resolution", self.spec.resolution);
        kv.push("origin_x", self.spec.origin.0);
        kv.push("origin_y", self.spec.origin.1);
        kv.push("seed", self.seed);
        kv.push("roughness_amp", self.roughness_amp);
        kv.push("roughness_scale", self.roughness_scale);
        kv.push("noise_floor", self.noise_floor);
        kv.push("grad_std_gain", self.grad_std_gain);
        for c in &self.classes {
            kv.push(
                "hazard_class",
                format!(
                    "{} {} {} {} {} {} {}",
                    c.shape.name(),
                    c.count.0,
                    c.count.1,
                    c.size.0,
                    c.size.1,
                    c.height.0,
                    c.height.1
                ),
            );
        }
        kv
    }
}

/// Per-cell Gaussian elevation belief. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ElevationBelief {
    spec: GridSpec,
    mean: Vec<f32>,
    std: Vec<f32>,
}

impl ElevationBelief {
    pub fn new(spec: GridSpec, mean: Vec<f32>, std: Vec<f32>) -> Result<Self, TerrainError> {
        if mean.len() != spec.cells() || std.len() != spec.cells() {
            return Err(TerrainError::Format(format!(
                "payload length {}/{} does not match {}x{} grid",
                mean.len(),
                std.len(),
                spec.width,
                spec.height
            )));
        }
        if mean.iter().chain(std.iter()).any(|v| !v.is_finite()) {
            return Err(TerrainError::Format("non-finite values".into()));
        }
        if std.iter().any(|&v| v < 0.0) {
            return Err(TerrainError::Format("negative standard deviation".into()));
        }
        Ok(Self { spec, mean, std })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn mean_at(&self, ix: usize, iy: usize) -> f64 {
        self.mean[self.spec.index(ix, iy)] as f64
    }

    pub fn std_at(&self, ix: usize, iy: usize) -> f64 {
        self.std[self.spec.index(ix, iy)] as f64
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn std(&self) -> &[f32] {
        &self.std
    }

    pub fn save(&self, path: &Path) -> Result<(), TerrainError> {
        let mut file = std::fs::File::create(path)?;
        write_grid(&mut file, &self.spec, &[&self.mean, &self.std])
    }

    pub fn load(path: &Path) -> Result<Self, TerrainError> {
        let mut file = std::fs::File::open(path)?;
        let (spec, mut channels) = read_grid(&mut file, 2)?;
        let std = channels.pop().unwrap();
        let mean = channels.pop().unwrap();
        Self::new(spec, mean, std)
    }
}

/// Write a grid file: one text header line, then `channels` row-major
/// little-endian f32 planes.
pub fn write_grid(
    w: &mut dyn Write,
    spec: &GridSpec,
    channels: &[&[f32]],
) -> Result<(), TerrainError> {
    writeln!(
        w,
        "{GRID_MAGIC} {GRID_FORMAT_VERSION} {} {} {} {} {} {}",
        spec.width,
        spec.height,
        spec.resolution,
        spec.origin.0,
        spec.origin.1,
        channels.len()
    )?;
    for plane in channels {
        debug_assert_eq!(plane.len(), spec.cells());
        let mut bytes = Vec::with_capacity(plane.len() * 4);
        for v in *plane {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

/// Read a grid file, requiring exactly `expect_channels` planes.
pub fn read_grid(
    r: &mut dyn Read,
    expect_channels: usize,
) -> Result<(GridSpec, Vec<Vec<f32>>), TerrainError> {
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let header_end = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| TerrainError::Format("missing header line".into()))?;
    let header = std::str::from_utf8(&raw[..header_end])
        .map_err(|_| TerrainError::Format("header is not utf-8".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 8 || fields[0] != GRID_MAGIC {
        return Err(TerrainError::Format(format!("bad header `{header}`")));
    }
    let version: u32 = fields[1]
        .parse()
        .map_err(|_| TerrainError::Format("bad version".into()))?;
    if version != GRID_FORMAT_VERSION {
        return Err(TerrainError::Format(format!(
            "unsupported grid version {version}"
        )));
    }
    let parse_f = |s: &str| -> Result<f64, TerrainError> {
        s.parse()
            .map_err(|_| TerrainError::Format(format!("bad header number `{s}`")))
    };
    let width: usize = fields[2]
        .parse()
        .map_err(|_| TerrainError::Format("bad width".into()))?;
    let height: usize = fields[3]
        .parse()
        .map_err(|_| TerrainError::Format("bad height".into()))?;
    let spec = GridSpec::new(
        width,
        height,
        parse_f(fields[4])?,
        (parse_f(fields[5])?, parse_f(fields[6])?),
    )?;
    let channels: usize = fields[7]
        .parse()
        .map_err(|_| TerrainError::Format("bad channel count".into()))?;
    if channels != expect_channels {
        return Err(TerrainError::Format(format!(
            "expected {expect_channels} channels, file has {channels}"
        )));
    }
    let payload = &raw[header_end + 1..];
    let plane_bytes = spec.cells() * 4;
    if payload.len() != plane_bytes * channels {
        return Err(TerrainError::Format(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            plane_bytes * channels
        )));
    }
    let mut planes = Vec::with_capacity(channels);
    for c in 0..channels {
        let chunk = &payload[c * plane_bytes..(c + 1) * plane_bytes];
        let plane: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if plane.iter().any(|v| !v.is_finite()) {
            return Err(TerrainError::Format("non-finite payload values".into()));
        }
        planes.push(plane);
    }
    Ok((spec, planes))
}

/// Generate a terrain belief. Deterministic for a fixed recipe.
pub fn generate_terrain(recipe: &TerrainRecipe) -> Result<ElevationBelief, TerrainError> {
    recipe.validate()?;
    let spec = recipe.spec;
    let mut mean = vec![0.0f64; spec.cells()];

    if recipe.roughness_amp > 0.0 {
        add_value_noise(&mut mean, &spec, recipe);
    }
    for (i, hazard) in recipe.hazards.iter().enumerate() {
        stamp_hazard(&mut mean, &spec, hazard, recipe.seed, i);
    }

    // std = noise floor + gain * |local slope|, so uncertainty concentrates
    // along hazard edges without modeling a sensor.
    let mut std = vec![recipe.noise_floor; spec.cells()];
    if recipe.grad_std_gain > 0.0 {
        for iy in 0..spec.height {
            for ix in 0..spec.width {
                let g = local_slope(&mean, &spec, ix, iy);
                std[spec.index(ix, iy)] += recipe.grad_std_gain * g;
            }
        }
    }

    let mean: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
    let std: Vec<f32> = std.iter().map(|&v| v as f32).collect();
    ElevationBelief::new(spec, mean, std)
}

/// Bilinear-interpolated lattice noise.
fn add_value_noise(mean: &mut [f64], spec: &GridSpec, recipe: &TerrainRecipe) {
    let scale = recipe.roughness_scale;
    let nx = (spec.width as f64 / scale).ceil() as usize + 2;
    let ny = (spec.height as f64 / scale).ceil() as usize + 2;
    let mut rng = stream_rng(recipe.seed, 0x7e22);
    let lattice: Vec<f64> = (0..nx * ny)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * recipe.roughness_amp)
        .collect();
    for iy in 0..spec.height {
        for ix in 0..spec.width {
            let gx = ix as f64 / scale;
            let gy = iy as f64 / scale;
            let x0 = gx.floor() as usize;
            let y0 = gy.floor() as usize;
            let fx = gx - x0 as f64;
            let fy = gy - y0 as f64;
            let at = |x: usize, y: usize| lattice[y * nx + x];
            let v = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + at(x0 + 1, y0) * fx * (1.0 - fy)
                + at(x0, y0 + 1) * (1.0 - fx) * fy
                + at(x0 + 1, y0 + 1) * fx * fy;
            mean[spec.index(ix, iy)] += v;
        }
    }
}

fn stamp_hazard(mean: &mut [f64], spec: &GridSpec, hazard: &Hazard, seed: u64, index: usize) {
    let r = hazard.size / 2.0;
    let (cx, cy) = hazard.center;
    match hazard.shape {
        HazardShape::Step => {
            for_cells_in_box(spec, cx, cy, r, |ix, iy, _, _| {
                mean[spec.index(ix, iy)] += hazard.height;
            });
        }
        HazardShape::Pit => {
            for_cells_in_box(spec, cx, cy, r, |ix, iy, wx, wy| {
                let d = ((wx - cx).powi(2) + (wy - cy).powi(2)).sqrt();
                if d <= r {
                    mean[spec.index(ix, iy)] -= hazard.height;
                }
            });
        }
        HazardShape::Ramp => {
            for_cells_in_box(spec, cx, cy, r, |ix, iy, wx, _| {
                let t = ((wx - (cx - r)) / hazard.size).clamp(0.0, 1.0);
                mean[spec.index(ix, iy)] += t * hazard.height;
            });
        }
        HazardShape::RockField => {
            let mut rng = stream_rng(seed, 0x0c4e ^ ((index as u64) << 8));
            let area = hazard.size * hazard.size;
            let count = (area * 4.0).ceil().max(1.0) as usize;
            let rock_r = (2.0 * spec.resolution).max(0.05);
            // Overlapping rocks take the max cone height, then sit on top of
            // whatever base surface is already there.
            let mut rocks = vec![0.0f64; spec.cells()];
            for _ in 0..count {
                let ang = rng.random::<f64>() * std::f64::consts::TAU;
                let rad = rng.random::<f64>().sqrt() * r;
                let (bx, by) = (cx + rad * ang.cos(), cy + rad * ang.sin());
                for_cells_in_box(spec, bx, by, rock_r, |ix, iy, wx, wy| {
                    let d = ((wx - bx).powi(2) + (wy - by).powi(2)).sqrt();
                    if d <= rock_r {
                        let bump = hazard.height * (1.0 - d / rock_r);
                        let cell = spec.index(ix, iy);
                        rocks[cell] = rocks[cell].max(bump);
                    }
                });
            }
            for (m, rock) in mean.iter_mut().zip(rocks.iter()) {
                *m += rock;
            }
        }
    }
}

/// Visit every cell whose center lies in the axis-aligned box of half-width
/// `r` around `(cx, cy)`, passing cell indices and center coordinates.
fn for_cells_in_box(
    spec: &GridSpec,
    cx: f64,
    cy: f64,
    r: f64,
    mut f: impl FnMut(usize, usize, f64, f64),
) {
    let res = spec.resolution;
    let ix0 = (((cx - r - spec.origin.0) / res).floor().max(0.0)) as usize;
    let iy0 = (((cy - r - spec.origin.1) / res).floor().max(0.0)) as usize;
    let ix1 = ((cx + r - spec.origin.0) / res).ceil().min(spec.width as f64) as usize;
    let iy1 = ((cy + r - spec.origin.1) / res)
        .ceil()
        .min(spec.height as f64) as usize;
    for iy in iy0..iy1 {
        for ix in ix0..ix1 {
            let [wx, wy] = spec.cell_center(ix, iy);
            if (wx - cx).abs() <= r && (wy - cy).abs() <= r {
                f(ix, iy, wx, wy);
            }
        }
    }
}

/// |gradient| of the mean field at a cell, in meters of rise per meter,
/// central differences with one-sided fallback at borders.
fn local_slope(mean: &[f64], spec: &GridSpec, ix: usize, iy: usize) -> f64 {
    let at = |x: usize, y: usize| mean[spec.index(x, y)];
    let res = spec.resolution;
    let gx = match (ix > 0, ix + 1 < spec.width) {
        (true, true) => (at(ix + 1, iy) - at(ix - 1, iy)) / (2.0 * res),
        (false, true) => (at(ix + 1, iy) - at(ix, iy)) / res,
        (true, false) => (at(ix, iy) - at(ix - 1, iy)) / res,
        (false, false) => 0.0,
    };
    let gy = match (iy > 0, iy + 1 < spec.height) {
        (true, true) => (at(ix, iy + 1) - at(ix, iy - 1)) / (2.0 * res),
        (false, true) => (at(ix, iy + 1) - at(ix, iy)) / res,
        (true, false) => (at(ix, iy) - at(ix, iy - 1)) / res,
        (false, false) => 0.0,
    };
    (gx * gx + gy * gy).sqrt()
}

/// Draw one elevation realization per cell from the belief.
pub fn sample_realization(belief: &ElevationBelief, rng: &mut impl Rng) -> Vec<f64> {
    belief
        .mean()
        .iter()
        .zip(belief.std().iter())
        .map(|(&m, &s)| m as f64 + s as f64 * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec_4m() -> GridSpec {
        GridSpec::new(40, 40, 0.1, (0.0, 0.0)).unwrap()
    }

    #[test]
    fn flat_recipe_is_flat() {
        let recipe = TerrainRecipe::flat(spec_4m(), 0.02);
        let belief = generate_terrain(&recipe).unwrap();
        assert!(belief.mean().iter().all(|&v| v == 0.0));
        assert!(belief.std().iter().all(|&v| v == 0.02));
    }

    #[test]
    fn step_height_shows_in_elevation_range() {
        let mut recipe = TerrainRecipe::flat(spec_4m(), 0.01);
        recipe.roughness_amp = 0.02;
        recipe.roughness_scale = 6.0;
        recipe.seed = 11;
        recipe.hazards.push(Hazard {
            shape: HazardShape::Step,
            center: (2.0, 2.0),
            size: 1.0,
            height: 0.5,
        });
        let belief = generate_terrain(&recipe).unwrap();
        let max = belief.mean().iter().cloned().fold(f32::MIN, f32::max) as f64;
        let min = belief.mean().iter().cloned().fold(f32::MAX, f32::min) as f64;
        // Range is the step height up to the roughness amplitude (value noise
        // stays within a few lattice std devs).
        assert!((max - min - 0.5).abs() < 6.0 * 0.02, "range {}", max - min);
    }

    #[test]
    fn generation_is_deterministic() {
        let mut recipe = TerrainRecipe::flat(spec_4m(), 0.01);
        recipe.roughness_amp = 0.05;
        recipe.seed = 42;
        recipe.grad_std_gain = 0.02;
        recipe.hazards.push(Hazard {
            shape: HazardShape::RockField,
            center: (2.0, 2.0),
            size: 1.5,
            height: 0.2,
        });
        let a = generate_terrain(&recipe).unwrap();
        let b = generate_terrain(&recipe).unwrap();
        assert_eq!(a.mean(), b.mean());
        assert_eq!(a.std(), b.std());
    }

    #[test]
    fn step_height_range_monotone() {
        let heights = [0.0, 0.1, 0.2, 0.4, 0.8];
        let mut last = f64::MIN;
        for (i, &h) in heights.iter().enumerate() {
            let mut recipe = TerrainRecipe::flat(spec_4m(), 0.01);
            recipe.roughness_amp = 0.02;
            recipe.seed = 5;
            recipe.hazards.push(Hazard {
                shape: HazardShape::Step,
                center: (2.0, 2.0),
                size: 1.0,
                height: h,
            });
            let belief = generate_terrain(&recipe).unwrap();
            let max = belief.mean().iter().cloned().fold(f32::MIN, f32::max) as f64;
            let min = belief.mean().iter().cloned().fold(f32::MAX, f32::min) as f64;
            let range = max - min;
            if i > 0 {
                assert!(range >= last - 1e-9, "range dropped: {last} -> {range}");
            }
            last = range;
        }
    }

    #[test]
    fn hazard_outside_grid_rejected() {
        let mut recipe = TerrainRecipe::flat(spec_4m(), 0.01);
        recipe.hazards.push(Hazard {
            shape: HazardShape::Step,
            center: (3.9, 2.0),
            size: 1.0,
            height: 0.5,
        });
        assert!(matches!(
            generate_terrain(&recipe),
            Err(TerrainError::HazardOutOfBounds { index: 0 })
        ));
    }

    #[test]
    fn pit_lowers_interior_and_raises_edge_uncertainty() {
        let mut recipe = TerrainRecipe::flat(spec_4m(), 0.01);
        recipe.grad_std_gain = 0.02;
        recipe.hazards.push(Hazard {
            shape: HazardShape::Pit,
            center: (2.0, 2.0),
            size: 1.2,
            height: 0.4,
        });
        let belief = generate_terrain(&recipe).unwrap();
        let (cx, cy) = belief.spec().cell_of([2.0, 2.0]).unwrap();
        assert!((belief.mean_at(cx, cy) + 0.4).abs() < 1e-6);
        // Somewhere along the rim the uncertainty must exceed the floor.
        let max_std = belief.std().iter().cloned().fold(f32::MIN, f32::max);
        assert!(max_std > 0.011);
        // Pit interior is flat, so its center keeps the floor.
        assert!((belief.std_at(cx, cy) - 0.01).abs() < 1e-6);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.grid");
        let mut recipe = TerrainRecipe::flat(spec_4m(), 0.015);
        recipe.roughness_amp = 0.07;
        recipe.seed = 9;
        recipe.grad_std_gain = 0.03;
        let belief = generate_terrain(&recipe).unwrap();
        belief.save(&path).unwrap();
        let loaded = ElevationBelief::load(&path).unwrap();
        assert_eq!(belief, loaded);
    }

    #[test]
    fn negative_std_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.grid");
        let spec = GridSpec::new(2, 2, 0.5, (0.0, 0.0)).unwrap();
        let mean = [0.0f32; 4];
        let std = [0.1f32, -0.1, 0.1, 0.1];
        let mut buf = Vec::new();
        write_grid(&mut buf, &spec, &[&mean[..], &std[..]]).unwrap();
        std::fs::write(&path, &buf).unwrap();
        assert!(matches!(
            ElevationBelief::load(&path),
            Err(TerrainError::Format(_))
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.grid");
        let belief = generate_terrain(&TerrainRecipe::flat(spec_4m(), 0.01)).unwrap();
        belief.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            ElevationBelief::load(&path),
            Err(TerrainError::Format(_))
        ));
    }

    #[test]
    fn recipe_kv_round_trip() {
        let mut recipe = TerrainRecipe::flat(spec_4m(), 0.01);
        recipe.seed = 3;
        recipe.roughness_amp = 0.04;
        recipe.hazards.push(Hazard {
            shape: HazardShape::Pit,
            center: (1.5, 2.5),
            size: 0.8,
            height: 0.3,
        });
        let kv = recipe.to_kv();
        let parsed = TerrainRecipe::from_kv(&KvFile::parse(&kv.render()).unwrap()).unwrap();
        assert_eq!(recipe, parsed);
    }

    proptest! {
        #[test]
        fn grid_file_round_trip(
            w in 1usize..12,
            h in 1usize..12,
            seed in 0u64..1000,
            amp in 0.0f64..0.3,
            floor in 0.0f64..0.1,
        ) {
            let spec = GridSpec::new(w, h, 0.25, (-1.0, 0.5)).unwrap();
            let recipe = TerrainRecipe {
                spec,
                seed,
                roughness_amp: amp,
                roughness_scale: 4.0,
                hazards: vec![],
                noise_floor: floor,
                grad_std_gain: 0.02,
            };
            let belief = generate_terrain(&recipe).unwrap();
            let mut buf = Vec::new();
            write_grid(&mut buf, belief.spec(), &[belief.mean(), belief.std()]).unwrap();
            let (spec2, planes) = read_grid(&mut buf.as_slice(), 2).unwrap();
            prop_assert_eq!(belief.spec(), &spec2);
            prop_assert_eq!(belief.mean(), planes[0].as_slice());
            prop_assert_eq!(belief.std(), planes[1].as_slice());
        }
    }
}
