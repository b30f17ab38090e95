//! System 2: stochastic traversability risk.
//!
//! A traversability cost is sampled from the elevation belief over the robot
//! footprint, aggregated per cell into a CVaR risk map, thresholded into a
//! safe set, and smoothed into a differentiable surrogate whose gradient
//! drives classifier-style guidance.
//!
//! The concrete cost is a stand-in for a full physics pipeline: a weighted sum
//! of fitted-plane slope and maximum inter-cell step height over the
//! footprint. It is documented here because the rest of the crate treats it as
//! the ground-truth hazard model.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::diffusion::ActionSequence;
use crate::geometry::{sample_polyline, Pose, Vec2};
use crate::rng::stream_rng;
use crate::terrain::{read_grid, write_grid, ElevationBelief, GridSpec, TerrainError};

/// Smoothing width of the default risk surrogate.
pub const DEFAULT_SURROGATE_MARGIN: f64 = 0.1;

/// Fraction of a cell used as the spacing when walking action segments.
pub const SEGMENT_CHECK_FRACTION: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum RiskError {
    #[error("cell ({ix}, {iy}) is out of bounds")]
    OutOfBounds { ix: usize, iy: usize },
    #[error("empty sample set")]
    EmptySamples,
    #[error("alpha must be in (0, 1], got {0}")]
    BadAlpha(f64),
    #[error("non-finite sample")]
    NonFinite,
    #[error("invalid risk config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Terrain(#[from] TerrainError),
}

/// Parameters of the slope + step traversability cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    pub slope_weight: f64,
    pub step_weight: f64,
    /// Slope at which the slope term reaches 1, radians.
    pub slope_critical: f64,
    /// Step height at which the step term reaches 1, meters.
    pub step_critical: f64,
    /// Robot footprint radius, meters.
    pub footprint_radius: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            slope_weight: 1.0,
            step_weight: 1.0,
            slope_critical: 0.35,
            step_critical: 0.15,
            footprint_radius: 0.15,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), RiskError> {
        if self.slope_weight < 0.0 || self.step_weight < 0.0 {
            return Err(RiskError::InvalidConfig("weights must be >= 0".into()));
        }
        if !(self.slope_critical > 0.0 && self.step_critical > 0.0 && self.footprint_radius > 0.0)
        {
            return Err(RiskError::InvalidConfig(
                "critical values and footprint radius must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// CVaR level, safety threshold, and Monte-Carlo sample count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskConfig {
    /// Risk probability level in (0, 1].
    pub alpha: f64,
    /// Risk-tolerance threshold.
    pub gamma: f64,
    /// Map draws per cell.
    pub mc_samples: usize,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            gamma: 0.5,
            mc_samples: 30,
        }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Result<(), RiskError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(RiskError::BadAlpha(self.alpha));
        }
        if self.gamma < 0.0 {
            return Err(RiskError::InvalidConfig("gamma must be >= 0".into()));
        }
        if self.mc_samples == 0 {
            return Err(RiskError::InvalidConfig("mc_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draw one traversability cost at a cell from the elevation belief.
///
/// One elevation realization is sampled per footprint cell, a plane is fitted
/// to get the slope angle, and the maximum absolute elevation difference
/// between adjacent footprint cells gives the step height:
///
/// `cost = max(0, w_slope * atan(|grad|)/slope_critical
///             + w_step * step_max/step_critical)`
pub fn cost_sample(
    belief: &ElevationBelief,
    params: &CostParams,
    cell: (usize, usize),
    rng: &mut impl Rng,
) -> Result<f64, RiskError> {
    let spec = belief.spec();
    let (cx, cy) = cell;
    if cx >= spec.width || cy >= spec.height {
        return Err(RiskError::OutOfBounds { ix: cx, iy: cy });
    }
    let res = spec.resolution;
    let reach = (params.footprint_radius / res).floor() as isize;

    // Footprint cells and one sampled elevation each.
    let mut cells: Vec<(isize, isize, f64)> = Vec::new();
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let dist = ((dx * dx + dy * dy) as f64).sqrt() * res;
            if dist > params.footprint_radius {
                continue;
            }
            let ix = cx as isize + dx;
            let iy = cy as isize + dy;
            if ix < 0 || iy < 0 || ix >= spec.width as isize || iy >= spec.height as isize {
                continue;
            }
            let mean = belief.mean_at(ix as usize, iy as usize);
            let std = belief.std_at(ix as usize, iy as usize);
            let e = mean + std * rng.sample::<f64, _>(StandardNormal);
            cells.push((dx, dy, e));
        }
    }

    let slope = fitted_slope(&cells, res);
    let mut step_max = 0.0f64;
    for i in 0..cells.len() {
        for j in (i + 1)..cells.len() {
            let (xi, yi, ei) = cells[i];
            let (xj, yj, ej) = cells[j];
            if (xi - xj).abs() <= 1 && (yi - yj).abs() <= 1 {
                step_max = step_max.max((ei - ej).abs());
            }
        }
    }

    let cost = params.slope_weight * slope.atan() / params.slope_critical
        + params.step_weight * step_max / params.step_critical;
    Ok(cost.max(0.0))
}

/// Least-squares plane gradient magnitude (rise per meter) over footprint
/// samples; degenerate axes contribute zero.
fn fitted_slope(cells: &[(isize, isize, f64)], res: f64) -> f64 {
    let n = cells.len() as f64;
    if cells.len() < 2 {
        return 0.0;
    }
    let mx = cells.iter().map(|c| c.0 as f64).sum::<f64>() / n * res;
    let my = cells.iter().map(|c| c.1 as f64).sum::<f64>() / n * res;
    let me = cells.iter().map(|c| c.2).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy, mut sxe, mut sye) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(ix, iy, e) in cells {
        let x = ix as f64 * res - mx;
        let y = iy as f64 * res - my;
        let de = e - me;
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
        sxe += x * de;
        sye += y * de;
    }
    let det = sxx * syy - sxy * sxy;
    let (gx, gy) = if det.abs() > 1e-12 {
        ((syy * sxe - sxy * sye) / det, (sxx * sye - sxy * sxe) / det)
    } else {
        (
            if sxx > 1e-12 { sxe / sxx } else { 0.0 },
            if syy > 1e-12 { sye / syy } else { 0.0 },
        )
    };
    (gx * gx + gy * gy).sqrt()
}

/// Empirical CVaR: mean of the worst `(1 - alpha)` tail, with fractional
/// interpolation so it coincides with the Rockafellar-Uryasev infimum on the
/// empirical distribution.
pub fn cvar(samples: &[f64], alpha: f64) -> Result<f64, RiskError> {
    if samples.is_empty() {
        return Err(RiskError::EmptySamples);
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(RiskError::NonFinite);
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(RiskError::BadAlpha(alpha));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if alpha == 1.0 {
        return Ok(sorted[0]);
    }
    let n = sorted.len();
    let m = (1.0 - alpha) * n as f64;
    let k = (m.floor() as usize).min(n - 1);
    let frac = m - k as f64;
    let tail: f64 = sorted[..k].iter().sum::<f64>() + frac * sorted[k];
    Ok(tail / m)
}

/// Per-cell CVaR of the traversability cost. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskMap {
    spec: GridSpec,
    rho: Vec<f32>,
    config: RiskConfig,
}

/// Build the risk map: `mc_samples` cost draws per cell, aggregated with
/// CVaR at the configured level. Per-cell RNG streams derive from
/// `(master_seed, cell index)`, so the result is reproducible regardless of
/// how the cell loop is scheduled.
pub fn build_risk_map(
    belief: &ElevationBelief,
    params: &CostParams,
    config: &RiskConfig,
    master_seed: u64,
) -> Result<RiskMap, RiskError> {
    params.validate()?;
    config.validate()?;
    let spec = *belief.spec();
    let rho: Result<Vec<f32>, RiskError> = (0..spec.cells())
        .into_par_iter()
        .map(|i| {
            let cell = (i % spec.width, i / spec.width);
            let mut rng = stream_rng(master_seed, i as u64);
            let mut samples = Vec::with_capacity(config.mc_samples);
            for _ in 0..config.mc_samples {
                samples.push(cost_sample(belief, params, cell, &mut rng)?);
            }
            Ok(cvar(&samples, config.alpha)? as f32)
        })
        .collect();
    Ok(RiskMap {
        spec,
        rho: rho?,
        config: *config,
    })
}

impl RiskMap {
    /// Wrap an existing risk field (tests and file loading).
    pub fn from_rho(spec: GridSpec, rho: Vec<f32>, config: RiskConfig) -> Result<Self, RiskError> {
        config.validate()?;
        if rho.len() != spec.cells() {
            return Err(RiskError::InvalidConfig(format!(
                "rho length {} does not match {}x{}",
                rho.len(),
                spec.width,
                spec.height
            )));
        }
        if rho.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(RiskError::InvalidConfig(
                "rho must be finite and >= 0".into(),
            ));
        }
        Ok(Self { spec, rho, config })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn config(&self) -> &RiskConfig {
        &self.config
    }

    pub fn rho(&self) -> &[f32] {
        &self.rho
    }

    pub fn rho_at(&self, ix: usize, iy: usize) -> f64 {
        self.rho[self.spec.index(ix, iy)] as f64
    }

    pub fn safe_set(&self) -> SafeSet<'_> {
        SafeSet {
            map: self,
            gamma: self.config.gamma,
        }
    }

    /// Safe set thresholded at a custom gamma instead of the configured one.
    pub fn safe_set_with(&self, gamma: f64) -> SafeSet<'_> {
        SafeSet { map: self, gamma }
    }

    pub fn surrogate(&self, margin: f64) -> RiskSurrogate<'_> {
        RiskSurrogate { map: self, margin }
    }

    /// Bilinear interpolation of rho at a world point, with the gradient in
    /// world coordinates. Outside the cell-center lattice the field is
    /// clamped, so the gradient degenerates along the clamped axis there.
    pub fn interp_rho(&self, p: Vec2) -> (f64, Vec2) {
        let spec = &self.spec;
        let res = spec.resolution;
        let gx = (p[0] - spec.origin.0) / res - 0.5;
        let gy = (p[1] - spec.origin.1) / res - 0.5;
        let max_x = (spec.width - 1) as f64;
        let max_y = (spec.height - 1) as f64;
        let cx = gx.clamp(0.0, max_x);
        let cy = gy.clamp(0.0, max_y);
        let x0 = (cx.floor() as usize).min(spec.width.saturating_sub(2));
        let y0 = (cy.floor() as usize).min(spec.height.saturating_sub(2));
        let x1 = (x0 + 1).min(spec.width - 1);
        let y1 = (y0 + 1).min(spec.height - 1);
        let fx = (cx - x0 as f64).clamp(0.0, 1.0);
        let fy = (cy - y0 as f64).clamp(0.0, 1.0);
        let q00 = self.rho_at(x0, y0);
        let q10 = self.rho_at(x1, y0);
        let q01 = self.rho_at(x0, y1);
        let q11 = self.rho_at(x1, y1);
        let value = q00 * (1.0 - fx) * (1.0 - fy)
            + q10 * fx * (1.0 - fy)
            + q01 * (1.0 - fx) * fy
            + q11 * fx * fy;
        let inside_x = gx > 0.0 && gx < max_x;
        let inside_y = gy > 0.0 && gy < max_y;
        let ddx = if inside_x {
            ((q10 - q00) * (1.0 - fy) + (q11 - q01) * fy) / res
        } else {
            0.0
        };
        let ddy = if inside_y {
            ((q01 - q00) * (1.0 - fx) + (q11 - q10) * fx) / res
        } else {
            0.0
        };
        (value, [ddx, ddy])
    }

    pub fn save(&self, path: &Path) -> Result<(), TerrainError> {
        let mut file = std::fs::File::create(path)?;
        self.write(&mut file)
    }

    pub fn write(&self, w: &mut dyn Write) -> Result<(), TerrainError> {
        write_grid(w, &self.spec, &[&self.rho])
    }

    /// Load a single-channel risk grid; the config is not stored in the file
    /// and must be supplied by the caller.
    pub fn load(path: &Path, config: RiskConfig) -> Result<Self, RiskError> {
        let mut file = std::fs::File::open(path)?;
        Self::read(&mut file, config)
    }

    pub fn read(r: &mut dyn Read, config: RiskConfig) -> Result<Self, RiskError> {
        let (spec, mut planes) = read_grid(r, 1)?;
        Self::from_rho(spec, planes.pop().unwrap(), config)
    }
}

impl From<std::io::Error> for RiskError {
    fn from(e: std::io::Error) -> Self {
        RiskError::Terrain(TerrainError::Io(e))
    }
}

/// Thresholded view over a risk map: a cell is safe iff `rho <= gamma`.
/// Points outside the grid are unsafe.
#[derive(Debug, Clone, Copy)]
pub struct SafeSet<'a> {
    map: &'a RiskMap,
    gamma: f64,
}

impl<'a> SafeSet<'a> {
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn map(&self) -> &'a RiskMap {
        self.map
    }

    pub fn is_cell_safe(&self, ix: usize, iy: usize) -> bool {
        self.map.rho_at(ix, iy) <= self.gamma
    }

    pub fn is_point_safe(&self, p: Vec2) -> bool {
        match self.map.spec.cell_of(p) {
            Some((ix, iy)) => self.is_cell_safe(ix, iy),
            None => false,
        }
    }

    /// Check a whole action sequence from a pose: every waypoint and every
    /// intermediate point at `<= 0.5 * resolution` spacing along each segment
    /// (starting from the pose itself) must land in a safe cell.
    pub fn is_safe(&self, u: &ActionSequence, pose: &Pose) -> bool {
        let spacing = SEGMENT_CHECK_FRACTION * self.map.spec.resolution;
        let pts = action_polyline(u, pose);
        sample_polyline(&pts, spacing)
            .iter()
            .all(|p| self.is_point_safe(p.point))
    }
}

/// World-frame polyline of an action sequence: the pose, then each waypoint.
pub fn action_polyline(u: &ActionSequence, pose: &Pose) -> Vec<Vec2> {
    let mut pts = Vec::with_capacity(u.len() + 1);
    pts.push(pose.position());
    for wp in u.waypoints() {
        pts.push(pose.to_world(*wp));
    }
    pts
}

/// Differentiable relaxation of the safety indicator.
///
/// Per checked point the hard margin `rho - gamma` is smoothed with a
/// softplus of width `margin` (zero exactly at the threshold), and points are
/// combined with a mean-normalized log-sum-exp so the value stays negative
/// when every point is safely below threshold. The hard/soft disagreement is
/// confined to a band of a few margins around the threshold; exact decisions
/// always go through [`SafeSet::is_safe`].
#[derive(Debug, Clone, Copy)]
pub struct RiskSurrogate<'a> {
    map: &'a RiskMap,
    margin: f64,
}

impl<'a> RiskSurrogate<'a> {
    pub fn map(&self) -> &'a RiskMap {
        self.map
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// Smoothed constraint value and its gradient with respect to the
    /// robot-frame waypoints.
    pub fn eval(&self, u: &ActionSequence, pose: &Pose) -> (f64, Vec<Vec2>) {
        let delta = self.margin;
        let gamma = self.map.config.gamma;
        let spacing = SEGMENT_CHECK_FRACTION * self.map.spec.resolution;
        let pts = action_polyline(u, pose);
        let checked = sample_polyline(&pts, spacing);

        // Per-point smoothed margins and d(margin)/d(rho).
        let mut margins = Vec::with_capacity(checked.len());
        let mut dm_drho = Vec::with_capacity(checked.len());
        let mut grads = Vec::with_capacity(checked.len());
        for cp in &checked {
            let (rho, grad) = self.map.interp_rho(cp.point);
            let z = (rho - gamma) / delta;
            margins.push(delta * softplus(z) - delta * std::f64::consts::LN_2);
            dm_drho.push(sigmoid(z));
            grads.push(grad);
        }

        // Mean-normalized log-sum-exp over points, temperature = margin.
        let n = margins.len() as f64;
        let max_m = margins.iter().cloned().fold(f64::MIN, f64::max);
        let sum_exp: f64 = margins.iter().map(|&m| ((m - max_m) / delta).exp()).sum();
        let value = max_m + delta * (sum_exp / n).ln();

        let (sin_t, cos_t) = pose.theta.sin_cos();
        let mut grad_u = vec![[0.0f64; 2]; u.len()];
        for (i, cp) in checked.iter().enumerate() {
            let w = ((margins[i] - max_m) / delta).exp() / sum_exp;
            let scale = w * dm_drho[i];
            if scale == 0.0 {
                continue;
            }
            // World gradient rotated into the robot frame.
            let g = grads[i];
            let g_robot = [cos_t * g[0] + sin_t * g[1], -sin_t * g[0] + cos_t * g[1]];
            // Point p sits on segment `seg` at parameter t:
            // p = (1-t) * vertex[seg-1] + t * vertex[seg], vertex 0 = pose.
            if cp.segment >= 1 {
                let k = cp.segment - 1;
                grad_u[k][0] += scale * cp.t * g_robot[0];
                grad_u[k][1] += scale * cp.t * g_robot[1];
                if cp.segment >= 2 {
                    let k_prev = cp.segment - 2;
                    grad_u[k_prev][0] += scale * (1.0 - cp.t) * g_robot[0];
                    grad_u[k_prev][1] += scale * (1.0 - cp.t) * g_robot[1];
                }
            }
        }
        (value, grad_u)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::master_rng;
    use crate::terrain::{generate_terrain, Hazard, HazardShape, TerrainRecipe};

    fn flat_belief(w: usize, h: usize, std: f64) -> ElevationBelief {
        let spec = GridSpec::new(w, h, 0.1, (0.0, 0.0)).unwrap();
        generate_terrain(&TerrainRecipe::flat(spec, std)).unwrap()
    }

    /// Belief that is two flat plateaus split at world x = split, right side
    /// raised by `h` meters, zero uncertainty.
    fn step_belief(h: f64, split: f64) -> ElevationBelief {
        let spec = GridSpec::new(20, 10, 0.1, (0.0, 0.0)).unwrap();
        let mut mean = vec![0.0f32; spec.cells()];
        for iy in 0..spec.height {
            for ix in 0..spec.width {
                let [wx, _] = spec.cell_center(ix, iy);
                if wx > split {
                    mean[spec.index(ix, iy)] = h as f32;
                }
            }
        }
        ElevationBelief::new(spec, mean, vec![0.0; spec.cells()]).unwrap()
    }

    #[test]
    fn flat_zero_std_zero_cost() {
        let belief = flat_belief(10, 10, 0.0);
        let params = CostParams::default();
        let mut rng = master_rng(1);
        for cell in [(0, 0), (5, 5), (9, 9)] {
            let c = cost_sample(&belief, &params, cell, &mut rng).unwrap();
            assert_eq!(c, 0.0);
        }
    }

    #[test]
    fn deterministic_step_at_critical_height_costs_one() {
        // 0.25 is exactly representable in f32, so the stored elevation is
        // bit-exact and the cost comes out at exactly 1.
        let params = CostParams {
            slope_weight: 0.0,
            step_weight: 1.0,
            step_critical: 0.25,
            ..CostParams::default()
        };
        let belief = step_belief(params.step_critical, 1.0);
        let mut rng = master_rng(0);
        // Cell adjacent to the discontinuity sees the full step.
        let c = cost_sample(&belief, &params, (10, 5), &mut rng).unwrap();
        assert!((c - 1.0).abs() < 1e-12, "cost {c}");
    }

    #[test]
    fn zero_std_is_rng_independent() {
        let belief = step_belief(0.2, 1.0);
        let params = CostParams::default();
        let a = cost_sample(&belief, &params, (10, 5), &mut master_rng(1)).unwrap();
        let b = cost_sample(&belief, &params, (10, 5), &mut master_rng(999)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_bounds_cell_rejected() {
        let belief = flat_belief(4, 4, 0.0);
        let err = cost_sample(&belief, &CostParams::default(), (4, 0), &mut master_rng(0));
        assert!(matches!(err, Err(RiskError::OutOfBounds { .. })));
    }

    /// Rockafellar-Uryasev infimum computed directly: the empirical objective
    /// is piecewise linear in z with kinks at the samples, so scanning sample
    /// values finds the exact minimum.
    fn cvar_ru_oracle(samples: &[f64], alpha: f64) -> f64 {
        let n = samples.len() as f64;
        let mut best = f64::INFINITY;
        for &z in samples {
            let penalty: f64 = samples.iter().map(|&s| (s - z).max(0.0)).sum();
            best = best.min(z + penalty / (n * (1.0 - alpha)));
        }
        best
    }

    #[test]
    fn cvar_of_constant_is_constant() {
        let samples = vec![0.7; 50];
        for alpha in [0.01, 0.5, 0.9, 1.0] {
            assert!((cvar(&samples, alpha).unwrap() - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn cvar_uniform_tail_mean() {
        let mut rng = master_rng(42);
        let samples: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let v = cvar(&samples, 0.9).unwrap();
        // Analytic tail mean of U(0,1) above the 0.9 quantile.
        assert!((v - 0.95).abs() < 0.01, "cvar {v}");
        // Brute-force tail average agrees.
        let mut sorted = samples.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let brute: f64 = sorted[..1000].iter().sum::<f64>() / 1000.0;
        assert!((v - brute).abs() < 1e-9);
    }

    #[test]
    fn cvar_small_alpha_approaches_mean() {
        let mut rng = master_rng(7);
        let samples: Vec<f64> = (0..5000).map(|_| rng.random::<f64>() * 3.0).collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        for alpha in [0.01, 0.002] {
            let v = cvar(&samples, alpha).unwrap();
            // Tail mean over the worst (1 - alpha) converges to the mean; the
            // gap is about alpha * mean for this distribution.
            assert!(
                (v - mean).abs() / mean < 1.5 * alpha + 1e-3,
                "alpha {alpha}: cvar {v} mean {mean}"
            );
        }
        let v = cvar(&samples, 0.002).unwrap();
        assert!((v - mean).abs() / mean < 0.01, "cvar {v} mean {mean}");
    }

    #[test]
    fn cvar_matches_ru_minimization() {
        let mut rng = master_rng(3);
        for trial in 0..200 {
            let n = 5 + (trial % 90);
            let samples: Vec<f64> = (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0)
                .collect();
            for alpha in [0.1, 0.5, 0.9, 0.99] {
                let fast = cvar(&samples, alpha).unwrap();
                let oracle = cvar_ru_oracle(&samples, alpha);
                assert!(
                    (fast - oracle).abs() < 1e-9,
                    "n={n} alpha={alpha}: {fast} vs {oracle}"
                );
            }
        }
    }

    #[test]
    fn cvar_dominates_mean_and_is_monotone_in_alpha() {
        let mut rng = master_rng(11);
        for _ in 0..100 {
            let samples: Vec<f64> = (0..200)
                .map(|_| rng.sample::<f64, _>(StandardNormal).abs())
                .collect();
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            let mut last = f64::MIN;
            for alpha in [0.05, 0.3, 0.6, 0.9, 0.99, 1.0] {
                let v = cvar(&samples, alpha).unwrap();
                assert!(v >= mean - 1e-12);
                assert!(v >= last - 1e-12);
                last = v;
            }
            let max = samples.iter().cloned().fold(f64::MIN, f64::max);
            assert!((cvar(&samples, 1.0).unwrap() - max).abs() < 1e-12);
        }
    }

    #[test]
    fn cvar_input_validation() {
        assert!(matches!(cvar(&[], 0.5), Err(RiskError::EmptySamples)));
        assert!(matches!(cvar(&[1.0], 0.0), Err(RiskError::BadAlpha(_))));
        assert!(matches!(cvar(&[1.0], 1.5), Err(RiskError::BadAlpha(_))));
        assert!(matches!(
            cvar(&[1.0, f64::NAN], 0.5),
            Err(RiskError::NonFinite)
        ));
    }

    #[test]
    fn risk_map_flat_deterministic_is_zero() {
        let belief = flat_belief(8, 8, 0.0);
        let map = build_risk_map(
            &belief,
            &CostParams::default(),
            &RiskConfig::default(),
            123,
        )
        .unwrap();
        assert!(map.rho().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn risk_map_k1_zero_std_equals_deterministic_cost() {
        let belief = step_belief(0.1, 1.0);
        let params = CostParams::default();
        let config = RiskConfig {
            mc_samples: 1,
            ..RiskConfig::default()
        };
        let map = build_risk_map(&belief, &params, &config, 5).unwrap();
        for iy in 0..belief.spec().height {
            for ix in 0..belief.spec().width {
                let direct =
                    cost_sample(&belief, &params, (ix, iy), &mut master_rng(0)).unwrap() as f32;
                assert_eq!(map.rho()[belief.spec().index(ix, iy)], direct);
            }
        }
    }

    #[test]
    fn risk_map_monotone_in_alpha() {
        let mut recipe = TerrainRecipe::flat(GridSpec::new(10, 10, 0.1, (0.0, 0.0)).unwrap(), 0.05);
        recipe.roughness_amp = 0.05;
        recipe.seed = 2;
        let belief = generate_terrain(&recipe).unwrap();
        let params = CostParams::default();
        let mut last: Option<Vec<f32>> = None;
        for alpha in [0.5, 0.8, 0.95] {
            let config = RiskConfig {
                alpha,
                gamma: 0.5,
                mc_samples: 64,
            };
            let map = build_risk_map(&belief, &params, &config, 77).unwrap();
            if let Some(prev) = &last {
                for (a, b) in prev.iter().zip(map.rho().iter()) {
                    assert!(b >= a, "alpha increase lowered rho: {a} -> {b}");
                }
            }
            last = Some(map.rho().to_vec());
        }
    }

    #[test]
    fn risk_map_build_is_reproducible() {
        let mut recipe = TerrainRecipe::flat(GridSpec::new(12, 9, 0.1, (0.0, 0.0)).unwrap(), 0.03);
        recipe.roughness_amp = 0.08;
        recipe.seed = 21;
        let belief = generate_terrain(&recipe).unwrap();
        let a = build_risk_map(&belief, &CostParams::default(), &RiskConfig::default(), 9).unwrap();
        let b = build_risk_map(&belief, &CostParams::default(), &RiskConfig::default(), 9).unwrap();
        assert_eq!(a.rho(), b.rho());
    }

    #[test]
    fn risk_map_grid_round_trip() {
        let belief = step_belief(0.3, 1.0);
        let map =
            build_risk_map(&belief, &CostParams::default(), &RiskConfig::default(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rho.grid");
        map.save(&path).unwrap();
        let loaded = RiskMap::load(&path, *map.config()).unwrap();
        assert_eq!(map.rho(), loaded.rho());
        assert_eq!(map.spec(), loaded.spec());
    }

    /// Hand-built 1x3 map with an unsafe middle cell.
    fn three_cell_map() -> RiskMap {
        let spec = GridSpec::new(3, 1, 1.0, (0.0, 0.0)).unwrap();
        RiskMap::from_rho(
            spec,
            vec![0.0, 2.0, 0.0],
            RiskConfig {
                alpha: 0.9,
                gamma: 0.5,
                mc_samples: 1,
            },
        )
        .unwrap()
    }

    #[test]
    fn empty_action_sequence_safe_at_safe_pose() {
        let map = three_cell_map();
        let safe = map.safe_set();
        let u = ActionSequence::new(vec![]);
        assert!(safe.is_safe(&u, &Pose::new(0.5, 0.5, 0.0)));
        assert!(!safe.is_safe(&u, &Pose::new(1.5, 0.5, 0.0)));
    }

    #[test]
    fn waypoint_in_unsafe_cell_is_unsafe() {
        let map = three_cell_map();
        let safe = map.safe_set();
        let u = ActionSequence::new(vec![[1.0, 0.0]]);
        assert!(!safe.is_safe(&u, &Pose::new(0.5, 0.5, 0.0)));
    }

    #[test]
    fn segment_crossing_unsafe_cell_is_unsafe() {
        let map = three_cell_map();
        let safe = map.safe_set();
        // Both endpoints in safe cells, segment crosses the unsafe middle.
        let u = ActionSequence::new(vec![[2.0, 0.0]]);
        let pose = Pose::new(0.5, 0.5, 0.0);
        assert!(safe.is_point_safe([0.5, 0.5]));
        assert!(safe.is_point_safe([2.5, 0.5]));
        assert!(!safe.is_safe(&u, &pose));
        // Brute-force fine sampling agrees.
        let mut crossed = false;
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            if !safe.is_point_safe([0.5 + 2.0 * t, 0.5]) {
                crossed = true;
            }
        }
        assert!(crossed);
    }

    #[test]
    fn out_of_grid_points_are_unsafe() {
        let map = three_cell_map();
        let safe = map.safe_set();
        assert!(!safe.is_point_safe([-0.1, 0.5]));
        assert!(!safe.is_point_safe([0.5, 1.1]));
        let u = ActionSequence::new(vec![[0.0, 5.0]]);
        assert!(!safe.is_safe(&u, &Pose::new(0.5, 0.5, 0.0)));
    }

    /// Random bumpy map for surrogate tests: strictly inside the grid, risk
    /// varies smoothly enough that bilinear interpolation is well exercised.
    fn bumpy_map(seed: u64, w: usize, h: usize) -> RiskMap {
        let mut rng = master_rng(seed);
        let spec = GridSpec::new(w, h, 0.1, (0.0, 0.0)).unwrap();
        let rho: Vec<f32> = (0..spec.cells())
            .map(|_| rng.random::<f32>() * 1.2)
            .collect();
        RiskMap::from_rho(
            spec,
            rho,
            RiskConfig {
                alpha: 0.9,
                gamma: 0.5,
                mc_samples: 1,
            },
        )
        .unwrap()
    }

    #[test]
    fn surrogate_deep_safe_negative_value_tiny_gradient() {
        let spec = GridSpec::new(10, 10, 0.1, (0.0, 0.0)).unwrap();
        let map = RiskMap::from_rho(
            spec,
            vec![0.0; 100],
            RiskConfig {
                alpha: 0.9,
                gamma: 0.5,
                mc_samples: 1,
            },
        )
        .unwrap();
        let surr = map.surrogate(DEFAULT_SURROGATE_MARGIN);
        let u = ActionSequence::new(vec![[0.1, 0.0], [0.2, 0.05]]);
        let (value, grad) = surr.eval(&u, &Pose::new(0.45, 0.45, 0.3));
        assert!(value < 0.0);
        for g in grad {
            assert!(g[0].abs() < 1e-4 && g[1].abs() < 1e-4);
        }
    }

    #[test]
    fn surrogate_unsafe_waypoint_positive_value_gradient_points_away() {
        let spec = GridSpec::new(9, 3, 0.1, (0.0, 0.0)).unwrap();
        // Risk increases to the right; cells beyond x=0.6 are hot.
        let mut rho = vec![0.0f32; spec.cells()];
        for iy in 0..3 {
            for ix in 0..9 {
                if ix >= 6 {
                    rho[spec.index(ix, iy)] = 2.0;
                }
            }
        }
        let map = RiskMap::from_rho(
            spec,
            rho,
            RiskConfig {
                alpha: 0.9,
                gamma: 0.5,
                mc_samples: 1,
            },
        )
        .unwrap();
        let surr = map.surrogate(DEFAULT_SURROGATE_MARGIN);
        let pose = Pose::new(0.15, 0.15, 0.0);
        let u = ActionSequence::new(vec![[0.5, 0.0]]);
        let (value, grad) = surr.eval(&u, &pose);
        assert!(value > 0.0, "value {value}");
        // Risk grows with +x, so the descent direction is -x.
        assert!(grad[0][0] > 0.0, "gradient {:?}", grad[0]);
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let map = bumpy_map(99, 30, 30);
        let surr = map.surrogate(DEFAULT_SURROGATE_MARGIN);
        let res = map.spec().resolution;
        let h = 1e-4 * res; // 1e-4 cells
        let mut rng = master_rng(4242);
        let mut checked = 0;
        let mut max_rel = 0.0f64;
        'outer: while checked < 100 {
            let pose = Pose::new(
                0.8 + rng.random::<f64>() * 1.4,
                0.8 + rng.random::<f64>() * 1.4,
                rng.random::<f64>() * std::f64::consts::TAU,
            );
            let n_wp = 1 + (rng.random::<u32>() % 3) as usize;
            let mut wps = Vec::new();
            for _ in 0..n_wp {
                wps.push([
                    (rng.random::<f64>() - 0.5) * 0.8,
                    (rng.random::<f64>() - 0.5) * 0.8,
                ]);
            }
            let u = ActionSequence::new(wps);
            // Reject configurations near non-smooth points: bilinear seams,
            // polyline subdivision-count boundaries, grid margins.
            let pts = action_polyline(&u, &pose);
            let spacing = SEGMENT_CHECK_FRACTION * res;
            for w in pts.windows(2) {
                let len = crate::geometry::dist(w[0], w[1]);
                let f = (len / spacing).fract();
                if f < 1e-2 || f > 1.0 - 1e-2 {
                    continue 'outer;
                }
            }
            for cp in sample_polyline(&pts, spacing) {
                let p = cp.point;
                if p[0] < 0.3 || p[0] > 2.7 || p[1] < 0.3 || p[1] > 2.7 {
                    continue 'outer;
                }
                for c in [p[0], p[1]] {
                    let g = c / res - 0.5;
                    let f = g.fract();
                    if f < 1e-2 || f > 1.0 - 1e-2 {
                        continue 'outer;
                    }
                }
            }

            let (_, grad) = surr.eval(&u, &pose);
            for k in 0..u.len() {
                for axis in 0..2 {
                    let mut up = u.clone();
                    up.waypoints_mut()[k][axis] += h;
                    let mut dn = u.clone();
                    dn.waypoints_mut()[k][axis] -= h;
                    let (vu, _) = surr.eval(&up, &pose);
                    let (vd, _) = surr.eval(&dn, &pose);
                    let fd = (vu - vd) / (2.0 * h);
                    let denom = fd.abs().max(grad[k][axis].abs()).max(1e-6);
                    let rel = (fd - grad[k][axis]).abs() / denom;
                    max_rel = max_rel.max(rel);
                }
            }
            checked += 1;
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn is_safe_consistent_with_hard_margin_outside_band() {
        let map = bumpy_map(17, 20, 20);
        let safe = map.safe_set();
        let gamma = safe.gamma();
        let mut rng = master_rng(8);
        let mut tested = 0;
        while tested < 200 {
            let pose = Pose::new(
                0.4 + rng.random::<f64>() * 1.2,
                0.4 + rng.random::<f64>() * 1.2,
                rng.random::<f64>() * std::f64::consts::TAU,
            );
            let u = ActionSequence::new(vec![[
                (rng.random::<f64>() - 0.5) * 0.6,
                (rng.random::<f64>() - 0.5) * 0.6,
            ]]);
            let pts = action_polyline(&u, &pose);
            let spacing = SEGMENT_CHECK_FRACTION * map.spec().resolution;
            let checked = sample_polyline(&pts, spacing);
            if checked
                .iter()
                .any(|cp| map.spec().cell_of(cp.point).is_none())
            {
                continue;
            }
            // Hard max-margin from direct cell lookups.
            let hard = checked
                .iter()
                .map(|cp| {
                    let (ix, iy) = map.spec().cell_of(cp.point).unwrap();
                    map.rho_at(ix, iy) - gamma
                })
                .fold(f64::MIN, f64::max);
            assert_eq!(safe.is_safe(&u, &pose), hard <= 0.0);
            tested += 1;
        }
    }
}
