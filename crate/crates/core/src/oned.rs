//! 1-D annealed-Langevin demonstration of the guidance strategies.
//!
//! A bimodal Gaussian-mixture target with a forbidden interval stands in for
//! the navigation problem: the analytic score replaces the trained denoiser,
//! isolating guidance behavior from training error. Unguided sampling,
//! classifier-style penalties across a range of weights, and the interval
//! analog of projection guidance run on identical noise streams, and the
//! results are emitted as CSV plus an SVG histogram figure.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::guidance::{GuidanceError, GuidanceMode};
use crate::rng::stream_rng;

/// Smoothing width of the 1-D risk surrogate.
pub const ONED_MARGIN: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum OnedError {
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("invalid langevin config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

/// Gaussian-mixture target density with a forbidden interval `[a, b]`.
/// An empty interval (`a == b`) disables the constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct OneDTarget {
    pub components: Vec<MixtureComponent>,
    pub forbidden: (f64, f64),
}

impl OneDTarget {
    pub fn new(components: Vec<MixtureComponent>, forbidden: (f64, f64)) -> Result<Self, OnedError> {
        if components.is_empty() {
            return Err(OnedError::InvalidTarget("no mixture components".into()));
        }
        if components.iter().any(|c| c.weight <= 0.0 || c.std <= 0.0) {
            return Err(OnedError::InvalidTarget(
                "weights and stds must be positive".into(),
            ));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(OnedError::InvalidTarget(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        if forbidden.0 > forbidden.1 {
            return Err(OnedError::InvalidTarget("forbidden interval a > b".into()));
        }
        Ok(Self {
            components,
            forbidden,
        })
    }

    /// The default demo: equal modes at -2 and +2 with std 0.4, forbidden
    /// interval [-0.5, 1.5] blocking the right mode's approach.
    pub fn default_demo() -> Self {
        Self::new(
            vec![
                MixtureComponent {
                    weight: 0.5,
                    mean: -2.0,
                    std: 0.4,
                },
                MixtureComponent {
                    weight: 0.5,
                    mean: 2.0,
                    std: 0.4,
                },
            ],
            (-0.5, 1.5),
        )
        .expect("default target is valid")
    }

    pub fn has_constraint(&self) -> bool {
        self.forbidden.1 > self.forbidden.0
    }

    /// Strictly inside the forbidden interval. Boundary points count as
    /// safe, consistent with the `c <= 0` safe-set convention.
    pub fn is_violation(&self, x: f64) -> bool {
        self.has_constraint() && x > self.forbidden.0 && x < self.forbidden.1
    }

    /// Log density of the target convolved with `N(0, noise^2)`.
    pub fn log_density(&self, x: f64, noise: f64) -> f64 {
        let mut max_term = f64::MIN;
        let mut terms = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let s2 = c.std * c.std + noise * noise;
            let z = (x - c.mean) * (x - c.mean) / s2;
            let term = c.weight.ln() - 0.5 * s2.ln() - 0.5 * z;
            max_term = max_term.max(term);
            terms.push(term);
        }
        let sum: f64 = terms.iter().map(|t| (t - max_term).exp()).sum();
        max_term + sum.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }

    /// Probability mass of the noise-convolved target inside the forbidden
    /// interval.
    pub fn forbidden_mass(&self, noise: f64) -> f64 {
        if !self.has_constraint() {
            return 0.0;
        }
        let (a, b) = self.forbidden;
        self.components
            .iter()
            .map(|c| {
                let s = (c.std * c.std + noise * noise).sqrt();
                c.weight * (normal_cdf((b - c.mean) / s) - normal_cdf((a - c.mean) / s))
            })
            .sum()
    }
}

/// Exact score `d/dx log p_noise(x)` of the noise-convolved mixture.
pub fn analytic_score(target: &OneDTarget, x: f64, noise_level: f64) -> f64 {
    let mut max_term = f64::MIN;
    let mut terms = Vec::with_capacity(target.components.len());
    for c in &target.components {
        let s2 = c.std * c.std + noise_level * noise_level;
        let z = (x - c.mean) * (x - c.mean) / s2;
        let log_term = c.weight.ln() - 0.5 * s2.ln() - 0.5 * z;
        max_term = max_term.max(log_term);
        terms.push((log_term, -(x - c.mean) / s2));
    }
    let mut denom = 0.0;
    let mut num = 0.0;
    for (log_term, score_i) in terms {
        let r = (log_term - max_term).exp();
        denom += r;
        num += r * score_i;
    }
    num / denom
}

/// Smoothed 1-D risk surrogate: `c(x) <= 0` iff x is outside the open
/// forbidden interval, softplus-smoothed with width `delta`. Returns the
/// value and its derivative. A degenerate interval yields the constant safe
/// plateau with zero derivative.
pub fn c_risk_1d(target: &OneDTarget, x: f64, delta: f64) -> (f64, f64) {
    if !target.has_constraint() {
        return (-delta * std::f64::consts::LN_2, 0.0);
    }
    let (a, b) = target.forbidden;
    let (m, dm) = if x - a < b - x {
        (x - a, 1.0)
    } else {
        (b - x, -1.0)
    };
    let z = m / delta;
    let value = delta * softplus(z) - delta * std::f64::consts::LN_2;
    let grad = sigmoid(z) * dm;
    (value, grad)
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

/// Annealed Langevin settings.
#[derive(Debug, Clone)]
pub struct LangevinConfig {
    /// Per-level step size is `step_scale * sigma_level^2`.
    pub step_scale: f64,
    /// Annealing noise levels, largest first.
    pub noise_levels: Vec<f64>,
    pub steps_per_level: usize,
    pub samples: usize,
    pub init_mean: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        Self {
            step_scale: 0.25,
            noise_levels: geometric_levels(1.0, 0.01, 10),
            steps_per_level: 100,
            samples: 10_000,
            init_mean: 0.0,
            init_std: 0.25,
            seed: 0,
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<(), OnedError> {
        if !self.step_scale.is_finite() || self.step_scale <= 0.0 {
            return Err(OnedError::InvalidConfig("step_scale must be > 0".into()));
        }
        if self.noise_levels.is_empty() || self.noise_levels.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(OnedError::InvalidConfig(
                "need at least one positive noise level".into(),
            ));
        }
        if self.steps_per_level == 0 || self.samples == 0 {
            return Err(OnedError::InvalidConfig(
                "steps_per_level and samples must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.noise_levels.len() * self.steps_per_level
    }
}

/// Geometric ladder from `hi` down to `lo` with `n` levels.
pub fn geometric_levels(hi: f64, lo: f64, n: usize) -> Vec<f64> {
    assert!(n >= 1 && hi > 0.0 && lo > 0.0);
    if n == 1 {
        return vec![hi];
    }
    let ratio = (lo / hi).powf(1.0 / (n - 1) as f64);
    (0..n).map(|i| hi * ratio.powi(i as i32)).collect()
}

/// Run annealed Langevin dynamics and return the final samples.
///
/// Chains are independent, each with its own RNG stream, so the run is
/// deterministic regardless of parallel scheduling. The projection mode maps
/// [`crate::guidance::ProjectionConfig`] phase boundaries onto the analog
/// diffusion time `t = total_steps .. 1` counting down over the anneal.
pub fn langevin_run(
    target: &OneDTarget,
    config: &LangevinConfig,
    mode: &GuidanceMode,
) -> Result<Vec<f64>, OnedError> {
    config.validate()?;
    if let GuidanceMode::Classifier { eta } = mode {
        if *eta < 0.0 {
            return Err(OnedError::InvalidConfig(format!(
                "eta must be >= 0, got {eta}"
            )));
        }
    }
    if let GuidanceMode::Projection(cfg) = mode {
        cfg.validate(config.total_steps())
            .map_err(OnedError::Guidance)?;
    }

    let total = config.total_steps();
    let run_chain = |chain: usize| -> f64 {
        let mut rng = stream_rng(config.seed, chain as u64);
        let mut x = config.init_mean + config.init_std * rng.sample::<f64, _>(StandardNormal);
        if let GuidanceMode::Projection(_) = mode {
            // Safe start: snap initializations inside the interval to the
            // nearest boundary (the limit of boundary shrinking).
            if target.is_violation(x) {
                let (a, b) = target.forbidden;
                x = if x - a < b - x { a } else { b };
            }
        }
        let mut step_index = 0usize;
        for &sigma in &config.noise_levels {
            let eps = config.step_scale * sigma * sigma;
            let noise_scale = eps.sqrt();
            for _ in 0..config.steps_per_level {
                step_index += 1;
                let t = total - step_index + 1;
                let drift = 0.5 * eps * analytic_score(target, x, sigma);
                match mode {
                    GuidanceMode::Unguided => {
                        x += drift + noise_scale * rng.sample::<f64, _>(StandardNormal);
                    }
                    GuidanceMode::Classifier { eta } => {
                        let mut d = drift;
                        if *eta != 0.0 {
                            let (_, grad) = c_risk_1d(target, x, ONED_MARGIN);
                            d -= 0.5 * eps * eta * grad;
                        }
                        x += d + noise_scale * rng.sample::<f64, _>(StandardNormal);
                    }
                    GuidanceMode::Projection(cfg) => {
                        // Same association as the unguided update so the two
                        // modes are bit-identical when nothing violates.
                        let mut cand =
                            x + (drift + noise_scale * rng.sample::<f64, _>(StandardNormal));
                        if target.is_violation(cand) && t > cfg.t2 {
                            for _ in 0..cfg.max_rejections {
                                cand = x
                                    + (drift
                                        + noise_scale * rng.sample::<f64, _>(StandardNormal));
                                if !target.is_violation(cand) {
                                    break;
                                }
                            }
                        }
                        if target.is_violation(cand) && t > cfg.t1 {
                            for _ in 0..cfg.max_projections {
                                cand = (1.0 - cfg.beta_mix) * cand + cfg.beta_mix * x;
                                if !target.is_violation(cand) {
                                    break;
                                }
                            }
                        }
                        if target.is_violation(cand) {
                            // Shrink toward the nearest safe boundary point.
                            let (a, b) = target.forbidden;
                            let mid = 0.5 * (a + b);
                            let boundary = if cand < mid { a } else { b };
                            loop {
                                cand = (1.0 - cfg.beta_mix) * cand + cfg.beta_mix * boundary;
                                if !target.is_violation(cand) {
                                    break;
                                }
                                if (cand - boundary).abs() < 1e-15 {
                                    cand = boundary;
                                    break;
                                }
                            }
                        }
                        x = cand;
                    }
                }
            }
        }
        x
    };

    let samples: Vec<f64> = if config.samples > 1 {
        (0..config.samples).into_par_iter().map(run_chain).collect()
    } else {
        (0..config.samples).map(run_chain).collect()
    };
    Ok(samples)
}

/// One completed demo run with its summary statistics.
#[derive(Debug, Clone)]
pub struct DemoRun {
    pub label: String,
    pub samples: Vec<f64>,
    pub violation_fraction: f64,
    /// Sample mass assigned to each mixture component (nearest mean).
    pub mode_masses: Vec<f64>,
}

impl DemoRun {
    pub fn from_samples(label: impl Into<String>, target: &OneDTarget, samples: Vec<f64>) -> Self {
        let n = samples.len().max(1) as f64;
        let violations = samples.iter().filter(|&&x| target.is_violation(x)).count();
        let mut masses = vec![0usize; target.components.len()];
        for &x in &samples {
            let mut best = 0usize;
            let mut best_d = f64::MAX;
            for (i, c) in target.components.iter().enumerate() {
                let d = (x - c.mean).abs();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            masses[best] += 1;
        }
        Self {
            label: label.into(),
            violation_fraction: violations as f64 / n,
            mode_masses: masses.iter().map(|&m| m as f64 / n).collect(),
            samples,
        }
    }

    pub fn dominant_mode_mass(&self) -> f64 {
        self.mode_masses.iter().cloned().fold(0.0, f64::max)
    }
}

/// Histogram with fixed range; out-of-range samples clamp into the edge bins
/// so the counts always integrate to the sample count.
pub fn histogram(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    assert!(bins >= 1 && hi > lo);
    let mut counts = vec![0usize; bins];
    let width = (hi - lo) / bins as f64;
    for &x in samples {
        let idx = ((x - lo) / width).floor();
        let idx = (idx.max(0.0) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
}

/// Histogram range and bin count shared by the CSV and SVG outputs.
pub const HIST_LO: f64 = -4.5;
pub const HIST_HI: f64 = 4.5;
pub const HIST_BINS: usize = 90;

/// Write `report.csv` (one row per run), `histograms.csv`, and `figure.svg`
/// under `dir`.
pub fn emit_demo_report(
    runs: &[DemoRun],
    target: &OneDTarget,
    dir: &Path,
) -> Result<(), OnedError> {
    std::fs::create_dir_all(dir)?;

    let mut report = String::from("label,samples,violation_fraction,mode_masses\n");
    for run in runs {
        let masses: Vec<String> = run.mode_masses.iter().map(|m| format!("{m:.6}")).collect();
        report.push_str(&format!(
            "{},{},{:.6},{}\n",
            run.label,
            run.samples.len(),
            run.violation_fraction,
            masses.join(";")
        ));
    }
    std::fs::write(dir.join("report.csv"), report)?;

    let mut hist_csv = String::from("label,bin_lo,bin_hi,count\n");
    for run in runs {
        let counts = histogram(&run.samples, HIST_LO, HIST_HI, HIST_BINS);
        let width = (HIST_HI - HIST_LO) / HIST_BINS as f64;
        for (i, c) in counts.iter().enumerate() {
            let lo = HIST_LO + i as f64 * width;
            hist_csv.push_str(&format!("{},{:.4},{:.4},{}\n", run.label, lo, lo + width, c));
        }
    }
    std::fs::write(dir.join("histograms.csv"), hist_csv)?;

    std::fs::write(dir.join("figure.svg"), render_svg(runs, target))?;
    Ok(())
}

/// Stacked histogram panels, one per run, forbidden interval shaded.
fn render_svg(runs: &[DemoRun], target: &OneDTarget) -> String {
    let panel_w = 640.0;
    let panel_h = 120.0;
    let margin = 30.0;
    let total_h = margin + runs.len() as f64 * (panel_h + margin);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
         viewBox=\"0 0 {} {}\">\n",
        panel_w + 2.0 * margin,
        total_h,
        panel_w + 2.0 * margin,
        total_h
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let x_of = |x: f64| margin + (x - HIST_LO) / (HIST_HI - HIST_LO) * panel_w;

    for (ri, run) in runs.iter().enumerate() {
        let top = margin + ri as f64 * (panel_h + margin);
        let base = top + panel_h;
        let counts = histogram(&run.samples, HIST_LO, HIST_HI, HIST_BINS);
        let peak = counts.iter().cloned().max().unwrap_or(1).max(1) as f64;
        if target.has_constraint() {
            let (a, b) = target.forbidden;
            svg.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" \
                 fill=\"#f4c7c3\" opacity=\"0.7\"/>\n",
                x_of(a),
                top,
                x_of(b) - x_of(a),
                panel_h
            ));
        }
        let bin_w = panel_w / HIST_BINS as f64;
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let h = c as f64 / peak * (panel_h - 14.0);
            svg.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" \
                 fill=\"#4a78b5\"/>\n",
                margin + i as f64 * bin_w,
                base - h,
                bin_w.max(1.0) - 0.2,
                h
            ));
        }
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            margin,
            base,
            margin + panel_w,
            base
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">\
             {} (violations {:.2}%)</text>\n",
            margin,
            top - 6.0,
            xml_escape(&run.label),
            100.0 * run.violation_fraction
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Standard normal CDF via the Abramowitz-Stegun erf approximation
/// (absolute error below 1.5e-7, plenty for the demo's 2-point tolerances).
pub fn normal_cdf(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    0.5 * (1.0 + erf(z))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < sa.len() && j < sb.len() {
        if sa[i] <= sb[j] {
            i += 1;
        } else {
            j += 1;
        }
        let fa = i as f64 / sa.len() as f64;
        let fb = j as f64 / sb.len() as f64;
        d = d.max((fa - fb).abs());
    }
    d
}

/// 5%-level critical value for the two-sample KS statistic.
pub fn ks_critical_5pct(n: usize, m: usize) -> f64 {
    1.358 * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::ProjectionConfig;
    use crate::rng::master_rng;

    #[test]
    fn score_single_component_closed_form() {
        let target = OneDTarget::new(
            vec![MixtureComponent {
                weight: 1.0,
                mean: 0.7,
                std: 0.5,
            }],
            (0.0, 0.0),
        )
        .unwrap();
        for (x, noise) in [(0.0, 0.0), (1.3, 0.2), (-2.0, 1.0)] {
            let expect = -(x - 0.7) / (0.5 * 0.5 + noise * noise);
            let got = analytic_score(&target, x, noise);
            assert!((got - expect).abs() < 1e-12, "x={x} noise={noise}");
        }
    }

    #[test]
    fn score_symmetric_midpoint_is_zero() {
        let target = OneDTarget::default_demo();
        assert!(analytic_score(&target, 0.0, 0.3).abs() < 1e-12);
    }

    #[test]
    fn score_matches_finite_differences_of_log_density() {
        let target = OneDTarget::default_demo();
        let mut rng = master_rng(2);
        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for _ in 0..1000 {
            let x = (rng.random::<f64>() - 0.5) * 8.0;
            let noise = 0.05 + rng.random::<f64>() * 1.0;
            let fd =
                (target.log_density(x + h, noise) - target.log_density(x - h, noise)) / (2.0 * h);
            let score = analytic_score(&target, x, noise);
            let rel = (fd - score).abs() / score.abs().max(1e-6);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-6, "max relative error {max_rel}");
    }

    #[test]
    fn c_risk_sign_convention() {
        let target = OneDTarget::default_demo();
        let (inside, _) = c_risk_1d(&target, 0.5, ONED_MARGIN);
        assert!(inside > 0.0);
        let (outside, _) = c_risk_1d(&target, -3.0, ONED_MARGIN);
        assert!(outside < 0.0);
        let (boundary, _) = c_risk_1d(&target, target.forbidden.0, ONED_MARGIN);
        assert!(boundary.abs() < 1e-12);
        // Gradient pushes out of the interval on both halves.
        let (_, g_left) = c_risk_1d(&target, -0.2, ONED_MARGIN);
        assert!(g_left > 0.0); // increasing x increases penetration near a
        let (_, g_right) = c_risk_1d(&target, 1.2, ONED_MARGIN);
        assert!(g_right < 0.0);
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-9);
        assert!((normal_cdf(1.0) - 0.841_344_746).abs() < 1e-6);
        assert!((normal_cdf(-1.96) - 0.024_997_895).abs() < 1e-6);
    }

    fn small_config(samples: usize, seed: u64) -> LangevinConfig {
        LangevinConfig {
            samples,
            seed,
            ..LangevinConfig::default()
        }
    }

    #[test]
    fn unguided_recovers_mode_masses_and_forbidden_mass() {
        let target = OneDTarget::default_demo();
        let config = small_config(10_000, 7);
        let samples = langevin_run(&target, &config, &GuidanceMode::Unguided).unwrap();
        let run = DemoRun::from_samples("unguided", &target, samples);
        for (i, c) in target.components.iter().enumerate() {
            assert!(
                (run.mode_masses[i] - c.weight).abs() < 0.03,
                "mode {i}: mass {} vs weight {}",
                run.mode_masses[i],
                c.weight
            );
        }
        let analytic = target.forbidden_mass(0.0);
        assert!(
            (run.violation_fraction - analytic).abs() < 0.02,
            "violations {} vs analytic {analytic}",
            run.violation_fraction
        );
    }

    #[test]
    fn projection_has_zero_violations() {
        let target = OneDTarget::default_demo();
        let config = small_config(10_000, 11);
        let cfg = ProjectionConfig::default_for(config.total_steps());
        let samples = langevin_run(&target, &config, &GuidanceMode::Projection(cfg)).unwrap();
        let violations = samples.iter().filter(|&&x| target.is_violation(x)).count();
        assert_eq!(violations, 0);
    }

    #[test]
    fn classifier_sweep_monotone_and_mode_elimination() {
        let target = OneDTarget::default_demo();
        let mut last = f64::MAX;
        for eta in [0.0, 1.0, 10.0, 100.0] {
            let config = small_config(2000, 13);
            let samples =
                langevin_run(&target, &config, &GuidanceMode::Classifier { eta }).unwrap();
            let run = DemoRun::from_samples(format!("eta={eta}"), &target, samples);
            assert!(
                run.violation_fraction <= last + 0.02,
                "eta {eta}: violations rose {last} -> {}",
                run.violation_fraction
            );
            last = run.violation_fraction;
            if eta == 100.0 {
                assert!(
                    run.dominant_mode_mass() > 0.95,
                    "eta=100 dominant mode {}",
                    run.dominant_mode_mass()
                );
            }
        }
    }

    #[test]
    fn classifier_eta_zero_bitwise_matches_unguided() {
        let target = OneDTarget::default_demo();
        let config = small_config(64, 21);
        let a = langevin_run(&target, &config, &GuidanceMode::Unguided).unwrap();
        let b = langevin_run(&target, &config, &GuidanceMode::Classifier { eta: 0.0 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_interval_makes_all_modes_identical() {
        let target = OneDTarget::new(
            OneDTarget::default_demo().components,
            (0.25, 0.25),
        )
        .unwrap();
        let config = small_config(500, 31);
        let unguided = langevin_run(&target, &config, &GuidanceMode::Unguided).unwrap();
        let classifier =
            langevin_run(&target, &config, &GuidanceMode::Classifier { eta: 10.0 }).unwrap();
        let cfg = ProjectionConfig::default_for(config.total_steps());
        let projection = langevin_run(&target, &config, &GuidanceMode::Projection(cfg)).unwrap();
        // With no constraint the three dynamics are the same function of the
        // same noise stream.
        assert_eq!(unguided, classifier);
        assert_eq!(unguided, projection);
        // KS below the 5% critical value, trivially.
        let d = ks_statistic(&unguided, &projection);
        assert!(d <= ks_critical_5pct(unguided.len(), projection.len()));
    }

    #[test]
    fn projection_boosts_boundary_band_mass() {
        // The boundary-adjacent excess shows up where the constraint cuts
        // through a mode: there the blocked probability has density right at
        // the boundary to pile onto. A broad init populates both basins for
        // both runs (in 1-D a projected chain can never cross the interval,
        // so basin masses are fixed at initialization).
        let target = OneDTarget::new(
            OneDTarget::default_demo().components,
            (-0.5, 2.0),
        )
        .unwrap();
        let mut config = small_config(10_000, 41);
        config.init_std = 2.0;
        let sigma_l = *config.noise_levels.last().unwrap();
        let unguided = langevin_run(&target, &config, &GuidanceMode::Unguided).unwrap();
        let cfg = ProjectionConfig::default_for(config.total_steps());
        let projected = langevin_run(&target, &config, &GuidanceMode::Projection(cfg)).unwrap();
        let (a, b) = target.forbidden;
        let band = |x: f64| {
            (x >= a - 2.0 * sigma_l && x <= a) || (x >= b && x <= b + 2.0 * sigma_l)
        };
        let n1 = unguided.iter().filter(|&&x| band(x)).count();
        let n2 = projected.iter().filter(|&&x| band(x)).count();
        // One-sided two-proportion z test at 95%.
        let n = unguided.len() as f64;
        let p1 = n1 as f64 / n;
        let p2 = n2 as f64 / n;
        let pool = (n1 + n2) as f64 / (2.0 * n);
        let se = (2.0 * pool * (1.0 - pool) / n).sqrt();
        let z = (p2 - p1) / se.max(1e-12);
        assert!(z > 1.645, "band mass: unguided {n1}, projection {n2}, z {z}");
    }

    #[test]
    fn report_files_and_row_counts() {
        let target = OneDTarget::default_demo();
        let config = small_config(400, 51);
        let runs: Vec<DemoRun> = [
            ("unguided", GuidanceMode::Unguided),
            ("eta=10", GuidanceMode::Classifier { eta: 10.0 }),
        ]
        .into_iter()
        .map(|(label, mode)| {
            let samples = langevin_run(&target, &config, &mode).unwrap();
            DemoRun::from_samples(label, &target, samples)
        })
        .collect();
        let dir = tempfile::tempdir().unwrap();
        emit_demo_report(&runs, &target, dir.path()).unwrap();
        let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(report.lines().count(), runs.len() + 1);
        let hist = std::fs::read_to_string(dir.path().join("histograms.csv")).unwrap();
        assert_eq!(hist.lines().count(), runs.len() * HIST_BINS + 1);
        assert!(dir.path().join("figure.svg").exists());
        // Histograms integrate to the sample count.
        for run in &runs {
            let counts = histogram(&run.samples, HIST_LO, HIST_HI, HIST_BINS);
            assert_eq!(counts.iter().sum::<usize>(), run.samples.len());
        }
    }
}
