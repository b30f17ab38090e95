//! Inference-time coupling of the diffusion policy with the risk map.
//!
//! Three mechanisms: classifier-style guidance adds the scaled gradient of
//! the smooth risk surrogate to the predicted noise; projection guidance
//! keeps every chain iterate inside the hard safe set through a
//! rejection / previous-interpolation / action-shrinking ladder; and a
//! post-hoc truncation filter cuts a finished sequence before its first
//! unsafe waypoint.
//!
//! Projection loops test the exact [`SafeSet::is_safe`] predicate, never the
//! smooth surrogate: the surrogate exists only to provide gradients, the
//! guarantee has to be exact.

use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rand::Rng;

use crate::diffusion::{
    posterior_mean, reverse_update, ActionSequence, Context, DiffusionError, NoiseSchedule, Policy,
};
use crate::geometry::Pose;
use crate::risk::{RiskMap, RiskSurrogate, SafeSet, DEFAULT_SURROGATE_MARGIN};

/// Below this waypoint magnitude (meters) a shrinking action is considered
/// fully contracted onto the current pose.
const SHRINK_EPSILON: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum GuidanceError {
    #[error("guidance mode `{0}` requires a risk environment")]
    MissingEnv(&'static str),
    #[error("invalid guidance configuration: {0}")]
    InvalidConfig(String),
    #[error("projection cannot converge: the current pose is itself unsafe")]
    UnsafePose,
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Configuration of the projection ladder.
///
/// Phases over diffusion time `t` (counting down from `t_max`):
/// rejection sampling while `t > t2`, interpolation toward the previous safe
/// iterate while `t2 >= t > t1`, shrinking toward the zero action when
/// `t <= t1`. Each phase falls through to the next when its iteration cap is
/// exhausted, and the final phase always terminates from a safe pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionConfig {
    pub t1: usize,
    pub t2: usize,
    /// Mixing coefficient of the interpolation phases, in (0, 1).
    pub beta_mix: f64,
    pub max_rejections: usize,
    pub max_projections: usize,
}

impl ProjectionConfig {
    /// Repo defaults: `t2 = 0.6 T`, `t1 = 0.2 T`, mix 0.5, caps 20/50.
    pub fn default_for(t_max: usize) -> Self {
        Self {
            t1: t_max / 5,
            t2: 3 * t_max / 5,
            beta_mix: 0.5,
            max_rejections: 20,
            max_projections: 50,
        }
    }

    pub fn validate(&self, t_max: usize) -> Result<(), GuidanceError> {
        if self.t1 > self.t2 || self.t2 > t_max {
            return Err(GuidanceError::InvalidConfig(format!(
                "need t1 <= t2 <= {t_max}, got t1={} t2={}",
                self.t1, self.t2
            )));
        }
        if !(self.beta_mix > 0.0 && self.beta_mix < 1.0) {
            return Err(GuidanceError::InvalidConfig(format!(
                "beta_mix must be in (0, 1), got {}",
                self.beta_mix
            )));
        }
        if self.max_rejections == 0 || self.max_projections == 0 {
            return Err(GuidanceError::InvalidConfig(
                "iteration caps must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// How the reverse chain couples to the risk map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuidanceMode {
    Unguided,
    Classifier { eta: f64 },
    Projection(ProjectionConfig),
}

impl GuidanceMode {
    pub fn name(&self) -> &'static str {
        match self {
            GuidanceMode::Unguided => "none",
            GuidanceMode::Classifier { .. } => "classifier",
            GuidanceMode::Projection(_) => "projection",
        }
    }
}

/// Risk context for a guided chain: surrogate over the risk map plus the
/// robot pose anchoring the action sequence in the world.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceEnv<'a> {
    pub surrogate: RiskSurrogate<'a>,
    pub pose: Pose,
}

impl<'a> GuidanceEnv<'a> {
    pub fn new(map: &'a RiskMap, pose: Pose) -> Self {
        Self {
            surrogate: map.surrogate(DEFAULT_SURROGATE_MARGIN),
            pose,
        }
    }

    pub fn safe_set(&self) -> SafeSet<'a> {
        self.surrogate.map().safe_set()
    }
}

/// One classifier-guided reverse step in the normalized action space: the
/// epsilon prediction is shifted by `eta * grad c_risk`, with the gradient
/// taken at the unnormalized iterate and mapped through the normalization
/// scale. `eta = 0` skips the surrogate entirely and reproduces the unguided
/// step bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn classifier_step(
    u_t: &ActionSequence,
    t: usize,
    policy: &Policy,
    ctx: &Context,
    surrogate: &RiskSurrogate<'_>,
    pose: &Pose,
    eta: f64,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<ActionSequence, GuidanceError> {
    if eta < 0.0 {
        return Err(GuidanceError::InvalidConfig(format!(
            "eta must be >= 0, got {eta}"
        )));
    }
    let flat = u_t.to_flat();
    let eps = classifier_eps(&flat, t, policy, ctx, surrogate, pose, eta);
    Ok(ActionSequence::from_flat(&reverse_update(
        &flat, t, &eps, schedule, rng,
    )))
}

fn classifier_eps(
    u_flat: &[f64],
    t: usize,
    policy: &Policy,
    ctx: &Context,
    surrogate: &RiskSurrogate<'_>,
    pose: &Pose,
    eta: f64,
) -> Vec<f64> {
    let mut eps = policy.predict_eps(u_flat, t, ctx);
    if eta != 0.0 {
        let mut meters = u_flat.to_vec();
        policy.norm().unnormalize_flat(&mut meters);
        let (_, grad) = surrogate.eval(&ActionSequence::from_flat(&meters), pose);
        let scale = policy.norm().scale();
        for (k, g) in grad.iter().enumerate() {
            eps[2 * k] += eta * g[0] * scale[2 * k];
            eps[2 * k + 1] += eta * g[1] * scale[2 * k + 1];
        }
    }
    eps
}

/// One projection-guided reverse step in the normalized action space.
///
/// Assumes `u_t` is itself safe (established inductively from a safe start)
/// and returns a safe candidate in all cases, or [`GuidanceError::UnsafePose`]
/// if the pose itself is unsafe.
#[allow(clippy::too_many_arguments)]
pub fn projection_step(
    u_t: &ActionSequence,
    t: usize,
    policy: &Policy,
    ctx: &Context,
    env: &GuidanceEnv<'_>,
    cfg: &ProjectionConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<ActionSequence, GuidanceError> {
    let flat = u_t.to_flat();
    let out = projection_step_flat(&flat, t, policy, ctx, env, cfg, schedule, rng)?;
    Ok(ActionSequence::from_flat(&out))
}

#[allow(clippy::too_many_arguments)]
fn projection_step_flat(
    u_t: &[f64],
    t: usize,
    policy: &Policy,
    ctx: &Context,
    env: &GuidanceEnv<'_>,
    cfg: &ProjectionConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, GuidanceError> {
    let safe_set = env.safe_set();
    let norm = policy.norm();
    let in_meters = |flat: &[f64]| {
        let mut m = flat.to_vec();
        norm.unnormalize_flat(&mut m);
        m
    };
    let flat_safe = |flat: &[f64]| {
        safe_set.is_safe(&ActionSequence::from_flat(&in_meters(flat)), &env.pose)
    };

    let eps = policy.predict_eps(u_t, t, ctx);
    let mean = posterior_mean(u_t, t, &eps, schedule);
    let sigma = schedule.sigma(t);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        if sigma > 0.0 {
            mean.iter()
                .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect()
        } else {
            mean.clone()
        }
    };

    let mut cand = draw(rng);
    if flat_safe(&cand) {
        return Ok(cand);
    }

    // Rejection sampling: fresh posterior noise until safe.
    if t > cfg.t2 {
        for _ in 0..cfg.max_rejections {
            if sigma == 0.0 {
                break;
            }
            cand = draw(rng);
            if flat_safe(&cand) {
                return Ok(cand);
            }
        }
    }

    // Projection phases act on meters; affine mixes commute with the
    // normalization, shrinking toward zero does not.
    let mut cand_m = in_meters(&cand);
    let meters_safe = |m: &[f64]| safe_set.is_safe(&ActionSequence::from_flat(m), &env.pose);

    // Previous projection: interpolate toward the (safe) current iterate.
    if t > cfg.t1 {
        let u_t_m = in_meters(u_t);
        for _ in 0..cfg.max_projections {
            for (c, p) in cand_m.iter_mut().zip(u_t_m.iter()) {
                *c = (1.0 - cfg.beta_mix) * *c + cfg.beta_mix * p;
            }
            if meters_safe(&cand_m) {
                let mut out = cand_m;
                norm.normalize_flat(&mut out);
                return Ok(out);
            }
        }
    }

    // Small-action projection: shrink toward staying put.
    let (shrunk, _) = shrink_to_safety(cand_m, &env.pose, &safe_set, cfg.beta_mix)?;
    let mut out = shrunk;
    norm.normalize_flat(&mut out);
    Ok(out)
}

/// Shrink a meters-frame action toward the zero sequence until it is safe.
/// Returns the safe action and the number of shrink iterations. Fails only
/// when the pose itself is unsafe (the zero action reduces to the pose).
pub(crate) fn shrink_to_safety(
    mut cand_m: Vec<f64>,
    pose: &Pose,
    safe_set: &SafeSet<'_>,
    beta_mix: f64,
) -> Result<(Vec<f64>, usize), GuidanceError> {
    let mut iters = 0usize;
    loop {
        if safe_set.is_safe(&ActionSequence::from_flat(&cand_m), pose) {
            return Ok((cand_m, iters));
        }
        let max_mag = cand_m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if max_mag < SHRINK_EPSILON {
            // Fully contracted: only the pose itself remains.
            for v in cand_m.iter_mut() {
                *v = 0.0;
            }
            if safe_set.is_safe(&ActionSequence::from_flat(&cand_m), pose) {
                return Ok((cand_m, iters));
            }
            return Err(GuidanceError::UnsafePose);
        }
        for v in cand_m.iter_mut() {
            *v *= 1.0 - beta_mix;
        }
        iters += 1;
    }
}

/// Run a full reverse chain in the normalized action space with the selected
/// guidance. Projection chains are started from a safe iterate by shrinking
/// the initial noise in meters, which establishes the induction that keeps
/// every subsequent iterate safe.
pub fn run_chain(
    policy: &Policy,
    ctx: &Context,
    schedule: &NoiseSchedule,
    mode: &GuidanceMode,
    env: Option<&GuidanceEnv<'_>>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, GuidanceError> {
    let dim = 2 * policy.n_u();
    let mut u: Vec<f64> = (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();

    match mode {
        GuidanceMode::Unguided => {
            for t in (1..=schedule.t_max()).rev() {
                let eps = policy.predict_eps(&u, t, ctx);
                u = reverse_update(&u, t, &eps, schedule, rng);
            }
        }
        GuidanceMode::Classifier { eta } => {
            if *eta < 0.0 {
                return Err(GuidanceError::InvalidConfig(format!(
                    "eta must be >= 0, got {eta}"
                )));
            }
            let env = match env {
                Some(env) => env,
                None if *eta == 0.0 => {
                    // Zero-weight guidance never touches the surrogate.
                    for t in (1..=schedule.t_max()).rev() {
                        let eps = policy.predict_eps(&u, t, ctx);
                        u = reverse_update(&u, t, &eps, schedule, rng);
                    }
                    return Ok(u);
                }
                None => return Err(GuidanceError::MissingEnv("classifier")),
            };
            for t in (1..=schedule.t_max()).rev() {
                let eps = classifier_eps(&u, t, policy, ctx, &env.surrogate, &env.pose, *eta);
                u = reverse_update(&u, t, &eps, schedule, rng);
            }
        }
        GuidanceMode::Projection(cfg) => {
            cfg.validate(schedule.t_max())?;
            let env = env.ok_or(GuidanceError::MissingEnv("projection"))?;
            let safe_set = env.safe_set();
            let mut meters = u.clone();
            policy.norm().unnormalize_flat(&mut meters);
            let (meters, _) = shrink_to_safety(meters, &env.pose, &safe_set, cfg.beta_mix)?;
            u = meters;
            policy.norm().normalize_flat(&mut u);
            for t in (1..=schedule.t_max()).rev() {
                u = projection_step_flat(&u, t, policy, ctx, env, cfg, schedule, rng)?;
            }
        }
    }
    Ok(u)
}

/// Truncation-based safety filter: the longest prefix of `u` whose waypoints
/// and connecting segments (starting at the pose) are entirely safe. May be
/// empty.
pub fn safety_filter(u: &ActionSequence, safe_set: &SafeSet<'_>, pose: &Pose) -> ActionSequence {
    let spacing =
        crate::risk::SEGMENT_CHECK_FRACTION * safe_set.map().spec().resolution;
    let polyline = crate::risk::action_polyline(u, pose);
    if !safe_set.is_point_safe(polyline[0]) {
        return ActionSequence::new(vec![]);
    }
    let mut keep = 0usize;
    'outer: for k in 1..polyline.len() {
        let seg = crate::geometry::sample_polyline(&polyline[k - 1..=k], spacing);
        for cp in &seg[1..] {
            if !safe_set.is_point_safe(cp.point) {
                break 'outer;
            }
        }
        keep = k;
    }
    ActionSequence::new(u.waypoints()[..keep].to_vec())
}
