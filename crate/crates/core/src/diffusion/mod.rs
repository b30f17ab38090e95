//! System 1: a diffusion policy over planar waypoint sequences.
//!
//! The policy denoises an action sequence conditioned on a low-dimensional
//! context (relative goal, heading, local risk patch). Training minimizes the
//! usual epsilon-prediction objective with uniformly drawn diffusion times;
//! sampling runs the DDPM reverse chain with an optional guidance hook from
//! [`crate::guidance`].

pub mod net;
pub mod schedule;

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::geometry::{Pose, Vec2};
use crate::guidance::{run_chain, GuidanceEnv, GuidanceError, GuidanceMode};
use crate::risk::RiskMap;
use crate::rng::{master_rng, stream_rng};
use net::{sgd_batch, Adam, Grads, Mlp};
pub use schedule::NoiseSchedule;

/// Waypoints per action sequence (~1.6 m horizon at 0.2 m spacing).
pub const NUM_WAYPOINTS: usize = 8;
/// Flattened action dimension.
pub const ACTION_DIM: usize = 2 * NUM_WAYPOINTS;
/// Sinusoidal timestep embedding width.
pub const EMBED_DIM: usize = 32;
/// Risk patch is PATCH_SIDE x PATCH_SIDE, sampled in the robot frame.
pub const PATCH_SIDE: usize = 5;
/// Spacing between risk patch samples, meters.
pub const PATCH_SPACING: f64 = 0.25;
/// Context features: goal offset (2) + heading sin/cos (2) + risk patch.
pub const CONTEXT_DIM: usize = 4 + PATCH_SIDE * PATCH_SIDE;
/// Hidden width of the denoiser.
pub const HIDDEN_DIM: usize = 128;
/// Goal offsets are scaled by this factor before entering the network.
pub const GOAL_FEATURE_SCALE: f64 = 0.2;

pub const CHECKPOINT_MAGIC: &str = "riskdiff-ckpt";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("diffusion time {t} out of range 0..={max}")]
    BadTimestep { t: usize, max: usize },
    #[error("bad noise schedule: {0}")]
    BadSchedule(String),
    #[error("non-finite loss at optimizer step {step}")]
    NonFiniteLoss { step: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

/// A sequence of robot-frame waypoints in meters. Waypoint `i` is an absolute
/// position, not a delta; the implicit start of the sequence is the robot
/// itself at the origin.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActionSequence {
    waypoints: Vec<Vec2>,
}

impl ActionSequence {
    pub fn new(waypoints: Vec<Vec2>) -> Self {
        Self { waypoints }
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        assert!(flat.len().is_multiple_of(2));
        Self {
            waypoints: flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.waypoints.iter().flat_map(|w| [w[0], w[1]]).collect()
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn waypoints(&self) -> &[Vec2] {
        &self.waypoints
    }

    pub fn waypoints_mut(&mut self) -> &mut [Vec2] {
        &mut self.waypoints
    }

    pub fn is_finite(&self) -> bool {
        self.waypoints
            .iter()
            .all(|w| w[0].is_finite() && w[1].is_finite())
    }
}

/// Conditioning vector: relative goal, heading, and a local window of the
/// risk map. Stands in for the image latent of the full-scale system while
/// preserving the conditioning structure of the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    features: Vec<f64>,
}

impl Context {
    pub fn new(features: Vec<f64>) -> Result<Self, DiffusionError> {
        if features.len() != CONTEXT_DIM {
            return Err(DiffusionError::Dimension(format!(
                "context has {} features, expected {CONTEXT_DIM}",
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::Dimension(
                "non-finite context feature".into(),
            ));
        }
        Ok(Self { features })
    }

    pub fn zeros() -> Self {
        Self {
            features: vec![0.0; CONTEXT_DIM],
        }
    }

    /// Build the context at a pose: goal offset rotated into the robot frame
    /// (scaled), world heading, and a risk patch sampled on a robot-frame
    /// lattice. Patch features are `rho / (2 * gamma)` clamped to `[0, 1]`
    /// (0.5 at the safety threshold); off-grid samples read as 1.
    pub fn build(pose: &Pose, goal: Vec2, risk: &RiskMap) -> Self {
        let mut features = Vec::with_capacity(CONTEXT_DIM);
        let rel = pose.rotate_to_robot([goal[0] - pose.x, goal[1] - pose.y]);
        features.push(rel[0] * GOAL_FEATURE_SCALE);
        features.push(rel[1] * GOAL_FEATURE_SCALE);
        features.push(pose.theta.sin());
        features.push(pose.theta.cos());
        let denom = 2.0 * risk.config().gamma.max(1e-6);
        let half = (PATCH_SIDE / 2) as isize;
        for j in -half..=half {
            for i in -half..=half {
                let offset = [i as f64 * PATCH_SPACING, j as f64 * PATCH_SPACING];
                let world = pose.to_world(offset);
                let feature = if risk.spec().cell_of(world).is_some() {
                    (risk.interp_rho(world).0 / denom).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                features.push(feature);
            }
        }
        Self { features }
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }
}

/// Per-coordinate affine normalization of flattened actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Normalizer {
    /// Fit mean and standard deviation per flattened coordinate. Scales are
    /// floored at 1e-6 so degenerate coordinates stay invertible.
    pub fn fit(actions: &[ActionSequence]) -> Result<Self, DiffusionError> {
        if actions.is_empty() {
            return Err(DiffusionError::EmptyDataset);
        }
        let dim = actions[0].len() * 2;
        let n = actions.len() as f64;
        let mut mean = vec![0.0; dim];
        for a in actions {
            for (i, v) in a.to_flat().iter().enumerate() {
                mean[i] += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for a in actions {
            for (i, v) in a.to_flat().iter().enumerate() {
                var[i] += (v - mean[i]) * (v - mean[i]);
            }
        }
        let scale = var.iter().map(|v| (v / n).sqrt().max(1e-6)).collect();
        Ok(Self { mean, scale })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn from_parts(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self, DiffusionError> {
        if mean.len() != scale.len() {
            return Err(DiffusionError::Dimension(
                "normalizer mean/scale length mismatch".into(),
            ));
        }
        if scale.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(DiffusionError::Dimension(
                "normalizer scale must be positive".into(),
            ));
        }
        Ok(Self { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn normalize_flat(&self, flat: &mut [f64]) {
        for ((v, m), s) in flat.iter_mut().zip(&self.mean).zip(&self.scale) {
            *v = (*v - m) / s;
        }
    }

    pub fn unnormalize_flat(&self, flat: &mut [f64]) {
        for ((v, m), s) in flat.iter_mut().zip(&self.mean).zip(&self.scale) {
            *v = m + *v * s;
        }
    }

    pub fn normalize(&self, u: &ActionSequence) -> ActionSequence {
        let mut flat = u.to_flat();
        self.normalize_flat(&mut flat);
        ActionSequence::from_flat(&flat)
    }

    pub fn unnormalize(&self, u: &ActionSequence) -> ActionSequence {
        let mut flat = u.to_flat();
        self.unnormalize_flat(&mut flat);
        ActionSequence::from_flat(&flat)
    }
}

/// Training corpus: context/action pairs plus the normalization fitted over
/// the full corpus.
#[derive(Debug, Clone)]
pub struct Dataset {
    pairs: Vec<(Context, ActionSequence)>,
    norm: Normalizer,
    n_u: usize,
}

impl Dataset {
    pub fn new(pairs: Vec<(Context, ActionSequence)>) -> Result<Self, DiffusionError> {
        if pairs.is_empty() {
            return Err(DiffusionError::EmptyDataset);
        }
        let n_u = pairs[0].1.len();
        if pairs.iter().any(|(_, a)| a.len() != n_u) {
            return Err(DiffusionError::Dimension(
                "inconsistent action lengths".into(),
            ));
        }
        let actions: Vec<ActionSequence> = pairs.iter().map(|(_, a)| a.clone()).collect();
        let norm = Normalizer::fit(&actions)?;
        Ok(Self { pairs, norm, n_u })
    }

    pub fn pairs(&self) -> &[(Context, ActionSequence)] {
        &self.pairs
    }

    pub fn norm(&self) -> &Normalizer {
        &self.norm
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Sinusoidal embedding of the (integer) diffusion step.
pub fn timestep_embedding(t: usize) -> Vec<f64> {
    let half = EMBED_DIM / 2;
    let mut emb = Vec::with_capacity(EMBED_DIM);
    for i in 0..half {
        let freq = (-(i as f64) * (10_000.0f64).ln() / (half as f64 - 1.0)).exp();
        emb.push((t as f64 * freq).sin());
        emb.push((t as f64 * freq).cos());
    }
    emb
}

/// Denoiser input layout: flattened normalized action, timestep embedding,
/// context features.
pub fn build_input(u_flat: &[f64], t: usize, ctx: &Context) -> Vec<f64> {
    let mut input = Vec::with_capacity(u_flat.len() + EMBED_DIM + CONTEXT_DIM);
    input.extend_from_slice(u_flat);
    input.extend_from_slice(&timestep_embedding(t));
    input.extend_from_slice(ctx.features());
    input
}

/// The trained policy: denoiser weights plus the action normalization they
/// were trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    net: Mlp,
    norm: Normalizer,
    n_u: usize,
}

impl Policy {
    pub fn new(net: Mlp, norm: Normalizer, n_u: usize) -> Result<Self, DiffusionError> {
        let expect_in = 2 * n_u + EMBED_DIM + CONTEXT_DIM;
        if net.in_dim() != expect_in || net.out_dim() != 2 * n_u {
            return Err(DiffusionError::Dimension(format!(
                "network dims {}->{} do not match n_u {n_u}",
                net.in_dim(),
                net.out_dim()
            )));
        }
        if norm.dim() != 2 * n_u {
            return Err(DiffusionError::Dimension(
                "normalizer does not match action dim".into(),
            ));
        }
        Ok(Self { net, norm, n_u })
    }

    /// Policy with an all-zero network (predicts epsilon = 0); test helper.
    pub fn zeros(n_u: usize) -> Self {
        let dims = [
            2 * n_u + EMBED_DIM + CONTEXT_DIM,
            HIDDEN_DIM,
            HIDDEN_DIM,
            HIDDEN_DIM,
            2 * n_u,
        ];
        Self {
            net: Mlp::zeros(&dims),
            norm: Normalizer::identity(2 * n_u),
            n_u,
        }
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn norm(&self) -> &Normalizer {
        &self.norm
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    /// Epsilon prediction in the normalized action space.
    pub fn predict_eps(&self, u_flat: &[f64], t: usize, ctx: &Context) -> Vec<f64> {
        self.net.forward(&build_input(u_flat, t, ctx))
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffusionError> {
        let mut file = std::fs::File::create(path)?;
        self.write(&mut file)
    }

    /// Checkpoint layout: text header `riskdiff-ckpt <version> <n_u>
    /// <layer dims...>`, then per layer row-major f32 weights and f32 biases,
    /// then f64 normalization mean and scale.
    pub fn write(&self, w: &mut dyn Write) -> Result<(), DiffusionError> {
        let dims = self.net.dims();
        let dims_str: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
        writeln!(
            w,
            "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {} {}",
            self.n_u,
            dims_str.join(" ")
        )?;
        let mut bytes = Vec::new();
        for layer in &self.net.layers {
            for v in &layer.weight {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            for v in &layer.bias {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        for v in self.norm.mean().iter().chain(self.norm.scale().iter()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DiffusionError> {
        let mut file = std::fs::File::open(path)?;
        Self::read(&mut file)
    }

    pub fn read(r: &mut dyn Read) -> Result<Self, DiffusionError> {
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        let header_end = raw
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| DiffusionError::Format("missing header".into()))?;
        let header = std::str::from_utf8(&raw[..header_end])
            .map_err(|_| DiffusionError::Format("header not utf-8".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() < 5 || fields[0] != CHECKPOINT_MAGIC {
            return Err(DiffusionError::Format(format!("bad header `{header}`")));
        }
        let version: u32 = fields[1]
            .parse()
            .map_err(|_| DiffusionError::Format("bad version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(DiffusionError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let n_u: usize = fields[2]
            .parse()
            .map_err(|_| DiffusionError::Format("bad n_u".into()))?;
        let dims: Result<Vec<usize>, _> = fields[3..].iter().map(|s| s.parse()).collect();
        let dims = dims.map_err(|_| DiffusionError::Format("bad layer dims".into()))?;
        if dims.len() < 2 {
            return Err(DiffusionError::Format("need at least two dims".into()));
        }

        let mut offset = header_end + 1;
        let take_f32 = |raw: &[u8], offset: &mut usize, n: usize| -> Result<Vec<f64>, DiffusionError> {
            let need = n * 4;
            if *offset + need > raw.len() {
                return Err(DiffusionError::Format("truncated payload".into()));
            }
            let out = raw[*offset..*offset + need]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            *offset += need;
            Ok(out)
        };
        let mut net = Mlp::zeros(&dims);
        for layer in net.layers.iter_mut() {
            layer.weight = take_f32(&raw, &mut offset, layer.weight.len())?;
            layer.bias = take_f32(&raw, &mut offset, layer.bias.len())?;
        }
        let take_f64 = |raw: &[u8], offset: &mut usize, n: usize| -> Result<Vec<f64>, DiffusionError> {
            let need = n * 8;
            if *offset + need > raw.len() {
                return Err(DiffusionError::Format("truncated payload".into()));
            }
            let out = raw[*offset..*offset + need]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            *offset += need;
            Ok(out)
        };
        let mean = take_f64(&raw, &mut offset, 2 * n_u)?;
        let scale = take_f64(&raw, &mut offset, 2 * n_u)?;
        if offset != raw.len() {
            return Err(DiffusionError::Format("trailing bytes".into()));
        }
        if net
            .layers
            .iter()
            .any(|l| l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()))
        {
            return Err(DiffusionError::Format("non-finite weights".into()));
        }
        Self::new(net, Normalizer::from_parts(mean, scale)?, n_u)
    }
}

/// Forward noising: `sqrt(abar_t) * u0 + sqrt(1 - abar_t) * eps`.
pub fn forward_noise(
    u0: &ActionSequence,
    t: usize,
    eps: &ActionSequence,
    schedule: &NoiseSchedule,
) -> Result<ActionSequence, DiffusionError> {
    if t > schedule.t_max() {
        return Err(DiffusionError::BadTimestep {
            t,
            max: schedule.t_max(),
        });
    }
    if eps.len() != u0.len() {
        return Err(DiffusionError::Dimension(
            "eps shape does not match u0".into(),
        ));
    }
    let ab = schedule.alpha_bar(t);
    let a = ab.sqrt();
    let b = (1.0 - ab).sqrt();
    let flat: Vec<f64> = u0
        .to_flat()
        .iter()
        .zip(eps.to_flat().iter())
        .map(|(u, e)| a * u + b * e)
        .collect();
    Ok(ActionSequence::from_flat(&flat))
}

/// DDPM posterior mean: `(u_t - (1 - alpha_t)/sqrt(1 - abar_t) * eps) /
/// sqrt(alpha_t)`.
pub(crate) fn posterior_mean(
    u_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    schedule: &NoiseSchedule,
) -> Vec<f64> {
    let alpha = schedule.alpha(t);
    let ab = schedule.alpha_bar(t);
    let coeff = (1.0 - alpha) / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    u_t.iter()
        .zip(eps_hat.iter())
        .map(|(u, e)| inv_sqrt_alpha * (u - coeff * e))
        .collect()
}

/// One reverse-diffusion update given an epsilon estimate; draws the noise
/// term from `rng` whenever the schedule's sigma is nonzero (all steps except
/// the last).
pub(crate) fn reverse_update(
    u_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let sigma = schedule.sigma(t);
    let mut out = posterior_mean(u_t, t, eps_hat, schedule);
    if sigma > 0.0 {
        for v in out.iter_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

/// One unguided DDPM reverse step in the normalized action space.
pub fn ddpm_step(
    u_t: &ActionSequence,
    t: usize,
    policy: &Policy,
    ctx: &Context,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<ActionSequence, DiffusionError> {
    if t == 0 || t > schedule.t_max() {
        return Err(DiffusionError::BadTimestep {
            t,
            max: schedule.t_max(),
        });
    }
    let flat = u_t.to_flat();
    let eps = policy.predict_eps(&flat, t, ctx);
    Ok(ActionSequence::from_flat(&reverse_update(
        &flat, t, &eps, schedule, rng,
    )))
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Trained policy plus the per-epoch loss trace.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub policy: Policy,
    pub loss_trace: Vec<f64>,
}

/// Minimize the epsilon-prediction objective over the dataset.
///
/// Per sample, a diffusion time is drawn uniformly from `1..=T` and fresh
/// Gaussian noise is injected with [`forward_noise`]; the network regresses
/// the noise. Deterministic for a fixed config seed (single-threaded, fixed
/// batch order).
pub fn train(
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<TrainRun, DiffusionError> {
    if dataset.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    let n_u = dataset.n_u();
    let action_dim = 2 * n_u;
    let dims = [
        action_dim + EMBED_DIM + CONTEXT_DIM,
        HIDDEN_DIM,
        HIDDEN_DIM,
        HIDDEN_DIM,
        action_dim,
    ];
    let mut rng = master_rng(config.seed);
    let mut net = Mlp::init(&dims, &mut rng);
    let mut adam = Adam::new(&net, config.learning_rate);
    let mut grads = Grads::zeros_like(&net);

    // Pre-normalize all actions once.
    let normalized: Vec<(usize, Vec<f64>)> = dataset
        .pairs()
        .iter()
        .enumerate()
        .map(|(i, (_, a))| (i, dataset.norm().normalize(a).to_flat()))
        .collect();

    let t_max = schedule.t_max();
    let mut order: Vec<usize> = (0..normalized.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for _epoch in 0..config.epochs {
        // Fisher-Yates shuffle from the training stream.
        for i in (1..order.len()).rev() {
            let j = (rng.random::<u64>() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let (pair_idx, u0) = &normalized[idx];
                let ctx = &dataset.pairs()[*pair_idx].0;
                let t = 1 + (rng.random::<u64>() % t_max as u64) as usize;
                let eps: Vec<f64> = (0..action_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let ab = schedule.alpha_bar(t);
                let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
                let u_t: Vec<f64> = u0
                    .iter()
                    .zip(eps.iter())
                    .map(|(u, e)| sa * u + sb * e)
                    .collect();
                batch.push((build_input(&u_t, t, ctx), eps));
            }
            let loss = sgd_batch(&mut net, &mut adam, &mut grads, &batch);
            step += 1;
            if !loss.is_finite() {
                return Err(DiffusionError::NonFiniteLoss { step });
            }
            epoch_loss += loss;
            batches += 1;
        }
        loss_trace.push(epoch_loss / batches as f64);
    }

    let policy = Policy::new(net, dataset.norm().clone(), n_u)?;
    Ok(TrainRun { policy, loss_trace })
}

/// Sample a batch of action sequences by running the reverse chain with the
/// selected guidance. Outputs are unnormalized to meters. Batch elements use
/// independent RNG streams derived from `(seed, element index)` and may run
/// in parallel.
pub fn sample(
    policy: &Policy,
    ctx: &Context,
    schedule: &NoiseSchedule,
    guidance: &GuidanceMode,
    env: Option<&GuidanceEnv<'_>>,
    seed: u64,
    batch: usize,
) -> Result<Vec<ActionSequence>, GuidanceError> {
    let run_one = |element: usize| -> Result<ActionSequence, GuidanceError> {
        let mut rng = stream_rng(seed, element as u64);
        let flat = run_chain(policy, ctx, schedule, guidance, env, &mut rng)?;
        let mut out = flat;
        policy.norm().unnormalize_flat(&mut out);
        Ok(ActionSequence::from_flat(&out))
    };
    if batch <= 1 {
        (0..batch).map(run_one).collect()
    } else {
        (0..batch).into_par_iter().map(run_one).collect()
    }
}
