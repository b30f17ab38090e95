//! Closed-loop episode runner and Goal-Success / Safety-Failure metrics.
//!
//! Each control cycle samples a batch of candidate action sequences with the
//! method under test, picks the candidate whose final waypoint is nearest the
//! goal (among safe candidates, for methods that have safety information),
//! and executes a fixed number of waypoints with an ideal tracking model.
//! Safety accounting happens on the executed path only: sampling an unsafe
//! candidate is not a failure, stepping into an unsafe cell is.

use std::fmt;

use rayon::prelude::*;

use crate::diffusion::{self, ActionSequence, Context, NoiseSchedule, Policy};
use crate::expert::{plan_path, ExpertError};
use crate::geometry::{dist, Pose, Vec2};
use crate::guidance::{safety_filter, GuidanceEnv, GuidanceError, GuidanceMode, ProjectionConfig};
use crate::kv::{KvError, KvFile};
use crate::risk::{build_risk_map, CostParams, RiskConfig, RiskError, RiskMap, SafeSet};
use crate::rng::{derive_seed, stream_rng};
use crate::terrain::{generate_terrain, RecipeFamily, TerrainError, TerrainRecipe};

use rand::Rng;

/// Salt deriving the evaluation risk-map seed from a recipe seed, shared by
/// the suite builder and the episode runner so both see the same map.
pub(crate) const EVAL_MAP_SEED_SALT: u64 = 0x0715;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("start pose is unsafe under the evaluation risk map")]
    UnsafeStart,
    #[error("invalid episode config: {0}")]
    BadConfig(String),
    #[error("suite produced no valid episodes")]
    EmptySuite,
    #[error(transparent)]
    Terrain(#[from] TerrainError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything needed to run one episode deterministically.
#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub recipe: TerrainRecipe,
    pub cost: CostParams,
    pub start: Pose,
    pub goal: Vec2,
    /// Goal tolerance, meters.
    pub goal_tolerance: f64,
    pub max_cycles: usize,
    /// Waypoints executed per control cycle.
    pub replan_horizon: usize,
    /// Candidate sequences sampled per cycle.
    pub candidates: usize,
    pub seed: u64,
}

impl EpisodeConfig {
    pub fn validate(&self, n_u: usize) -> Result<(), SimError> {
        if !self.goal_tolerance.is_finite() || self.goal_tolerance <= 0.0 {
            return Err(SimError::BadConfig("goal_tolerance must be > 0".into()));
        }
        if self.max_cycles == 0 {
            return Err(SimError::BadConfig("max_cycles must be >= 1".into()));
        }
        if self.replan_horizon == 0 || self.replan_horizon > n_u {
            return Err(SimError::BadConfig(format!(
                "replan_horizon must be in 1..={n_u}"
            )));
        }
        if self.candidates == 0 {
            return Err(SimError::BadConfig("candidates must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeOutcome {
    GoalSuccess,
    SafetyFailure,
    Timeout,
}

impl EpisodeOutcome {
    pub fn name(&self) -> &'static str {
        match self {
            EpisodeOutcome::GoalSuccess => "goal_success",
            EpisodeOutcome::SafetyFailure => "safety_failure",
            EpisodeOutcome::Timeout => "timeout",
        }
    }
}

impl fmt::Display for EpisodeOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub outcome: EpisodeOutcome,
    /// Executed poses, including the start pose.
    pub trajectory: Vec<Pose>,
    /// Action chosen each cycle.
    pub chosen: Vec<ActionSequence>,
    pub cycles: usize,
    /// Total executed path length, meters.
    pub path_length: f64,
}

/// Evaluation methods compared by the experiment harness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMethod {
    /// Unguided policy, safety-blind candidate selection.
    Vanilla,
    /// Classifier-style risk guidance.
    Classifier { eta: f64 },
    /// Unguided policy with post-hoc truncation.
    Filter,
    /// Projection-guided sampling.
    Projection(ProjectionConfig),
}

impl EvalMethod {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMethod::Vanilla => "vanilla",
            EvalMethod::Classifier { .. } => "classifier",
            EvalMethod::Filter => "filter",
            EvalMethod::Projection(_) => "projection",
        }
    }

    fn sampling_mode(&self) -> GuidanceMode {
        match self {
            EvalMethod::Vanilla | EvalMethod::Filter => GuidanceMode::Unguided,
            EvalMethod::Classifier { eta } => GuidanceMode::Classifier { eta: *eta },
            EvalMethod::Projection(cfg) => GuidanceMode::Projection(*cfg),
        }
    }

    /// Whether candidate selection may use the safe set.
    fn safety_aware(&self) -> bool {
        !matches!(self, EvalMethod::Vanilla)
    }
}

/// Nearest-final-waypoint-to-goal selection; safety-aware methods restrict to
/// safe candidates when any exist. Ties break to the lowest index.
fn select_candidate(
    candidates: &[ActionSequence],
    pose: &Pose,
    goal: Vec2,
    safe_set: &SafeSet<'_>,
    safety_aware: bool,
) -> usize {
    let score = |c: &ActionSequence| -> f64 {
        let last = c
            .waypoints()
            .last()
            .map(|w| pose.to_world(*w))
            .unwrap_or_else(|| pose.position());
        dist(last, goal)
    };
    let mut best = 0usize;
    let mut best_score = f64::INFINITY;
    let mut best_safe = false;
    for (i, c) in candidates.iter().enumerate() {
        let s = score(c);
        let is_safe = safety_aware && safe_set.is_safe(c, pose);
        let better = if is_safe == best_safe {
            s < best_score
        } else {
            // Safe candidates dominate unsafe ones.
            is_safe
        };
        if better {
            best = i;
            best_score = s;
            best_safe = is_safe;
        }
    }
    best
}

/// Run one closed-loop episode. Deterministic for a fixed config.
pub fn run_episode(
    config: &EpisodeConfig,
    policy: &Policy,
    schedule: &NoiseSchedule,
    method: &EvalMethod,
    risk_config: &RiskConfig,
) -> Result<EpisodeResult, SimError> {
    config.validate(policy.n_u())?;
    let belief = generate_terrain(&config.recipe)?;
    let map = build_risk_map(
        &belief,
        &config.cost,
        risk_config,
        derive_seed(config.recipe.seed, EVAL_MAP_SEED_SALT),
    )?;
    let safe = map.safe_set();
    let mut pose = config.start;
    if !safe.is_point_safe(pose.position()) {
        return Err(SimError::UnsafeStart);
    }

    let mut trajectory = vec![pose];
    let mut chosen = Vec::new();
    let mut path_length = 0.0f64;
    let step_len = 0.5 * map.spec().resolution;

    if dist(pose.position(), config.goal) <= config.goal_tolerance {
        return Ok(EpisodeResult {
            outcome: EpisodeOutcome::GoalSuccess,
            trajectory,
            chosen,
            cycles: 0,
            path_length,
        });
    }

    for cycle in 0..config.max_cycles {
        let ctx = Context::build(&pose, config.goal, &map);
        let env = GuidanceEnv::new(&map, pose);
        let cycle_seed = derive_seed(config.seed, cycle as u64);
        let mut candidates = diffusion::sample(
            policy,
            &ctx,
            schedule,
            &method.sampling_mode(),
            Some(&env),
            cycle_seed,
            config.candidates,
        )?;
        if matches!(method, EvalMethod::Filter) {
            for c in candidates.iter_mut() {
                *c = safety_filter(c, &safe, &pose);
            }
        }
        let pick = select_candidate(&candidates, &pose, config.goal, &safe, method.safety_aware());
        let action = candidates[pick].clone();
        chosen.push(action.clone());

        // Ideal waypoint tracking: walk the world-frame polyline of the first
        // `replan_horizon` waypoints in sub-cell steps.
        let horizon = config.replan_horizon.min(action.len());
        let mut targets = Vec::with_capacity(horizon + 1);
        targets.push(pose.position());
        for k in 0..horizon {
            targets.push(pose.to_world(action.waypoints()[k]));
        }
        for seg in 1..targets.len() {
            let a = targets[seg - 1];
            let b = targets[seg];
            let len = dist(a, b);
            if len == 0.0 {
                continue;
            }
            let heading = (b[1] - a[1]).atan2(b[0] - a[0]);
            let n = (len / step_len).ceil() as usize;
            for i in 1..=n {
                let t = i as f64 / n as f64;
                let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                path_length += len / n as f64;
                pose = Pose::new(p[0], p[1], heading);
                trajectory.push(pose);
                if !safe.is_point_safe(p) {
                    return Ok(EpisodeResult {
                        outcome: EpisodeOutcome::SafetyFailure,
                        trajectory,
                        chosen,
                        cycles: cycle + 1,
                        path_length,
                    });
                }
                if dist(p, config.goal) <= config.goal_tolerance {
                    return Ok(EpisodeResult {
                        outcome: EpisodeOutcome::GoalSuccess,
                        trajectory,
                        chosen,
                        cycles: cycle + 1,
                        path_length,
                    });
                }
            }
        }
    }

    Ok(EpisodeResult {
        outcome: EpisodeOutcome::Timeout,
        trajectory,
        chosen,
        cycles: config.max_cycles,
        path_length,
    })
}

#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub method: String,
    pub outcome: EpisodeOutcome,
    pub cycles: usize,
    pub path_length: f64,
}

#[derive(Debug, Clone)]
pub struct MethodSummary {
    pub method: String,
    pub episodes: usize,
    pub goal_success: usize,
    pub safety_failure: usize,
    pub timeout: usize,
}

impl MethodSummary {
    pub fn gs_rate(&self) -> f64 {
        100.0 * self.goal_success as f64 / self.episodes as f64
    }

    pub fn sf_rate(&self) -> f64 {
        100.0 * self.safety_failure as f64 / self.episodes as f64
    }

    pub fn timeout_rate(&self) -> f64 {
        100.0 * self.timeout as f64 / self.episodes as f64
    }
}

/// Aggregated evaluation output: per-method rates plus the per-episode rows
/// behind them.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<EpisodeRecord>,
}

impl MetricsReport {
    pub fn summary_for(&self, method: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn per_episode_csv(&self) -> String {
        let mut out = String::from("episode,method,outcome,cycles,path_length\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                r.episode, r.method, r.outcome, r.cycles, r.path_length
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,episodes,gs_rate,sf_rate,timeout_rate\n");
        for s in &self.summaries {
            out.push_str(&format!(
                "{},{},{:.2},{:.2},{:.2}\n",
                s.method,
                s.episodes,
                s.gs_rate(),
                s.sf_rate(),
                s.timeout_rate()
            ));
        }
        out
    }

    /// Human-readable results table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8} {:>9}\n",
            "method", "episodes", "GS %", "SF %", "timeout %"
        ));
        for s in &self.summaries {
            out.push_str(&format!(
                "{:<12} {:>8} {:>8.2} {:>8.2} {:>9.2}\n",
                s.method,
                s.episodes,
                s.gs_rate(),
                s.sf_rate(),
                s.timeout_rate()
            ));
        }
        out
    }
}

/// Run every (method, episode) pair. Episode seeds are part of the configs,
/// so every method sees identical episodes. Pairs run in parallel; the
/// report ordering is by (method, episode) regardless of scheduling.
pub fn evaluate(
    policy: &Policy,
    schedule: &NoiseSchedule,
    methods: &[EvalMethod],
    suite: &[EpisodeConfig],
    risk_config: &RiskConfig,
) -> Result<MetricsReport, SimError> {
    if suite.is_empty() || methods.is_empty() {
        return Err(SimError::EmptySuite);
    }
    let tasks: Vec<(usize, usize)> = (0..methods.len())
        .flat_map(|m| (0..suite.len()).map(move |e| (m, e)))
        .collect();
    let results: Result<Vec<EpisodeRecord>, SimError> = tasks
        .par_iter()
        .map(|&(m, e)| {
            let r = run_episode(&suite[e], policy, schedule, &methods[m], risk_config)?;
            Ok(EpisodeRecord {
                episode: e,
                method: methods[m].name().to_string(),
                outcome: r.outcome,
                cycles: r.cycles,
                path_length: r.path_length,
            })
        })
        .collect();
    let records = results?;

    let mut summaries = Vec::with_capacity(methods.len());
    for method in methods {
        let name = method.name();
        let rows: Vec<&EpisodeRecord> = records.iter().filter(|r| r.method == name).collect();
        summaries.push(MethodSummary {
            method: name.to_string(),
            episodes: rows.len(),
            goal_success: rows
                .iter()
                .filter(|r| r.outcome == EpisodeOutcome::GoalSuccess)
                .count(),
            safety_failure: rows
                .iter()
                .filter(|r| r.outcome == EpisodeOutcome::SafetyFailure)
                .count(),
            timeout: rows
                .iter()
                .filter(|r| r.outcome == EpisodeOutcome::Timeout)
                .count(),
        });
    }
    Ok(MetricsReport { summaries, records })
}

/// Declarative evaluation suite: a terrain family plus episode settings.
/// Start/goal pairs are drawn deterministically per episode index, keeping
/// only pairs with a safe connecting corridor under the evaluation map.
#[derive(Debug, Clone)]
pub struct SuiteSpec {
    pub family: RecipeFamily,
    pub episodes: usize,
    pub cost: CostParams,
    pub risk: RiskConfig,
    pub goal_tolerance: f64,
    pub max_cycles: usize,
    pub replan_horizon: usize,
    pub candidates: usize,
    pub min_separation: f64,
    pub seed: u64,
}

impl SuiteSpec {
    const KEYS: &'static [&'static str] = &[
        "schema_version",
        "episodes",
        "goal_tolerance",
        "max_cycles",
        "replan_horizon",
        "candidates",
        "min_separation",
        "suite_seed",
        "alpha",
        "gamma",
        "mc_samples",
        "slope_weight",
        "step_weight",
        "slope_critical",
        "step_critical",
        "footprint_radius",
        // RecipeFamily keys live in the same file.
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

    pub fn from_kv(kv: &KvFile) -> Result<Self, SimError> {
        kv.check_known_keys(Self::KEYS)?;
        let version: u32 = kv.parse_value("schema_version")?;
        if version != 1 {
            return Err(SimError::BadConfig(format!(
                "unsupported suite schema_version {version}"
            )));
        }
        let family = RecipeFamily::from_kv(&strip_suite_keys(kv))?;
        Ok(Self {
            family,
            episodes: kv.parse_value("episodes")?,
            cost: CostParams {
                slope_weight: kv.parse_or("slope_weight", 1.0)?,
                step_weight: kv.parse_or("step_weight", 1.0)?,
                slope_critical: kv.parse_or("slope_critical", 0.35)?,
                step_critical: kv.parse_or("step_critical", 0.15)?,
                footprint_radius: kv.parse_or("footprint_radius", 0.15)?,
            },
            risk: RiskConfig {
                alpha: kv.parse_or("alpha", 0.9)?,
                gamma: kv.parse_or("gamma", 0.5)?,
                mc_samples: kv.parse_or("mc_samples", 30)?,
            },
            goal_tolerance: kv.parse_or("goal_tolerance", 0.3)?,
            max_cycles: kv.parse_or("max_cycles", 60)?,
            replan_horizon: kv.parse_or("replan_horizon", 4)?,
            candidates: kv.parse_or("candidates", 16)?,
            min_separation: kv.parse_or("min_separation", 2.5)?,
            seed: kv.parse_or("suite_seed", 0u64)?,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SimError> {
        Self::from_kv(&KvFile::load(path)?)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = self.family.to_kv();
        kv.push("episodes", self.episodes);
        kv.push("goal_tolerance", self.goal_tolerance);
        kv.push("max_cycles", self.max_cycles);
        kv.push("replan_horizon", self.replan_horizon);
        kv.push("candidates", self.candidates);
        kv.push("min_separation", self.min_separation);
        kv.push("suite_seed", self.seed);
        kv.push("alpha", self.risk.alpha);
        kv.push("gamma", self.risk.gamma);
        kv.push("mc_samples", self.risk.mc_samples);
        kv.push("slope_weight", self.cost.slope_weight);
        kv.push("step_weight", self.cost.step_weight);
        kv.push("slope_critical", self.cost.slope_critical);
        kv.push("step_critical", self.cost.step_critical);
        kv.push("footprint_radius", self.cost.footprint_radius);
        kv
    }

    /// Materialize episode configs. Recipe indices advance until enough
    /// valid episodes exist (safe, separated, connected start/goal) or the
    /// index budget runs out.
    pub fn build_configs(&self) -> Result<Vec<EpisodeConfig>, SimError> {
        let mut configs = Vec::with_capacity(self.episodes);
        let budget = (self.episodes as u64) * 10 + 20;
        let mut index = 0u64;
        while configs.len() < self.episodes && index < budget {
            let recipe = self.family.recipe(index);
            index += 1;
            let belief = generate_terrain(&recipe)?;
            let map = build_risk_map(
                &belief,
                &self.cost,
                &self.risk,
                derive_seed(recipe.seed, EVAL_MAP_SEED_SALT),
            )?;
            if let Some((start, goal)) = draw_endpoints(&map, &recipe, self.min_separation) {
                configs.push(EpisodeConfig {
                    recipe,
                    cost: self.cost,
                    start,
                    goal,
                    goal_tolerance: self.goal_tolerance,
                    max_cycles: self.max_cycles,
                    replan_horizon: self.replan_horizon,
                    candidates: self.candidates,
                    seed: derive_seed(self.seed, index),
                });
            }
        }
        if configs.is_empty() {
            return Err(SimError::EmptySuite);
        }
        Ok(configs)
    }
}

fn strip_suite_keys(kv: &KvFile) -> KvFile {
    let family_keys = [
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
    let mut out = KvFile::new();
    for (k, v) in kv.iter() {
        if family_keys.contains(&k) {
            out.push(k, v);
        }
    }
    out
}

/// Draw a safe, separated, connected start/goal pair on the map, or None.
fn draw_endpoints(map: &RiskMap, recipe: &TerrainRecipe, min_separation: f64) -> Option<(Pose, Vec2)> {
    let spec = map.spec();
    let safe = map.safe_set();
    let safe_cells: Vec<(usize, usize)> = (0..spec.cells())
        .map(|i| (i % spec.width, i / spec.width))
        .filter(|&(ix, iy)| safe.is_cell_safe(ix, iy))
        .collect();
    if safe_cells.len() < 2 {
        return None;
    }
    let mut rng = stream_rng(recipe.seed, 0xe9d5);
    for _ in 0..40 {
        let a = safe_cells[(rng.random::<u64>() % safe_cells.len() as u64) as usize];
        let b = safe_cells[(rng.random::<u64>() % safe_cells.len() as u64) as usize];
        let start = spec.cell_center(a.0, a.1);
        let goal = spec.cell_center(b.0, b.1);
        if dist(start, goal) < min_separation {
            continue;
        }
        if plan_path(map, map.config().gamma, start, goal).is_ok() {
            let heading = (goal[1] - start[1]).atan2(goal[0] - start[0]);
            return Some((Pose::new(start[0], start[1], heading), goal));
        }
    }
    None
}
