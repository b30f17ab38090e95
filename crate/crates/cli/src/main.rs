//! `riskdiff`: data generation, training, sampling, evaluation, and the 1-D
//! guidance demo behind one binary.
//!
//! Every command resolves its settings as defaults < config file < flags,
//! writes the fully resolved configuration plus a content hash into a
//! `run.kv` manifest next to its outputs, and fails with a single-line
//! `error: ...` on stderr.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context as _};
use clap::{Parser, Subcommand};

use riskdiff_core::diffusion::{
    sample, train, Dataset, NoiseSchedule, Policy, TrainConfig, NUM_WAYPOINTS,
};
use riskdiff_core::expert::{self, DemoGenConfig};
use riskdiff_core::guidance::{GuidanceEnv, GuidanceMode, ProjectionConfig};
use riskdiff_core::kv::{content_hash, KvFile};
use riskdiff_core::oned::{emit_demo_report, langevin_run, DemoRun, LangevinConfig, OneDTarget};
use riskdiff_core::risk::{build_risk_map, CostParams, RiskConfig};
use riskdiff_core::sim::{evaluate, EvalMethod, SuiteSpec};
use riskdiff_core::terrain::{generate_terrain, ElevationBelief, RecipeFamily, TerrainRecipe};
use riskdiff_core::{Context, Pose};

const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Every key a config file may carry, across all subcommands.
const CONFIG_KEYS: &[&str] = &[
    "schema_version",
    "seed",
    "workers",
    "episodes",
    "n_u",
    "stride",
    "epochs",
    "batch_size",
    "learning_rate",
    "alpha",
    "gamma",
    "mc_samples",
    "eta",
    "t1",
    "t2",
    "beta_mix",
    "batch",
    "candidates",
    "methods",
    "eta_sweep",
    "samples",
];

#[derive(Parser)]
#[command(
    name = "riskdiff",
    version,
    about = "Risk-guided diffusion navigation: train, sample, evaluate"
)]
struct Cli {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel sections (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Flat key=value config file; explicit flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a demonstration dataset from a terrain recipe family.
    GenData {
        /// Recipe family file.
        #[arg(long)]
        recipes: PathBuf,
        /// Number of episodes to generate.
        #[arg(long)]
        episodes: Option<usize>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Window stride along each demonstration.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Train the diffusion policy on a dataset directory.
    Train {
        /// Dataset directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Sample action sequences from a trained policy on a terrain.
    Sample {
        /// Checkpoint from train.
        #[arg(long)]
        ckpt: PathBuf,
        /// Terrain: a .grid belief or a recipe file.
        #[arg(long)]
        terrain: PathBuf,
        /// Guidance mode: none, classifier, projection.
        #[arg(long)]
        guidance: String,
        /// Classifier guidance weight.
        #[arg(long)]
        eta: Option<f64>,
        /// Projection phase boundary t1 (steps).
        #[arg(long)]
        t1: Option<usize>,
        /// Projection phase boundary t2 (steps).
        #[arg(long)]
        t2: Option<usize>,
        /// Projection mixing coefficient in (0, 1).
        #[arg(long)]
        beta_mix: Option<f64>,
        /// Robot pose "x,y,theta".
        #[arg(long)]
        pose: String,
        /// Goal position "x,y".
        #[arg(long)]
        goal: String,
        /// Batch size.
        #[arg(long)]
        batch: Option<usize>,
        /// CVaR level for the risk map.
        #[arg(long)]
        alpha: Option<f64>,
        /// Risk tolerance threshold.
        #[arg(long)]
        gamma: Option<f64>,
        /// Monte-Carlo draws per cell.
        #[arg(long)]
        mc_samples: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate methods over an episode suite.
    Eval {
        /// Suite specification file.
        #[arg(long)]
        suite: PathBuf,
        /// Checkpoint from train.
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated methods: vanilla, classifier, filter, projection.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        t1: Option<usize>,
        #[arg(long)]
        t2: Option<usize>,
        #[arg(long)]
        beta_mix: Option<f64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the 1-D Langevin guidance comparison.
    Demo1d {
        /// Comma-separated classifier weights.
        #[arg(long)]
        eta_sweep: Option<String>,
        /// Chains per run.
        #[arg(long)]
        samples: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a CVaR risk map from a terrain and write it as a .grid file.
    Riskmap {
        /// Terrain: a .grid belief or a recipe file.
        #[arg(long)]
        terrain: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        mc_samples: Option<usize>,
        /// Output .grid path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Settings shared by every command after merging the config file.
struct Resolved {
    seed: u64,
    file: KvFile,
}

impl Resolved {
    fn get<T: std::str::FromStr>(&self, key: &str, flag: Option<T>, default: T) -> anyhow::Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.file.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| anyhow!("config key `{key}`: cannot parse `{raw}`")),
            None => Ok(default),
        }
    }
}

fn resolve(cli_seed: Option<u64>, workers: Option<usize>, config: &Option<PathBuf>) -> anyhow::Result<Resolved> {
    let file = match config {
        Some(path) => {
            let kv = KvFile::load(path).with_context(|| format!("reading {}", path.display()))?;
            kv.check_known_keys(CONFIG_KEYS)?;
            let version: u32 = kv.parse_value("schema_version")?;
            if version != CONFIG_SCHEMA_VERSION {
                bail!("unsupported config schema_version {version}");
            }
            kv
        }
        None => KvFile::new(),
    };
    let resolved = Resolved {
        seed: 0,
        file,
    };
    let seed = resolved.get("seed", cli_seed, 0u64)?;
    let workers = resolved.get("workers", workers, 0usize)?;
    if workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .context("initializing worker pool")?;
    }
    Ok(Resolved { seed, ..resolved })
}

/// Write the resolved run description (command, settings, hash, versions)
/// into `dir/run.kv`.
fn write_manifest(dir: &Path, command: &str, settings: &[(&str, String)], seed: u64) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut kv = KvFile::new();
    kv.push("schema_version", CONFIG_SCHEMA_VERSION);
    kv.push("command", command);
    kv.push("seed", seed);
    for (k, v) in settings {
        kv.push(k, v);
    }
    kv.push("riskdiff_version", env!("CARGO_PKG_VERSION"));
    kv.push("grid_format", riskdiff_core::terrain::GRID_FORMAT_VERSION);
    kv.push(
        "checkpoint_format",
        riskdiff_core::diffusion::CHECKPOINT_VERSION,
    );
    let hash = content_hash(&kv.render());
    kv.push("config_hash", hash);
    kv.save(&dir.join("run.kv"))
        .map_err(|e| anyhow!("writing manifest: {e}"))?;
    Ok(())
}

/// Load a terrain argument: `.grid` belief file or a recipe file.
fn load_terrain(path: &Path) -> anyhow::Result<ElevationBelief> {
    if path.extension().map(|e| e == "grid").unwrap_or(false) {
        return Ok(ElevationBelief::load(path)?);
    }
    let recipe = TerrainRecipe::load(path)
        .with_context(|| format!("parsing terrain recipe {}", path.display()))?;
    Ok(generate_terrain(&recipe)?)
}

fn parse_pose(raw: &str) -> anyhow::Result<Pose> {
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 3 {
        bail!("pose must be `x,y,theta`, got `{raw}`");
    }
    let nums: Result<Vec<f64>, _> = parts.iter().map(|s| s.trim().parse()).collect();
    let nums = nums.map_err(|_| anyhow!("pose must be numeric, got `{raw}`"))?;
    Ok(Pose::new(nums[0], nums[1], nums[2]))
}

fn parse_point(raw: &str) -> anyhow::Result<[f64; 2]> {
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 2 {
        bail!("point must be `x,y`, got `{raw}`");
    }
    let nums: Result<Vec<f64>, _> = parts.iter().map(|s| s.trim().parse()).collect();
    let nums = nums.map_err(|_| anyhow!("point must be numeric, got `{raw}`"))?;
    Ok([nums[0], nums[1]])
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let resolved = resolve(cli.seed, cli.workers, &cli.config)?;
    let seed = resolved.seed;
    let schedule = NoiseSchedule::default_schedule();

    match cli.command {
        Command::GenData {
            recipes,
            episodes,
            out,
            stride,
        } => {
            let episodes = resolved.get("episodes", episodes, 200usize)?;
            let stride = resolved.get("stride", stride, 2usize)?;
            let family = RecipeFamily::load(&recipes)
                .with_context(|| format!("parsing recipe family {}", recipes.display()))?;
            let gen = DemoGenConfig::default();
            let mut per_episode = Vec::new();
            let mut all = Vec::new();
            let mut index = 0u64;
            let budget = episodes as u64 * 10 + 20;
            while per_episode.len() < episodes && index < budget {
                if let Some(ep) = expert::generate_demo_episode(&family, index, &gen)? {
                    let pairs = expert::episode_pairs(&ep, NUM_WAYPOINTS, stride);
                    if !pairs.is_empty() {
                        all.extend(pairs.iter().cloned());
                        per_episode.push(pairs);
                    }
                }
                index += 1;
            }
            if per_episode.is_empty() {
                bail!("recipe family produced no usable episodes");
            }
            let dataset = Dataset::new(all)?;
            expert::save_dataset_dir(&out, &per_episode, &dataset)?;
            write_manifest(
                &out,
                "gen-data",
                &[
                    ("recipes", recipes.display().to_string()),
                    ("episodes", per_episode.len().to_string()),
                    ("stride", stride.to_string()),
                    ("pairs", dataset.len().to_string()),
                ],
                seed,
            )?;
            println!(
                "wrote {} episodes ({} pairs) to {}",
                per_episode.len(),
                dataset.len(),
                out.display()
            );
        }

        Command::Train {
            data,
            out,
            epochs,
            batch_size,
            learning_rate,
        } => {
            let config = TrainConfig {
                epochs: resolved.get("epochs", epochs, 60usize)?,
                batch_size: resolved.get("batch_size", batch_size, 32usize)?,
                learning_rate: resolved.get("learning_rate", learning_rate, 1e-3)?,
                seed,
            };
            let dataset = expert::load_dataset_dir(&data)?;
            let run = train(&dataset, &schedule, &config)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            run.policy.save(&out)?;
            let dir = out.parent().unwrap_or(Path::new("."));
            write_manifest(
                dir,
                "train",
                &[
                    ("data", data.display().to_string()),
                    ("ckpt", out.display().to_string()),
                    ("epochs", config.epochs.to_string()),
                    ("batch_size", config.batch_size.to_string()),
                    ("learning_rate", config.learning_rate.to_string()),
                    ("pairs", dataset.len().to_string()),
                    (
                        "final_loss",
                        format!("{:.6}", run.loss_trace.last().unwrap()),
                    ),
                ],
                seed,
            )?;
            println!(
                "trained on {} pairs; loss {:.4} -> {:.4}; checkpoint {}",
                dataset.len(),
                run.loss_trace.first().unwrap(),
                run.loss_trace.last().unwrap(),
                out.display()
            );
        }

        Command::Sample {
            ckpt,
            terrain,
            guidance,
            eta,
            t1,
            t2,
            beta_mix,
            pose,
            goal,
            batch,
            alpha,
            gamma,
            mc_samples,
            out,
        } => {
            let policy = Policy::load(&ckpt)?;
            let belief = load_terrain(&terrain)?;
            let risk_config = RiskConfig {
                alpha: resolved.get("alpha", alpha, 0.9)?,
                gamma: resolved.get("gamma", gamma, 0.5)?,
                mc_samples: resolved.get("mc_samples", mc_samples, 30usize)?,
            };
            let map = build_risk_map(&belief, &CostParams::default(), &risk_config, seed)?;
            let pose = parse_pose(&pose)?;
            let goal = parse_point(&goal)?;
            let batch = resolved.get("batch", batch, 16usize)?;
            let mode = parse_guidance(
                &guidance,
                resolved.get("eta", eta, 10.0)?,
                ProjectionConfig {
                    t1: resolved.get("t1", t1, schedule.t_max() / 5)?,
                    t2: resolved.get("t2", t2, 3 * schedule.t_max() / 5)?,
                    beta_mix: resolved.get("beta_mix", beta_mix, 0.5)?,
                    max_rejections: 20,
                    max_projections: 50,
                },
            )?;
            let ctx = Context::build(&pose, goal, &map);
            let env = GuidanceEnv::new(&map, pose);
            let sequences = sample(&policy, &ctx, &schedule, &mode, Some(&env), seed, batch)?;

            std::fs::create_dir_all(&out)?;
            let mut csv = String::from("sample,waypoint,x,y,safe\n");
            let safe_set = map.safe_set();
            for (si, s) in sequences.iter().enumerate() {
                let safe = safe_set.is_safe(s, &pose);
                for (wi, w) in s.waypoints().iter().enumerate() {
                    let world = pose.to_world(*w);
                    csv.push_str(&format!(
                        "{si},{wi},{:.6},{:.6},{}\n",
                        world[0], world[1], safe as u8
                    ));
                }
            }
            std::fs::write(out.join("samples.csv"), csv)?;
            write_manifest(
                &out,
                "sample",
                &[
                    ("ckpt", ckpt.display().to_string()),
                    ("terrain", terrain.display().to_string()),
                    ("guidance", guidance.clone()),
                    ("batch", batch.to_string()),
                ],
                seed,
            )?;
            println!(
                "wrote {} sequences to {}",
                sequences.len(),
                out.join("samples.csv").display()
            );
        }

        Command::Eval {
            suite,
            ckpt,
            methods,
            eta,
            t1,
            t2,
            beta_mix,
            out,
        } => {
            let policy = Policy::load(&ckpt)?;
            let spec = SuiteSpec::load(&suite)?;
            let eta = resolved.get("eta", eta, 10.0)?;
            let projection = ProjectionConfig {
                t1: resolved.get("t1", t1, schedule.t_max() / 5)?,
                t2: resolved.get("t2", t2, 3 * schedule.t_max() / 5)?,
                beta_mix: resolved.get("beta_mix", beta_mix, 0.5)?,
                max_rejections: 20,
                max_projections: 50,
            };
            let methods_raw = resolved.get(
                "methods",
                methods,
                "vanilla,classifier,filter,projection".to_string(),
            )?;
            let methods = parse_methods(&methods_raw, eta, projection)?;
            let configs = spec.build_configs()?;
            let report = evaluate(&policy, &schedule, &methods, &configs, &spec.risk)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("per_episode.csv"), report.per_episode_csv())?;
            std::fs::write(out.join("summary.csv"), report.summary_csv())?;
            write_manifest(
                &out,
                "eval",
                &[
                    ("suite", suite.display().to_string()),
                    ("ckpt", ckpt.display().to_string()),
                    ("methods", methods_raw.clone()),
                    ("episodes", configs.len().to_string()),
                    ("eta", eta.to_string()),
                ],
                seed,
            )?;
            print!("{}", report.table());
        }

        Command::Demo1d {
            eta_sweep,
            samples,
            out,
        } => {
            let sweep_raw = resolved.get("eta_sweep", eta_sweep, "0,1,10,100".to_string())?;
            let etas: Result<Vec<f64>, _> =
                sweep_raw.split(',').map(|s| s.trim().parse()).collect();
            let etas = etas.map_err(|_| anyhow!("bad eta sweep `{sweep_raw}`"))?;
            let target = OneDTarget::default_demo();
            let config = LangevinConfig {
                samples: resolved.get("samples", samples, 10_000usize)?,
                seed,
                ..LangevinConfig::default()
            };
            let mut runs = Vec::new();
            let unguided = langevin_run(&target, &config, &GuidanceMode::Unguided)?;
            runs.push(DemoRun::from_samples("unguided", &target, unguided));
            for eta in etas {
                let s = langevin_run(&target, &config, &GuidanceMode::Classifier { eta })?;
                runs.push(DemoRun::from_samples(
                    format!("classifier eta={eta}"),
                    &target,
                    s,
                ));
            }
            let cfg = ProjectionConfig::default_for(config.total_steps());
            let s = langevin_run(&target, &config, &GuidanceMode::Projection(cfg))?;
            runs.push(DemoRun::from_samples("projection", &target, s));

            emit_demo_report(&runs, &target, &out)?;
            write_manifest(
                &out,
                "demo1d",
                &[
                    ("eta_sweep", sweep_raw.clone()),
                    ("samples", config.samples.to_string()),
                ],
                seed,
            )?;
            for run in &runs {
                println!(
                    "{:<22} violations {:>7.3}%  mode masses {:?}",
                    run.label,
                    100.0 * run.violation_fraction,
                    run.mode_masses
                        .iter()
                        .map(|m| (m * 1000.0).round() / 1000.0)
                        .collect::<Vec<_>>()
                );
            }
            println!("report written to {}", out.display());
        }

        Command::Riskmap {
            terrain,
            alpha,
            gamma,
            mc_samples,
            out,
        } => {
            let belief = load_terrain(&terrain)?;
            let config = RiskConfig {
                alpha: resolved.get("alpha", alpha, 0.9)?,
                gamma: resolved.get("gamma", gamma, 0.5)?,
                mc_samples: resolved.get("mc_samples", mc_samples, 30usize)?,
            };
            let map = build_risk_map(&belief, &CostParams::default(), &config, seed)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            map.save(&out)?;
            let dir = out.parent().unwrap_or(Path::new("."));
            write_manifest(
                dir,
                "riskmap",
                &[
                    ("terrain", terrain.display().to_string()),
                    ("out", out.display().to_string()),
                    ("alpha", config.alpha.to_string()),
                    ("gamma", config.gamma.to_string()),
                    ("mc_samples", config.mc_samples.to_string()),
                ],
                seed,
            )?;
            let unsafe_cells = map
                .rho()
                .iter()
                .filter(|&&r| r as f64 > config.gamma)
                .count();
            println!(
                "risk map {}x{} written to {} ({} unsafe cells)",
                map.spec().width,
                map.spec().height,
                out.display(),
                unsafe_cells
            );
        }
    }
    Ok(())
}

fn parse_guidance(name: &str, eta: f64, projection: ProjectionConfig) -> anyhow::Result<GuidanceMode> {
    match name {
        "none" => Ok(GuidanceMode::Unguided),
        "classifier" => Ok(GuidanceMode::Classifier { eta }),
        "projection" => Ok(GuidanceMode::Projection(projection)),
        other => bail!("unknown guidance mode `{other}` (expected none, classifier, projection)"),
    }
}

fn parse_methods(raw: &str, eta: f64, projection: ProjectionConfig) -> anyhow::Result<Vec<EvalMethod>> {
    let mut methods = Vec::new();
    for name in raw.split(',') {
        let method = match name.trim() {
            "vanilla" => EvalMethod::Vanilla,
            "classifier" => EvalMethod::Classifier { eta },
            "filter" => EvalMethod::Filter,
            "projection" => EvalMethod::Projection(projection),
            other => bail!("unknown method `{other}`"),
        };
        methods.push(method);
    }
    if methods.is_empty() {
        bail!("no methods given");
    }
    Ok(methods)
}
