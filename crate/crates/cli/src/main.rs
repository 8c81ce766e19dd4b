use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use tatu::augmentation::{ActionSource, ActionSourceKind};
use tatu::config::{RunConfig, SweepParam};
use tatu::dynamics::DynamicsEnsemble;
use tatu::learner::ActorCritic;
use tatu::persist::{self, MetricRecord, MetricsLog};
use tatu::pipeline::{self, files};
use tatu::rollout::CvaeModel;
use tatu::theory::suite::run_instance;
use tatu::{Error, ErrorCategory, Result};

/// Environment variable naming the root directory for run outputs.
const OUTPUT_ROOT_VAR: &str = "TATU_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "tatu", version, about = "Truncated model-based data augmentation for offline RL")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set truncation.alpha=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Global seed; replaces the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root for run directories. Defaults to $TATU_OUTPUT_ROOT, then to the
    /// config's output_dir.
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,
    /// Run directory name under the output root.
    #[arg(long, global = true, default_value = "default")]
    run: String,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Collect an offline dataset on the point mass.
    GenDataset,
    /// Fit the dynamics ensemble to the run's dataset.
    TrainDynamics {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Fit the CVAE rollout policy to the run's dataset.
    TrainCvae {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Generate truncated model rollouts into the model buffer.
    Augment {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Policy checkpoint used when the rollout source is a learned policy.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Train TD3+BC on real data mixed with the model buffer.
    TrainPolicy {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Train on real data only.
        #[arg(long)]
        baseline: bool,
    },
    /// Monte-Carlo evaluation of a trained policy.
    Evaluate {
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Check the return and sub-optimality bounds on random tabular MDPs.
    VerifyBounds {
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Sweep one parameter over a grid for several seeds.
    Sweep {
        /// horizon, alpha or real_ratio.
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        seeds: Option<usize>,
        /// Only generate buffers; skip policy training.
        #[arg(long)]
        no_policies: bool,
    },
    /// Print the default configuration.
    Defaults,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenDataset => "gen-dataset",
            Command::TrainDynamics { .. } => "train-dynamics",
            Command::TrainCvae { .. } => "train-cvae",
            Command::Augment { .. } => "augment",
            Command::TrainPolicy { .. } => "train-policy",
            Command::Evaluate { .. } => "evaluate",
            Command::VerifyBounds { .. } => "verify-bounds",
            Command::Sweep { .. } => "sweep",
            Command::Defaults => "defaults",
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    dir: PathBuf,
}

impl Ctx {
    fn path(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.dir.join(name))
    }

    /// Fresh metrics file for one command; reruns replace it.
    fn metrics(&self, command: &str) -> Result<MetricsLog> {
        let path = self.dir.join("metrics").join(format!("{command}.jsonl"));
        if path.exists() {
            std::fs::remove_file(&path)?;
        }
        MetricsLog::open(&path)
    }
}

fn resolve(common: &Common) -> Result<Ctx> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let root = common
        .output_root
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from))
        .unwrap_or_else(|| cfg.output_dir.clone());
    let dir = root.join(&common.run);
    Ok(Ctx { cfg, dir })
}

fn run(cli: Cli) -> Result<Value> {
    if let Command::Defaults = cli.command {
        print!("{}", RunConfig::default().to_toml()?);
        return Ok(Value::Null);
    }
    let ctx = resolve(&cli.common)?;
    std::fs::create_dir_all(&ctx.dir)?;
    pipeline::echo_config(&ctx.cfg, &ctx.dir)?;
    let cfg = &ctx.cfg;
    let name = cli.command.name();
    match cli.command {
        Command::Defaults => unreachable!(),
        Command::GenDataset => {
            let ds = pipeline::generate_dataset(cfg)?;
            let path = ctx.dir.join(files::DATASET);
            persist::save_dataset(&path, &ds)?;
            let returns = ds.episode_returns();
            let mean = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
            let mut log = ctx.metrics(name)?;
            log.record(MetricRecord::new(name, 0, "dataset/n_transitions", ds.len() as f64))?;
            log.record(MetricRecord::new(name, 0, "dataset/mean_episode_return", mean))?;
            Ok(json!({"dataset": path, "n_transitions": ds.len(), "mean_episode_return": mean}))
        }
        Command::TrainDynamics { dataset } => {
            let ds = persist::load_dataset(&ctx.path(&dataset, files::DATASET))?;
            let ens = pipeline::fit_dynamics(cfg, &ds)?;
            let path = ctx.dir.join(files::DYNAMICS);
            persist::save_checkpoint(&path, &ens)?;
            pipeline::log_dynamics(&mut ctx.metrics(name)?, name, &ens)?;
            Ok(json!({"checkpoint": path, "elites": ens.elites, "validation_losses": ens.validation_losses}))
        }
        Command::TrainCvae { dataset } => {
            let ds = persist::load_dataset(&ctx.path(&dataset, files::DATASET))?;
            let model = pipeline::fit_cvae(cfg, &ds)?;
            let path = ctx.dir.join(files::CVAE);
            persist::save_checkpoint(&path, &model)?;
            pipeline::log_cvae(&mut ctx.metrics(name)?, name, &model)?;
            Ok(json!({"checkpoint": path, "final_loss": model.history.last()}))
        }
        Command::Augment { dataset, policy } => {
            let ds = persist::load_dataset(&ctx.path(&dataset, files::DATASET))?;
            let ens: DynamicsEnsemble = persist::load_checkpoint(&ctx.dir.join(files::DYNAMICS))?;
            let source: Box<dyn ActionSource> = match cfg.augmentation.action_source {
                ActionSourceKind::Cvae => Box::new(persist::load_checkpoint::<CvaeModel>(&ctx.dir.join(files::CVAE))?),
                ActionSourceKind::LearnedPolicy => {
                    let path = policy.ok_or_else(|| Error::Config("a learned rollout policy needs --policy".into()))?;
                    Box::new(persist::load_checkpoint::<ActorCritic>(&path)?)
                }
            };
            let (buffer, report) = pipeline::augment(cfg, &ds, &ens, source.as_ref())?;
            persist::save_buffer(&ctx.dir.join(files::BUFFER), &buffer)?;
            persist::save_json(&ctx.dir.join(files::AUGMENT_STATS), &report)?;
            pipeline::log_augment(&mut ctx.metrics(name)?, name, 0, &report)?;
            Ok(json!({
                "buffer_size": report.buffer_size,
                "epsilon": report.threshold.epsilon,
                "mean_length": report.stats.mean_length,
                "rejection_rate": report.stats.rejection_rate,
            }))
        }
        Command::TrainPolicy { dataset, baseline } => {
            let ds = persist::load_dataset(&ctx.path(&dataset, files::DATASET))?;
            let buffer = if baseline {
                None
            } else {
                Some(persist::load_buffer(&ctx.dir.join(files::BUFFER))?)
            };
            let (policy, losses) = pipeline::fit_policy(cfg, &ds, buffer.as_ref())?;
            let path = ctx.dir.join(if baseline { "baseline_policy.ckpt" } else { files::POLICY });
            persist::save_checkpoint(&path, &policy)?;
            pipeline::log_policy(&mut ctx.metrics(name)?, name, "policy", &losses)?;
            let last = losses.last().map(|l| l.critic);
            Ok(json!({"checkpoint": path, "steps": losses.len(), "final_critic_loss": last}))
        }
        Command::Evaluate { policy } => {
            let path = ctx.path(&policy, files::POLICY);
            let pi: ActorCritic = persist::load_checkpoint(&path)?;
            let e = pipeline::evaluate(cfg, &pi)?;
            persist::save_json(&ctx.dir.join(files::EVALUATION), &e)?;
            pipeline::log_evaluation(&mut ctx.metrics(name)?, name, 0, "eval", &e)?;
            Ok(json!({"policy": path, "mean_return": e.mean_return, "std_return": e.std_return, "mean_discounted": e.mean_discounted}))
        }
        Command::VerifyBounds { instances } => verify_bounds(&ctx, instances.unwrap_or(cfg.theory.instances)),
        Command::Sweep {
            param,
            grid,
            seeds,
            no_policies,
        } => {
            let mut cfg = cfg.clone();
            if let Some(p) = param {
                cfg.sweep.param = SweepParam::parse(&p)?;
            }
            if grid.is_some() {
                cfg.sweep.grid = grid;
            }
            if let Some(n) = seeds {
                cfg.sweep.n_seeds = n;
            }
            if no_policies {
                cfg.sweep.train_policies = false;
            }
            let report = pipeline::run_sweep(&cfg, &ctx.dir)?;
            eprint!("{}", report.to_table());
            Ok(json!({
                "param": report.param,
                "grid": report.grid,
                "summary": report.summary,
                "baseline_return": report.baseline_return,
                "buffer_sizes": (0..cfg.sweep.n_seeds).map(|k| report.buffer_sizes(k)).collect::<Vec<_>>(),
            }))
        }
    }
}

fn verify_bounds(ctx: &Ctx, n: usize) -> Result<Value> {
    if n == 0 {
        return Err(Error::Config("verify-bounds needs at least one instance".into()));
    }
    let suite = &ctx.cfg.theory.suite;
    let mut log = ctx.metrics("verify-bounds")?;
    let mut lines = String::new();
    let (mut passed, mut return_ok, mut intermediate_ok, mut subopt_ok) = (0, 0, 0, 0);
    let mut worst = f64::INFINITY;
    for i in 0..n {
        let out = run_instance(suite, tatu::rng::derive_seed(ctx.cfg.seed, i as u64))?;
        let b = &out.bounds;
        passed += usize::from(out.all_ok());
        return_ok += usize::from(b.return_bound_ok());
        intermediate_ok += usize::from(b.intermediate_bounds_ok());
        subopt_ok += usize::from(out.suboptimality.ok);
        let slacks = [
            b.lower_slack,
            b.upper_slack,
            b.model_gap_slack,
            b.sandwich_lower_slack,
            b.sandwich_upper_slack,
            out.suboptimality.slack,
        ];
        worst = slacks.iter().copied().fold(worst, f64::min);
        for (name, v) in ["lower_slack", "upper_slack", "model_gap_slack", "sandwich_lower_slack", "sandwich_upper_slack", "suboptimality_slack"]
            .iter()
            .zip(slacks)
        {
            log.record(MetricRecord::new("verify-bounds", i as u64, format!("bounds/{name}"), v))?;
        }
        lines.push_str(&serde_json::to_string(&out).map_err(|e| Error::Schema(e.to_string()))?);
        lines.push('\n');
    }
    persist::write_atomic(&ctx.dir.join("bounds.jsonl"), lines.as_bytes())?;
    Ok(json!({
        "instances": n,
        "passed": passed,
        "return_bound_passed": return_ok,
        "intermediate_bounds_passed": intermediate_ok,
        "suboptimality_passed": subopt_ok,
        "min_slack": worst,
    }))
}

fn error_json(category: ErrorCategory, message: &str) -> String {
    json!({"error": {"category": category.as_str(), "code": category.exit_code(), "message": message}}).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let cat = ErrorCategory::Parameter;
            eprintln!("{}", error_json(cat, e.to_string().trim()));
            return ExitCode::from(cat.exit_code() as u8);
        }
    };
    let level = if cli.common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let cat = e.category();
            eprintln!("{}", error_json(cat, &e.to_string()));
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
