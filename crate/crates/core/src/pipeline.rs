//! End-to-end runs: dataset, dynamics, rollout policy, truncated
//! augmentation, policy training and evaluation, plus parameter sweeps.
//!
//! Every stage draws its seed from the global seed and a fixed stage tag, so
//! any stage can be rerun alone and reproduce the full pipeline's output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augmentation::{
    run_augmentation_epochs, ActionSource, ActionSourceKind, GenerationStats, Mixed, ModelBuffer, RealOnly,
};
use crate::config::{RunConfig, SweepParam};
use crate::dynamics::{train_ensemble, DynamicsEnsemble};
use crate::env::{collect_dataset, Dataset, PointMass, ScriptedController};
use crate::error::{Error, Result};
use crate::learner::{evaluate_policy, train_td3bc, ActorCritic, Evaluation, Td3Losses};
use crate::persist::{self, MetricRecord, MetricsLog};
use crate::rng::derive_seed;
use crate::rollout::{train_cvae, CvaeModel};
use crate::truncation::{compute_threshold, Threshold};

/// Stage tags mixed into the global seed.
pub mod stage {
    pub const DATASET: u64 = 1;
    pub const DYNAMICS: u64 = 2;
    pub const CVAE: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const POLICY: u64 = 5;
    pub const EVALUATE: u64 = 6;
    pub const SWEEP: u64 = 7;
}

pub fn stage_seed(cfg: &RunConfig, tag: u64) -> u64 {
    derive_seed(cfg.seed, tag)
}

/// File names inside a run directory.
pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const DATASET: &str = "dataset.jsonl";
    pub const DYNAMICS: &str = "dynamics.ckpt";
    pub const CVAE: &str = "cvae.ckpt";
    pub const BUFFER: &str = "buffer.jsonl";
    pub const AUGMENT_STATS: &str = "augment_stats.json";
    pub const POLICY: &str = "policy.ckpt";
    pub const EVALUATION: &str = "evaluation.json";
    pub const METRICS: &str = "metrics.jsonl";
    pub const SWEEP_ROWS: &str = "sweep.jsonl";
    pub const SWEEP_TABLE: &str = "sweep.tsv";
}

pub fn environment(cfg: &RunConfig) -> Result<PointMass> {
    PointMass::new(cfg.env.clone())
}

pub fn generate_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let env = environment(cfg)?;
    let pi = ScriptedController::for_tier(cfg.dataset.tier, &cfg.env);
    collect_dataset(
        &env,
        &pi,
        cfg.dataset.tier.name(),
        cfg.dataset.n_transitions,
        stage_seed(cfg, stage::DATASET),
    )
}

pub fn fit_dynamics(cfg: &RunConfig, ds: &Dataset) -> Result<DynamicsEnsemble> {
    train_ensemble(ds, &cfg.dynamics, stage_seed(cfg, stage::DYNAMICS))
}

pub fn fit_cvae(cfg: &RunConfig, ds: &Dataset) -> Result<CvaeModel> {
    train_cvae(ds, &cfg.cvae, stage_seed(cfg, stage::CVAE))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub threshold: Threshold,
    pub stats: GenerationStats,
    pub buffer_size: usize,
}

pub fn augment(
    cfg: &RunConfig,
    ds: &Dataset,
    ens: &DynamicsEnsemble,
    source: &dyn ActionSource,
) -> Result<(ModelBuffer, AugmentReport)> {
    let acfg = cfg.augmentation_config();
    let threshold = compute_threshold(ens, ds, &acfg.truncation)?;
    let (buffer, stats) = run_augmentation_epochs(
        ens,
        ds,
        source,
        &threshold,
        &acfg,
        cfg.augmentation.epochs,
        stage_seed(cfg, stage::AUGMENT),
    )?;
    let report = AugmentReport {
        threshold,
        stats,
        buffer_size: buffer.len(),
    };
    Ok((buffer, report))
}

/// TD3+BC on real data alone (`buffer = None`) or mixed with `buffer` at
/// the configured real-data ratio. Both share one seed, so a baseline and
/// an augmented run differ only in their data.
pub fn fit_policy(cfg: &RunConfig, ds: &Dataset, buffer: Option<&ModelBuffer>) -> Result<(ActorCritic, Vec<Td3Losses>)> {
    match buffer {
        None => train_td3bc(ds, &RealOnly(ds), &cfg.learner.td3bc, stage_seed(cfg, stage::POLICY)),
        Some(buffer) => {
            let source = Mixed {
                dataset: ds,
                buffer,
                eta: cfg.real_ratio(),
            };
            train_td3bc(ds, &source, &cfg.learner.td3bc, stage_seed(cfg, stage::POLICY))
        }
    }
}

pub fn evaluate(cfg: &RunConfig, policy: &ActorCritic) -> Result<Evaluation> {
    let env = environment(cfg)?;
    evaluate_policy(&env, policy, cfg.learner.eval_episodes, stage_seed(cfg, stage::EVALUATE))
}

/// The rollout policy named by the config. A learned rollout policy is the
/// real-data TD3+BC policy.
pub fn rollout_source(cfg: &RunConfig, ds: &Dataset, cvae: Option<&CvaeModel>) -> Result<Box<dyn ActionSource>> {
    Ok(match cfg.augmentation.action_source {
        ActionSourceKind::Cvae => match cvae {
            Some(m) => Box::new(m.clone()),
            None => Box::new(fit_cvae(cfg, ds)?),
        },
        ActionSourceKind::LearnedPolicy => Box::new(fit_policy(cfg, ds, None)?.0),
    })
}

pub fn log_dynamics(log: &mut MetricsLog, run: &str, ens: &DynamicsEnsemble) -> Result<()> {
    for (epoch, losses) in ens.history.iter().enumerate() {
        for (k, &l) in losses.iter().enumerate() {
            log.record(MetricRecord::new(run, epoch as u64, format!("dynamics/val_nll/member{k}"), l))?;
        }
    }
    for &e in &ens.elites {
        log.record(MetricRecord::new(run, 0, "dynamics/elite", e as f64))?;
    }
    Ok(())
}

pub fn log_cvae(log: &mut MetricsLog, run: &str, cvae: &CvaeModel) -> Result<()> {
    for (epoch, &l) in cvae.history.iter().enumerate() {
        log.record(MetricRecord::new(run, epoch as u64, "cvae/loss", l))?;
    }
    Ok(())
}

pub fn log_augment(log: &mut MetricsLog, run: &str, step: u64, r: &AugmentReport) -> Result<()> {
    let s = &r.stats;
    for (name, v) in [
        ("augment/epsilon", r.threshold.epsilon),
        ("augment/buffer_size", r.buffer_size as f64),
        ("augment/mean_length", s.mean_length),
        ("augment/rejection_rate", s.rejection_rate),
        ("augment/full_length_fraction", s.full_length_fraction),
    ] {
        log.record(MetricRecord::new(run, step, name, v))?;
    }
    Ok(())
}

/// Losses are logged every this many learner steps.
pub const LOSS_LOG_EVERY: usize = 100;

pub fn log_policy(log: &mut MetricsLog, run: &str, prefix: &str, losses: &[Td3Losses]) -> Result<()> {
    for l in losses.iter().filter(|l| l.step % LOSS_LOG_EVERY == 0 || l.step + 1 == losses.len()) {
        log.record(MetricRecord::new(run, l.step as u64, format!("{prefix}/critic_loss"), l.critic))?;
        if let (Some(a), Some(bc)) = (l.actor, l.bc) {
            log.record(MetricRecord::new(run, l.step as u64, format!("{prefix}/actor_loss"), a))?;
            log.record(MetricRecord::new(run, l.step as u64, format!("{prefix}/bc_loss"), bc))?;
        }
    }
    Ok(())
}

pub fn log_evaluation(log: &mut MetricsLog, run: &str, step: u64, prefix: &str, e: &Evaluation) -> Result<()> {
    log.record(MetricRecord::new(run, step, format!("{prefix}/mean_return"), e.mean_return))?;
    log.record(MetricRecord::new(run, step, format!("{prefix}/std_return"), e.std_return))?;
    log.record(MetricRecord::new(run, step, format!("{prefix}/mean_discounted"), e.mean_discounted))
}

/// Writes the fully resolved config next to a run's outputs.
pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    persist::write_atomic(&dir.join(files::CONFIG), cfg.to_toml()?.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub dir: PathBuf,
    pub augment: AugmentReport,
    pub evaluation: Evaluation,
}

/// Runs every stage in order, writing all artifacts and metrics to `dir`.
/// An existing metrics file in `dir` is replaced.
pub fn run_pipeline(cfg: &RunConfig, dir: &Path) -> Result<PipelineSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    echo_config(cfg, dir)?;
    let metrics_path = dir.join(files::METRICS);
    if metrics_path.exists() {
        std::fs::remove_file(&metrics_path)?;
    }
    let mut log = MetricsLog::open(&metrics_path)?;
    let run = "pipeline";

    let ds = generate_dataset(cfg)?;
    persist::save_dataset(&dir.join(files::DATASET), &ds)?;
    let ens = fit_dynamics(cfg, &ds)?;
    persist::save_checkpoint(&dir.join(files::DYNAMICS), &ens)?;
    log_dynamics(&mut log, run, &ens)?;
    let cvae = match cfg.augmentation.action_source {
        ActionSourceKind::Cvae => {
            let m = fit_cvae(cfg, &ds)?;
            persist::save_checkpoint(&dir.join(files::CVAE), &m)?;
            log_cvae(&mut log, run, &m)?;
            Some(m)
        }
        ActionSourceKind::LearnedPolicy => None,
    };
    let source = rollout_source(cfg, &ds, cvae.as_ref())?;
    let (buffer, report) = augment(cfg, &ds, &ens, source.as_ref())?;
    persist::save_buffer(&dir.join(files::BUFFER), &buffer)?;
    persist::save_json(&dir.join(files::AUGMENT_STATS), &report)?;
    log_augment(&mut log, run, 0, &report)?;
    let (policy, losses) = fit_policy(cfg, &ds, Some(&buffer))?;
    persist::save_checkpoint(&dir.join(files::POLICY), &policy)?;
    log_policy(&mut log, run, "policy", &losses)?;
    let evaluation = evaluate(cfg, &policy)?;
    persist::save_json(&dir.join(files::EVALUATION), &evaluation)?;
    log_evaluation(&mut log, run, 0, "eval", &evaluation)?;
    log.flush()?;
    Ok(PipelineSummary {
        dir: dir.to_path_buf(),
        augment: report,
        evaluation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub seed_index: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub buffer_size: usize,
    pub mean_length: f64,
    pub rejection_rate: f64,
    pub full_length_fraction: f64,
    pub mean_return: Option<f64>,
    pub baseline_return: Option<f64>,
}

/// Per-value means over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: f64,
    pub mean_buffer_size: f64,
    pub mean_length: f64,
    pub mean_return: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub grid: Vec<f64>,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
    /// Mean unaugmented return over seeds, when policies were trained.
    pub baseline_return: Option<f64>,
}

impl SweepReport {
    /// Buffer sizes for one seed, in grid order.
    pub fn buffer_sizes(&self, seed_index: usize) -> Vec<usize> {
        self.rows
            .iter()
            .filter(|r| r.seed_index == seed_index)
            .map(|r| r.buffer_size)
            .collect()
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{}\tmean_buffer_size\tmean_length\tmean_return\n", self.param.name());
        for s in &self.summary {
            let ret = s.mean_return.map_or("-".to_string(), |r| format!("{r:.4}"));
            out.push_str(&format!("{}\t{:.1}\t{:.4}\t{ret}\n", s.value, s.mean_buffer_size, s.mean_length));
        }
        if let Some(b) = self.baseline_return {
            out.push_str(&format!("baseline\t-\t-\t{b:.4}\n"));
        }
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n.max(1) as f64
}

/// Sweeps one parameter over its grid for `sweep.n_seeds` seeds. Dataset,
/// dynamics and rollout policy are shared by all grid values of a seed;
/// each grid value reuses the seed's augmentation and learner streams.
pub fn run_sweep(cfg: &RunConfig, dir: &Path) -> Result<SweepReport> {
    cfg.validate()?;
    let param = cfg.sweep.param;
    let grid = cfg.sweep.resolved_grid();
    for &v in &grid {
        cfg.with_param(param, v)?;
    }
    std::fs::create_dir_all(dir)?;
    echo_config(cfg, dir)?;
    let metrics_path = dir.join(files::METRICS);
    if metrics_path.exists() {
        std::fs::remove_file(&metrics_path)?;
    }
    let mut log = MetricsLog::open(&metrics_path)?;
    let mut rows = Vec::new();
    for k in 0..cfg.sweep.n_seeds {
        let mut base = cfg.clone();
        base.seed = derive_seed(derive_seed(cfg.seed, stage::SWEEP), k as u64);
        let run = format!("seed{k}");
        let ds = generate_dataset(&base)?;
        let ens = fit_dynamics(&base, &ds)?;
        let source = rollout_source(&base, &ds, None)?;
        let baseline = if cfg.sweep.train_policies {
            let (pi, _) = fit_policy(&base, &ds, None)?;
            let e = evaluate(&base, &pi)?;
            log_evaluation(&mut log, &run, 0, "baseline", &e)?;
            Some(e.mean_return)
        } else {
            None
        };
        for (i, &value) in grid.iter().enumerate() {
            let point = base.with_param(param, value)?;
            let (buffer, report) = augment(&point, &ds, &ens, source.as_ref())?;
            log_augment(&mut log, &run, i as u64, &report)?;
            let mean_return = if cfg.sweep.train_policies {
                let (pi, _) = fit_policy(&point, &ds, Some(&buffer))?;
                let e = evaluate(&point, &pi)?;
                log_evaluation(&mut log, &run, i as u64, "tatu", &e)?;
                Some(e.mean_return)
            } else {
                None
            };
            log::info!("sweep seed {k} {}={value}: buffer {}", param.name(), report.buffer_size);
            rows.push(SweepRow {
                param,
                value,
                seed_index: k,
                seed: base.seed,
                epsilon: report.threshold.epsilon,
                buffer_size: report.buffer_size,
                mean_length: report.stats.mean_length,
                rejection_rate: report.stats.rejection_rate,
                full_length_fraction: report.stats.full_length_fraction,
                mean_return,
                baseline_return: baseline,
            });
        }
    }
    log.flush()?;
    let summary = grid
        .iter()
        .map(|&value| {
            let at: Vec<&SweepRow> = rows.iter().filter(|r| r.value == value).collect();
            SweepSummary {
                value,
                mean_buffer_size: mean(at.iter().map(|r| r.buffer_size as f64)),
                mean_length: mean(at.iter().map(|r| r.mean_length)),
                mean_return: cfg
                    .sweep
                    .train_policies
                    .then(|| mean(at.iter().filter_map(|r| r.mean_return))),
            }
        })
        .collect();
    let baseline_return = cfg.sweep.train_policies.then(|| {
        mean(
            rows.iter()
                .filter(|r| r.value == grid[0])
                .filter_map(|r| r.baseline_return),
        )
    });
    let report = SweepReport {
        param,
        grid,
        rows,
        summary,
        baseline_return,
    };
    let mut lines = String::new();
    for r in &report.rows {
        lines.push_str(&serde_json::to_string(r).map_err(|e| Error::Schema(e.to_string()))?);
        lines.push('\n');
    }
    persist::write_atomic(&dir.join(files::SWEEP_ROWS), lines.as_bytes())?;
    persist::write_atomic(&dir.join(files::SWEEP_TABLE), report.to_table().as_bytes())?;
    Ok(report)
}
