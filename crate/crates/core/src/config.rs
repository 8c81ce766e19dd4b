//! Run configuration: every tunable in one sectioned TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augmentation::{ActionSourceKind, AugmentationConfig};
use crate::dynamics::EnsembleConfig;
use crate::env::{BehaviorTier, PointMassConfig};
use crate::error::{Error, Result};
use crate::learner::Td3BcConfig;
use crate::rollout::CvaeConfig;
use crate::theory::suite::SuiteConfig;
use crate::truncation::TruncationConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub tier: BehaviorTier,
    pub n_transitions: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            tier: BehaviorTier::Random,
            n_transitions: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub action_source: ActionSourceKind,
    /// Rollout starts per generation epoch.
    pub n_start_states: usize,
    pub epochs: usize,
    pub buffer_capacity: usize,
    pub n_threads: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            action_source: ActionSourceKind::Cvae,
            n_start_states: 1000,
            epochs: 5,
            buffer_capacity: 1_000_000,
            n_threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    /// Fraction of each batch drawn from real data. Unset means the
    /// default for the dataset tier.
    pub real_ratio: Option<f64>,
    pub eval_episodes: usize,
    pub td3bc: Td3BcConfig,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            real_ratio: None,
            eval_episodes: 50,
            td3bc: Td3BcConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Horizon,
    Alpha,
    RealRatio,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "horizon" | "h" => Ok(SweepParam::Horizon),
            "alpha" => Ok(SweepParam::Alpha),
            "real_ratio" | "eta" => Ok(SweepParam::RealRatio),
            _ => Err(Error::param(format!("unknown sweep parameter {s:?} (horizon, alpha, real_ratio)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Horizon => "horizon",
            SweepParam::Alpha => "alpha",
            SweepParam::RealRatio => "real_ratio",
        }
    }

    /// The grid studied for this parameter.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParam::Horizon => vec![1.0, 3.0, 5.0, 7.0, 10.0],
            SweepParam::Alpha => vec![1.0, 2.0, 3.0, 4.0, 5.0],
            SweepParam::RealRatio => vec![0.05, 0.25, 0.5, 0.7, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub param: SweepParam,
    /// Unset means [`SweepParam::default_grid`].
    pub grid: Option<Vec<f64>>,
    pub n_seeds: usize,
    /// Also train and evaluate a policy per grid point and an unaugmented
    /// baseline per seed.
    pub train_policies: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            param: SweepParam::Horizon,
            grid: None,
            n_seeds: 5,
            train_policies: true,
        }
    }
}

impl SweepConfig {
    pub fn resolved_grid(&self) -> Vec<f64> {
        self.grid.clone().unwrap_or_else(|| self.param.default_grid())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub instances: usize,
    pub suite: SuiteConfig,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            suite: SuiteConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub env: PointMassConfig,
    pub dataset: DatasetConfig,
    pub dynamics: EnsembleConfig,
    pub truncation: TruncationConfig,
    pub cvae: CvaeConfig,
    pub augmentation: AugmentConfig,
    pub learner: LearnerConfig,
    pub sweep: SweepConfig,
    pub theory: TheoryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            env: PointMassConfig::default(),
            dataset: DatasetConfig::default(),
            dynamics: EnsembleConfig::default(),
            truncation: TruncationConfig::default(),
            cvae: CvaeConfig::default(),
            augmentation: AugmentConfig::default(),
            learner: LearnerConfig::default(),
            sweep: SweepConfig::default(),
            theory: TheoryConfig::default(),
        }
    }
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&crate::persist::read_text(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_error)
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML and
    /// fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc: toml::Table = toml::from_str(&self.to_toml()?).map_err(config_error)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut doc, key.trim(), value)?;
        }
        let text = toml::to_string(&doc).map_err(config_error)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        crate::env::PointMass::new(self.env.clone()).map_err(wrap)?;
        self.dynamics.validate().map_err(wrap)?;
        self.truncation.validate().map_err(wrap)?;
        self.learner.td3bc.validate().map_err(wrap)?;
        self.augmentation_config().validate().map_err(wrap)?;
        if self.dataset.n_transitions == 0 {
            return Err(Error::Config("dataset.n_transitions must be positive".into()));
        }
        if self.augmentation.epochs == 0 || self.augmentation.n_start_states == 0 {
            return Err(Error::Config("augmentation epochs and n_start_states must be positive".into()));
        }
        if self.learner.eval_episodes == 0 {
            return Err(Error::Config("learner.eval_episodes must be positive".into()));
        }
        if self.sweep.n_seeds == 0 || self.sweep.grid.as_ref().is_some_and(|g| g.is_empty()) {
            return Err(Error::Config("sweep needs at least one seed and one grid value".into()));
        }
        Ok(())
    }

    pub fn real_ratio(&self) -> f64 {
        self.learner
            .real_ratio
            .unwrap_or_else(|| self.dataset.tier.default_real_ratio())
    }

    pub fn augmentation_config(&self) -> AugmentationConfig {
        AugmentationConfig {
            truncation: self.truncation.clone(),
            batch_size: self.learner.td3bc.batch_size,
            real_ratio: self.real_ratio(),
            action_source: self.augmentation.action_source,
            n_start_states: self.augmentation.n_start_states,
            buffer_capacity: self.augmentation.buffer_capacity,
            n_threads: self.augmentation.n_threads,
        }
    }

    /// Copy with one sweep parameter set.
    pub fn with_param(&self, param: SweepParam, value: f64) -> Result<Self> {
        let mut cfg = self.clone();
        match param {
            SweepParam::Horizon => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("horizon must be a positive integer, got {value}")));
                }
                cfg.truncation.horizon = value as usize;
            }
            SweepParam::Alpha => cfg.truncation.alpha = value,
            SweepParam::RealRatio => cfg.learner.real_ratio = Some(value),
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&probe) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut table = doc;
    for p in parts {
        table = table
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
