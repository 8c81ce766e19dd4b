//! Environments, behavior policies and offline dataset collection.
//!
//! Every environment speaks in `f64` vectors. Tabular states and actions are
//! one-element vectors holding the index, which lets datasets, buffers and
//! learners share one transition type.

pub mod behavior;
pub mod dataset;
pub mod pointmass;
pub mod tabular;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use behavior::{BehaviorTier, ScriptedController};
pub use dataset::{collect_dataset, Dataset, Transition};
pub use pointmass::{PointMass, PointMassConfig};
pub use tabular::{make_tabular_mdp, make_tabular_mdp_with, RewardSupport, StochasticPolicy, TabularMdp};

/// Serializable recipe from which an environment can be rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    PointMass(PointMassConfig),
    Tabular(TabularEnvConfig),
}

impl EnvSpec {
    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvSpec::PointMass(cfg) => Box::new(PointMass::new(cfg.clone())?),
            EnvSpec::Tabular(cfg) => Box::new(TabularEnv::new(cfg.clone())?),
        })
    }

    pub fn descriptor(&self) -> Result<EnvDescriptor> {
        Ok(self.build()?.descriptor())
    }
}

/// Identity and shape of an environment, stored with every dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvDescriptor {
    pub id: String,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Symmetric box bound on continuous actions; `None` for discrete ones.
    pub action_bound: Option<f64>,
    pub horizon: usize,
    pub gamma: f64,
    pub spec: EnvSpec,
}

pub trait Environment: Send + Sync {
    fn descriptor(&self) -> EnvDescriptor;

    fn reset(&self, rng: &mut Rng) -> Vec<f64>;

    /// Returns `(s_next, reward)`. Continuous actions are clipped first.
    fn step(&self, s: &[f64], a: &[f64], rng: &mut Rng) -> Result<(Vec<f64>, f64)>;

    /// The known reward rule, used to label model-generated transitions.
    fn reward(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<f64>;
}

/// Anything that maps a state to an action vector.
pub trait Policy: Send + Sync {
    fn act(&self, s: &[f64], rng: &mut Rng) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularEnvConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
    pub rewards: RewardSupport,
    pub seed: u64,
    pub episode_len: usize,
}

impl Default for TabularEnvConfig {
    fn default() -> Self {
        Self {
            n_states: 5,
            n_actions: 3,
            gamma: 0.9,
            r_max: 1.0,
            rewards: RewardSupport::NonNegative,
            seed: 0,
            episode_len: 5,
        }
    }
}

/// A random [`TabularMdp`] run episodically.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    config: TabularEnvConfig,
    mdp: TabularMdp,
}

impl TabularEnv {
    pub fn new(config: TabularEnvConfig) -> Result<Self> {
        if config.episode_len == 0 {
            return Err(Error::param("episode_len must be positive"));
        }
        let mdp = tabular::make_tabular_mdp_with(
            config.n_states,
            config.n_actions,
            config.gamma,
            config.r_max,
            config.rewards,
            config.seed,
        )?;
        Ok(Self { config, mdp })
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn config(&self) -> &TabularEnvConfig {
        &self.config
    }
}

/// Reads a one-element index vector, validating range.
pub fn index_of(v: &[f64], n: usize, what: &str) -> Result<usize> {
    match v {
        [x] if x.fract() == 0.0 && *x >= 0.0 && (*x as usize) < n => Ok(*x as usize),
        _ => Err(Error::param(format!("{what} {v:?} is not an index below {n}"))),
    }
}

impl Environment for TabularEnv {
    fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor {
            id: format!("tabular-{}x{}", self.config.n_states, self.config.n_actions),
            state_dim: 1,
            action_dim: 1,
            action_bound: None,
            horizon: self.config.episode_len,
            gamma: self.config.gamma,
            spec: EnvSpec::Tabular(self.config.clone()),
        }
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        vec![self.mdp.sample_initial(rng) as f64]
    }

    fn step(&self, s: &[f64], a: &[f64], rng: &mut Rng) -> Result<(Vec<f64>, f64)> {
        let si = index_of(s, self.mdp.n_states(), "state")?;
        let ai = index_of(a, self.mdp.n_actions(), "action")?;
        Ok((vec![self.mdp.sample_next(si, ai, rng) as f64], self.mdp.reward(si, ai)))
    }

    fn reward(&self, s: &[f64], a: &[f64], _s_next: &[f64]) -> Result<f64> {
        let si = index_of(s, self.mdp.n_states(), "state")?;
        let ai = index_of(a, self.mdp.n_actions(), "action")?;
        Ok(self.mdp.reward(si, ai))
    }
}

impl Policy for StochasticPolicy {
    fn act(&self, s: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let si = index_of(s, self.n_states(), "state")?;
        Ok(vec![self.sample(si, rng) as f64])
    }
}

/// `100 * (J - J_random) / (J_expert - J_random)`.
pub fn normalized_score(j_pi: f64, j_random: f64, j_expert: f64) -> Result<f64> {
    if j_expert == j_random {
        return Err(Error::param(format!(
            "degenerate reference: expert and random returns are both {j_random}"
        )));
    }
    Ok((j_pi - j_random) / (j_expert - j_random) * 100.0)
}
