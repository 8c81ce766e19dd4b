//! Randomized bound-verification instances.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::tabular::{make_tabular_mdp_with, sample_simplex, RewardSupport, StochasticPolicy, TabularMdp};
use crate::error::Result;
use crate::rng::{derive_seed, rng_from_seed};
use crate::theory::bounds::{check_bounds, check_suboptimality, BoundConfig, BoundReport, LearnedModel, SuboptimalityReport};
use crate::truncation::pessimistic::tabular_uncertainty;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub max_states: usize,
    pub max_actions: usize,
    pub gammas: Vec<f64>,
    pub r_max: f64,
    pub lambda_pen: f64,
    pub kappas: Vec<f64>,
    /// Threshold strength: `epsilon = max_{s,a} u(s,a) / alpha`.
    pub alpha: f64,
    /// Largest mixing weight toward a random row when perturbing the model.
    pub max_perturbation: f64,
    pub rewards: RewardSupport,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            max_states: 8,
            max_actions: 4,
            gammas: vec![0.9, 0.99],
            r_max: 1.0,
            lambda_pen: 1.0,
            kappas: vec![0.0, 1.0],
            alpha: 1.0,
            max_perturbation: 0.3,
            rewards: RewardSupport::NonNegative,
        }
    }
}

/// One randomized instance: true MDP, perturbed learned model, policy.
#[derive(Debug, Clone)]
pub struct Instance {
    pub mdp: TabularMdp,
    pub learned: LearnedModel,
    pub policy: StochasticPolicy,
    pub bound_config: BoundConfig,
}

pub fn random_instance(cfg: &SuiteConfig, seed: u64) -> Result<Instance> {
    let mut rng = rng_from_seed(seed);
    let n_states = rng.random_range(2..=cfg.max_states.max(2));
    let n_actions = rng.random_range(2..=cfg.max_actions.max(2));
    let gamma = cfg.gammas[rng.random_range(0..cfg.gammas.len())];
    let kappa = cfg.kappas[rng.random_range(0..cfg.kappas.len())];
    let mdp = make_tabular_mdp_with(n_states, n_actions, gamma, cfg.r_max, cfg.rewards, derive_seed(seed, 1))?;
    let w = rng.random_range(0.0..=cfg.max_perturbation);
    let w0 = rng.random_range(0.0..=cfg.max_perturbation);
    let transitions = mdp
        .transitions()
        .chunks(n_states)
        .flat_map(|row| mix(row, w, &mut rng))
        .collect();
    let rho0 = mix(mdp.rho0(), w0, &mut rng);
    let learned = LearnedModel { transitions, rho0 };
    let u = tabular_uncertainty(&mdp, &learned.transitions)?;
    let epsilon = u.iter().copied().fold(0.0, f64::max) / cfg.alpha;
    let policy = StochasticPolicy::random(n_states, n_actions, derive_seed(seed, 2));
    Ok(Instance {
        mdp,
        learned,
        policy,
        bound_config: BoundConfig {
            lambda_pen: cfg.lambda_pen,
            kappa,
            epsilon,
        },
    })
}

fn mix(row: &[f64], w: f64, rng: &mut crate::rng::Rng) -> Vec<f64> {
    let noise = sample_simplex(row.len(), rng);
    let mut out: Vec<f64> = row.iter().zip(noise).map(|(p, q)| (1.0 - w) * p + w * q).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    out
}

/// Outcome of one instance of the suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub seed: u64,
    pub n_states: usize,
    pub n_actions: usize,
    pub bounds: BoundReport,
    pub suboptimality: SuboptimalityReport,
}

impl InstanceOutcome {
    pub fn all_ok(&self) -> bool {
        self.bounds.return_bound_ok() && self.bounds.intermediate_bounds_ok() && self.suboptimality.ok
    }
}

pub fn run_instance(cfg: &SuiteConfig, seed: u64) -> Result<InstanceOutcome> {
    let inst = random_instance(cfg, seed)?;
    let bounds = check_bounds(&inst.mdp, &inst.learned, &inst.policy, &inst.bound_config)?;
    let suboptimality = check_suboptimality(&inst.mdp, &inst.learned, &inst.policy, &inst.bound_config)?;
    Ok(InstanceOutcome {
        seed,
        n_states: inst.mdp.n_states(),
        n_actions: inst.mdp.n_actions(),
        bounds,
        suboptimality,
    })
}

/// Runs `n` instances with seeds derived from `seed`.
pub fn run_suite(cfg: &SuiteConfig, n: usize, seed: u64) -> Result<Vec<InstanceOutcome>> {
    (0..n as u64).map(|i| run_instance(cfg, derive_seed(seed, i))).collect()
}
