//! Finite MDPs with explicit transition tensors.
//!
//! These are the exact objects the bound checks run on. Rows of the
//! transition tensor are drawn from a flat Dirichlet, so every instance is
//! fully connected unless constructed by hand.

use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{rng_from_seed, Rng};

const SIMPLEX_TOL: f64 = 1e-12;

/// How rewards are drawn by [`make_tabular_mdp_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSupport {
    /// Uniform on `[-r_max, r_max]`.
    Signed,
    /// Uniform on `[0, r_max]`.
    NonNegative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Row-major `[s][a][s']`.
    transitions: Vec<f64>,
    /// Row-major `[s][a]`.
    rewards: Vec<f64>,
    rho0: Vec<f64>,
    gamma: f64,
    r_max: f64,
}

impl TabularMdp {
    /// Builds an MDP from explicit tables, validating every invariant.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        rho0: Vec<f64>,
        gamma: f64,
        r_max: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::param("MDP needs at least one state and action"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::param(format!("gamma must lie in [0, 1), got {gamma}")));
        }
        if !(r_max > 0.0) || !r_max.is_finite() {
            return Err(Error::param(format!("r_max must be positive, got {r_max}")));
        }
        check_dim("transition tensor", n_states * n_actions * n_states, transitions.len())?;
        check_dim("reward table", n_states * n_actions, rewards.len())?;
        check_dim("initial distribution", n_states, rho0.len())?;
        for (i, row) in transitions.chunks(n_states).enumerate() {
            check_simplex(row).map_err(|e| {
                Error::param(format!("transition row (s={}, a={}): {e}", i / n_actions, i % n_actions))
            })?;
        }
        check_simplex(&rho0).map_err(|e| Error::param(format!("rho0: {e}")))?;
        if let Some(r) = rewards.iter().find(|r| !(r.abs() <= r_max)) {
            return Err(Error::param(format!("reward {r} exceeds r_max {r_max}")));
        }
        Ok(Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            rho0,
            gamma,
            r_max,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn rho0(&self) -> &[f64] {
        &self.rho0
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Next-state distribution `P(.|s, a)`.
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transitions[start..start + self.n_states]
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transitions
    }

    /// Same MDP with rewards multiplied by `c` (and `r_max` by `|c|`).
    pub fn scaled_rewards(&self, c: f64) -> Result<Self> {
        let mut out = self.clone();
        out.rewards.iter_mut().for_each(|r| *r *= c);
        out.r_max = self.r_max * c.abs().max(f64::MIN_POSITIVE);
        Ok(out)
    }

    /// Same MDP with the transition tensor replaced.
    pub fn with_transitions(&self, transitions: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            transitions,
            self.rewards.clone(),
            self.rho0.clone(),
            self.gamma,
            self.r_max,
        )
    }

    /// Samples `s' ~ P(.|s, a)`.
    pub fn sample_next(&self, s: usize, a: usize, rng: &mut Rng) -> usize {
        sample_categorical(self.next_dist(s, a), rng)
    }

    pub fn sample_initial(&self, rng: &mut Rng) -> usize {
        sample_categorical(&self.rho0, rng)
    }
}

/// Random MDP with Dirichlet(1, ..., 1) rows and signed rewards.
pub fn make_tabular_mdp(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    r_max: f64,
    seed: u64,
) -> Result<TabularMdp> {
    make_tabular_mdp_with(n_states, n_actions, gamma, r_max, RewardSupport::Signed, seed)
}

pub fn make_tabular_mdp_with(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    r_max: f64,
    support: RewardSupport,
    seed: u64,
) -> Result<TabularMdp> {
    if n_states < 2 || n_actions < 2 {
        return Err(Error::param(format!(
            "need n_states >= 2 and n_actions >= 2, got {n_states} x {n_actions}"
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::param(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    if !(r_max > 0.0) || !r_max.is_finite() {
        return Err(Error::param(format!("r_max must be positive, got {r_max}")));
    }
    let mut rng = rng_from_seed(seed);
    let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        transitions.extend(sample_simplex(n_states, &mut rng));
    }
    let low = match support {
        RewardSupport::Signed => -r_max,
        RewardSupport::NonNegative => 0.0,
    };
    let rewards = (0..n_states * n_actions)
        .map(|_| rng.random_range(low..=r_max))
        .collect();
    let rho0 = sample_simplex(n_states, &mut rng);
    TabularMdp::new(n_states, n_actions, transitions, rewards, rho0, gamma, r_max)
}

/// Flat Dirichlet draw: normalized unit exponentials.
pub fn sample_simplex(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    // Rounding left a sliver above the cumulative sum; fall back to the last
    // state with positive mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

pub(crate) fn check_simplex(p: &[f64]) -> std::result::Result<(), String> {
    if let Some(x) = p.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(format!("entry {x} is not a finite nonnegative probability"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(format!("sums to {total}, not 1"));
    }
    Ok(())
}

/// A stationary stochastic policy `pi(a | s)` over a finite MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl StochasticPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        check_dim("policy table", n_states * n_actions, probs.len())?;
        for (s, row) in probs.chunks(n_actions).enumerate() {
            check_simplex(row).map_err(|e| Error::param(format!("policy row {s}: {e}")))?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::param(format!("action {a} out of range for state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self {
            n_states: actions.len(),
            n_actions,
            probs,
        })
    }

    /// A random policy with Dirichlet rows.
    pub fn random(n_states: usize, n_actions: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let probs = (0..n_states)
            .flat_map(|_| sample_simplex(n_actions, &mut rng))
            .collect();
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn action_probs(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn sample(&self, s: usize, rng: &mut Rng) -> usize {
        sample_categorical(self.action_probs(s), rng)
    }

    pub fn is_deterministic(&self) -> bool {
        self.probs.iter().all(|&p| p == 0.0 || p == 1.0)
    }
}
