//! Logged transitions and offline dataset collection.

use serde::{Deserialize, Serialize};

use super::{EnvDescriptor, Environment, Policy};
use crate::error::{check_dim, Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub descriptor: EnvDescriptor,
    pub behavior_tag: String,
    pub transitions: Vec<Transition>,
    /// Transitions whose `s` may seed model rollouts.
    pub start_state_pool: Vec<usize>,
    /// Transitions that open an episode; their `s` were drawn from `rho0`.
    pub episode_starts: Vec<usize>,
}

impl Dataset {
    /// Validates dimensions and indices. Every transition is a rollout start.
    pub fn new(
        descriptor: EnvDescriptor,
        behavior_tag: impl Into<String>,
        transitions: Vec<Transition>,
        episode_starts: Vec<usize>,
    ) -> Result<Self> {
        let pool = (0..transitions.len()).collect();
        let ds = Self {
            descriptor,
            behavior_tag: behavior_tag.into(),
            transitions,
            start_state_pool: pool,
            episode_starts,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.transitions.is_empty() {
            return Err(Error::data("dataset is empty"));
        }
        let d = &self.descriptor;
        for t in &self.transitions {
            check_dim("transition state", d.state_dim, t.s.len())?;
            check_dim("transition action", d.action_dim, t.a.len())?;
            check_dim("transition next state", d.state_dim, t.s_next.len())?;
            if t.s.iter().chain(&t.a).chain(&t.s_next).any(|x| !x.is_finite()) || !t.r.is_finite() {
                return Err(Error::data("non-finite value in transition"));
            }
        }
        let n = self.transitions.len();
        if let Some(i) = self.start_state_pool.iter().chain(&self.episode_starts).find(|&&i| i >= n) {
            return Err(Error::data(format!("index {i} out of range for {n} transitions")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Per-dimension `(min, max)` of the logged actions.
    pub fn action_range(&self) -> Vec<(f64, f64)> {
        (0..self.descriptor.action_dim)
            .map(|j| {
                self.transitions
                    .iter()
                    .map(|t| t.a[j])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
            })
            .collect()
    }

    /// Undiscounted returns of the complete episodes in the dataset.
    pub fn episode_returns(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut acc = 0.0;
        for (i, t) in self.transitions.iter().enumerate() {
            if self.episode_starts.binary_search(&i).is_ok() {
                acc = 0.0;
            }
            acc += t.r;
            if t.done {
                out.push(acc);
            }
        }
        out
    }
}

/// Rolls `policy` in `env` until exactly `n_transitions` are logged,
/// resetting at the environment horizon. `done` marks horizon ends.
pub fn collect_dataset(
    env: &dyn Environment,
    policy: &dyn Policy,
    behavior_tag: &str,
    n_transitions: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_transitions == 0 {
        return Err(Error::param("n_transitions must be at least 1"));
    }
    let descriptor = env.descriptor();
    let mut rng = rng_from_seed(seed);
    let mut transitions = Vec::with_capacity(n_transitions);
    let mut episode_starts = Vec::new();
    'outer: loop {
        episode_starts.push(transitions.len());
        let mut s = env.reset(&mut rng);
        for t in 0..descriptor.horizon {
            let a = policy.act(&s, &mut rng)?;
            let (s_next, r) = env.step(&s, &a, &mut rng)?;
            let a = match descriptor.action_bound {
                Some(b) => a.iter().map(|x| x.clamp(-b, b)).collect(),
                None => a,
            };
            transitions.push(Transition {
                s,
                a,
                r,
                s_next: s_next.clone(),
                done: t + 1 == descriptor.horizon,
            });
            if transitions.len() == n_transitions {
                break 'outer;
            }
            s = s_next;
        }
    }
    Dataset::new(descriptor, behavior_tag, transitions, episode_starts)
}
