//! Base learners trained on real and synthetic transitions, plus Monte-Carlo
//! policy evaluation.

pub mod td3bc;

pub use td3bc::{train_td3bc, ActorCritic, Td3BcConfig, Td3Losses};

use serde::{Deserialize, Serialize};

use crate::env::{index_of, Environment, Policy, StochasticPolicy, Transition};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Action-value table with lowest-index greedy tie-breaking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularQ {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row-major `[s][a]`.
    pub q: Vec<f64>,
}

impl TabularQ {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            q: vec![0.0; n_states * n_actions],
        }
    }

    pub fn value(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    fn row(&self, s: usize) -> &[f64] {
        &self.q[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn greedy(&self, s: usize) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for a in 1..row.len() {
            if row[a] > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn max_value(&self, s: usize) -> f64 {
        self.row(s)[self.greedy(s)]
    }

    pub fn greedy_policy(&self) -> Result<StochasticPolicy> {
        let actions: Vec<usize> = (0..self.n_states).map(|s| self.greedy(s)).collect();
        StochasticPolicy::deterministic(self.n_actions, &actions)
    }
}

/// Full-batch fitted Q-iteration on index-valued transitions.
///
/// Each sweep replaces `Q(s, a)` by the mean of `r + gamma max Q(s', .)` over
/// the transitions from `(s, a)`; unvisited pairs stay at 0. `done` flags are
/// read as time limits and do not stop bootstrapping.
pub fn fitted_q_iteration<'a, I>(data: I, n_states: usize, n_actions: usize, gamma: f64, n_iters: usize) -> Result<TabularQ>
where
    I: IntoIterator<Item = &'a Transition>,
{
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::param(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    let mut grouped: Vec<Vec<(f64, usize)>> = vec![Vec::new(); n_states * n_actions];
    for t in data {
        let s = index_of(&t.s, n_states, "state")?;
        let a = index_of(&t.a, n_actions, "action")?;
        let s2 = index_of(&t.s_next, n_states, "next state")?;
        if !t.r.is_finite() {
            return Err(Error::data(format!("non-finite reward {}", t.r)));
        }
        grouped[s * n_actions + a].push((t.r, s2));
    }
    let mut q = TabularQ::zeros(n_states, n_actions);
    for _ in 0..n_iters {
        let v: Vec<f64> = (0..n_states).map(|s| q.max_value(s)).collect();
        let mut next = q.clone();
        for (k, samples) in grouped.iter().enumerate() {
            if samples.is_empty() {
                continue;
            }
            let total: f64 = samples.iter().map(|&(r, s2)| r + gamma * v[s2]).sum();
            next.q[k] = total / samples.len() as f64;
        }
        q = next;
    }
    Ok(q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean_discounted: f64,
    pub std_discounted: f64,
    pub mean_return: f64,
    pub std_return: f64,
    pub returns: Vec<f64>,
    pub discounted_returns: Vec<f64>,
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Monte-Carlo returns over `n_episodes` episodes of the environment horizon.
/// Episode `k` draws from its own stream derived from `(seed, k)`.
pub fn evaluate_policy(env: &dyn Environment, policy: &dyn Policy, n_episodes: usize, seed: u64) -> Result<Evaluation> {
    if n_episodes == 0 {
        return Err(Error::param("evaluation needs at least one episode"));
    }
    let d = env.descriptor();
    let mut returns = Vec::with_capacity(n_episodes);
    let mut discounted = Vec::with_capacity(n_episodes);
    for k in 0..n_episodes {
        let mut rng = rng_from_seed(derive_seed(seed, k as u64));
        let mut s = env.reset(&mut rng);
        let (mut g, mut gd, mut w) = (0.0, 0.0, 1.0);
        for _ in 0..d.horizon {
            let a = policy.act(&s, &mut rng)?;
            let (s2, r) = env.step(&s, &a, &mut rng)?;
            g += r;
            gd += w * r;
            w *= d.gamma;
            s = s2;
        }
        returns.push(g);
        discounted.push(gd);
    }
    let (mean_return, std_return) = mean_std(&returns);
    let (mean_discounted, std_discounted) = mean_std(&discounted);
    Ok(Evaluation {
        mean_discounted,
        std_discounted,
        mean_return,
        std_return,
        returns,
        discounted_returns: discounted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{collect_dataset, make_tabular_mdp_with, RewardSupport, TabularEnv, TabularEnvConfig, TabularMdp};
    use crate::theory::exact::{exact_return, value_iteration};

    fn tr(s: usize, a: usize, r: f64, s2: usize) -> Transition {
        Transition {
            s: vec![s as f64],
            a: vec![a as f64],
            r,
            s_next: vec![s2 as f64],
            done: false,
        }
    }

    #[test]
    fn one_step_collapse_averages_rewards() {
        let data = [tr(0, 1, 1.0, 1), tr(0, 1, 3.0, 0), tr(1, 0, -2.0, 1)];
        let q = fitted_q_iteration(&data, 2, 2, 0.0, 5).unwrap();
        assert_eq!(q.q, vec![0.0, 2.0, -2.0, 0.0]);
        let single = fitted_q_iteration(&data[2..], 2, 2, 0.0, 1).unwrap();
        assert_eq!(single.q, vec![0.0, 0.0, -2.0, 0.0]);
        assert_eq!(q.greedy(0), 1);
        assert_eq!(q.greedy(1), 1);
        assert_eq!(TabularQ::zeros(1, 3).greedy(0), 0);
    }

    /// Count-based MDP of a dataset whose every pair was visited.
    fn empirical(data: &[Transition], n: usize, m: usize, gamma: f64) -> TabularMdp {
        let mut counts = vec![0.0; n * m * n];
        let mut rewards = vec![0.0; n * m];
        let mut visits = vec![0.0; n * m];
        for t in data {
            let (s, a, s2) = (t.s[0] as usize, t.a[0] as usize, t.s_next[0] as usize);
            counts[(s * m + a) * n + s2] += 1.0;
            rewards[s * m + a] += t.r;
            visits[s * m + a] += 1.0;
        }
        for k in 0..n * m {
            rewards[k] /= visits[k];
            for s2 in 0..n {
                counts[k * n + s2] /= visits[k];
            }
        }
        TabularMdp::new(n, m, counts, rewards, vec![1.0 / n as f64; n], gamma, 1.0).unwrap()
    }

    #[test]
    fn fitted_q_matches_value_iteration_on_the_empirical_mdp() {
        let cfg = TabularEnvConfig {
            n_states: 4,
            n_actions: 2,
            gamma: 0.9,
            ..Default::default()
        };
        let env = TabularEnv::new(cfg.clone()).unwrap();
        let pi = StochasticPolicy::uniform(4, 2);
        let ds = collect_dataset(&env, &pi, "uniform", 4000, 3).unwrap();
        let mdp = empirical(&ds.transitions, 4, 2, 0.9);
        let (_, q_star) = value_iteration(&mdp, 1e-13);
        let q = fitted_q_iteration(&ds.transitions, 4, 2, 0.9, 400).unwrap();
        for (a, b) in q.q.iter().zip(&q_star) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn monte_carlo_matches_exact_return() {
        let cfg = TabularEnvConfig {
            n_states: 5,
            n_actions: 3,
            gamma: 0.9,
            episode_len: 300,
            rewards: RewardSupport::Signed,
            seed: 11,
            ..Default::default()
        };
        let env = TabularEnv::new(cfg.clone()).unwrap();
        let pi = StochasticPolicy::uniform(5, 3);
        let eval = evaluate_policy(&env, &pi, 4000, 5).unwrap();
        let exact = exact_return(env.mdp(), &pi, env.mdp().rho0()).unwrap();
        let se = eval.std_discounted / (4000f64).sqrt();
        assert!((eval.mean_discounted - exact).abs() <= 3.0 * se, "{} vs {exact} (se {se})", eval.mean_discounted);
        let again = make_tabular_mdp_with(5, 3, 0.9, 1.0, RewardSupport::Signed, 11).unwrap();
        assert_eq!(&again, env.mdp());
    }

    #[test]
    fn evaluation_is_reproducible_and_exact_for_deterministic_systems() {
        let cfg = TabularEnvConfig {
            n_states: 3,
            n_actions: 2,
            ..Default::default()
        };
        let env = TabularEnv::new(cfg).unwrap();
        let pi = StochasticPolicy::uniform(3, 2);
        let a = evaluate_policy(&env, &pi, 1, 9).unwrap();
        let b = evaluate_policy(&env, &pi, 1, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.std_return, 0.0);
        assert!(evaluate_policy(&env, &pi, 0, 9).is_err());

        use crate::env::{PointMass, PointMassConfig};
        let pm = PointMass::new(PointMassConfig {
            noise_std: 0.0,
            start_radius: 0.0,
            start_speed: 0.0,
            ..Default::default()
        })
        .unwrap();
        struct Constant;
        impl Policy for Constant {
            fn act(&self, _: &[f64], _: &mut crate::rng::Rng) -> Result<Vec<f64>> {
                Ok(vec![0.3, -0.1])
            }
        }
        let e = evaluate_policy(&pm, &Constant, 6, 1).unwrap();
        assert_eq!(e.std_return, 0.0);
        assert_eq!(e.std_discounted, 0.0);
    }
}
