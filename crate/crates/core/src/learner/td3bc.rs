//! Behavior-regularized deterministic actor-critic (TD3 with a BC term).
//!
//! Critics regress onto clipped double-Q targets with smoothed target
//! actions. Every `policy_delay` critic steps the actor minimizes
//! `-lambda Q1(s, pi(s)) + bc_weight * mse(pi(s), a)` with
//! `lambda = alpha / mean |Q1|` held fixed within the step, and all targets
//! move toward the online networks by `tau`.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augmentation::{ActionSource, BatchSource};
use crate::env::{Dataset, Policy, Transition};
use crate::error::{check_dim, Error, Result};
use crate::nn::{stack_rows, Activation, Adam, AdamConfig, Mlp, Normalizer};
use crate::rng::{derive_seed, rng_from_seed, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Td3BcConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Target smoothing noise, as a fraction of the action bound.
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub policy_delay: usize,
    /// Scale of the normalized Q term.
    pub alpha: f64,
    pub bc_weight: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Stop bootstrapping at `done`; off by default since logged `done`
    /// flags mark time limits.
    pub terminal_on_done: bool,
    /// Drops the Q term from the actor loss, leaving pure behavior cloning.
    pub disable_actor_q: bool,
}

impl Default for Td3BcConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Relu,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            policy_noise: 0.2,
            noise_clip: 0.5,
            policy_delay: 2,
            alpha: 2.5,
            bc_weight: 1.0,
            batch_size: 256,
            steps: 10_000,
            terminal_on_done: false,
            disable_actor_q: false,
        }
    }
}

impl Td3BcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::param("gamma must lie in [0, 1) and tau in [0, 1]"));
        }
        if self.policy_delay == 0 || self.batch_size == 0 {
            return Err(Error::param("policy_delay and batch_size must be positive"));
        }
        if !(self.actor_lr > 0.0) || !(self.critic_lr > 0.0) || !(self.alpha >= 0.0) || !(self.bc_weight >= 0.0) {
            return Err(Error::param("learning rates must be positive; alpha and bc_weight nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub config: Td3BcConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_bound: f64,
    pub state_norm: Normalizer,
    pub actor: Mlp,
    pub critics: [Mlp; 2],
    pub actor_target: Mlp,
    pub critic_targets: [Mlp; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Td3Losses {
    pub step: usize,
    pub critic: f64,
    pub actor: Option<f64>,
    pub bc: Option<f64>,
}

/// Matrices of one training batch.
pub struct Batch {
    s: Array2<f64>,
    a: Array2<f64>,
    r: Vec<f64>,
    s_next: Array2<f64>,
    done: Vec<bool>,
}

impl Batch {
    pub fn new(rows: &[&Transition], state_dim: usize, action_dim: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::data("empty training batch"));
        }
        let s: Vec<&[f64]> = rows.iter().map(|t| t.s.as_slice()).collect();
        let a: Vec<&[f64]> = rows.iter().map(|t| t.a.as_slice()).collect();
        let s2: Vec<&[f64]> = rows.iter().map(|t| t.s_next.as_slice()).collect();
        Ok(Self {
            s: stack_rows(&s, state_dim)?,
            a: stack_rows(&a, action_dim)?,
            r: rows.iter().map(|t| t.r).collect(),
            s_next: stack_rows(&s2, state_dim)?,
            done: rows.iter().map(|t| t.done).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

fn cat(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    concatenate(Axis(1), &[a, b]).expect("row counts agree")
}

impl ActorCritic {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        action_bound: f64,
        state_norm: Normalizer,
        config: Td3BcConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if !(action_bound > 0.0) {
            return Err(Error::param("the actor needs a positive action bound"));
        }
        check_dim("state normalizer", state_dim, state_norm.dim())?;
        let act = config.activation;
        let actor = Mlp::new(state_dim, &config.hidden, action_dim, act, Activation::Tanh, derive_seed(seed, 1))?;
        let critic =
            |k| Mlp::new(state_dim + action_dim, &config.hidden, 1, act, Activation::Identity, derive_seed(seed, k));
        let critics = [critic(2)?, critic(3)?];
        Ok(Self {
            actor_target: actor.clone(),
            critic_targets: critics.clone(),
            actor,
            critics,
            config,
            state_dim,
            action_dim,
            action_bound,
            state_norm,
        })
    }

    fn normalize(&self, s: ArrayView2<'_, f64>) -> Array2<f64> {
        self.state_norm.apply(s)
    }

    /// Bounded actions of `actor` for normalized states.
    fn actions_of(&self, actor: &Mlp, s_norm: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(actor.forward_batch(s_norm)? * self.action_bound)
    }

    fn critic_input(&self, s_norm: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>) -> Array2<f64> {
        cat(s_norm, (&a / self.action_bound).view())
    }

    pub fn act_batch(&self, states: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let s = stack_rows(states, self.state_dim)?;
        let a = self.actions_of(&self.actor, self.normalize(s.view()).view())?;
        Ok(a.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    /// Clipped double-Q targets; `noise` holds standard-normal draws.
    pub fn critic_targets_for(&self, batch: &Batch, noise: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        check_dim("target noise rows", batch.len(), noise.nrows())?;
        let c = &self.config;
        let b = self.action_bound;
        let s2 = self.normalize(batch.s_next.view());
        let mut a2 = self.actions_of(&self.actor_target, s2.view())?;
        ndarray::Zip::from(&mut a2).and(noise).for_each(|a, &z| {
            let eps = (z * c.policy_noise * b).clamp(-c.noise_clip * b, c.noise_clip * b);
            *a = (*a + eps).clamp(-b, b);
        });
        let x2 = self.critic_input(s2.view(), a2.view());
        let q1 = self.critic_targets[0].forward_batch(x2.view())?;
        let q2 = self.critic_targets[1].forward_batch(x2.view())?;
        Ok((0..batch.len())
            .map(|i| {
                let cont = if c.terminal_on_done && batch.done[i] { 0.0 } else { 1.0 };
                batch.r[i] + c.gamma * cont * q1[[i, 0]].min(q2[[i, 0]])
            })
            .collect())
    }

    /// Sum of both critics' mean squared TD errors, and the flat gradient
    /// `[critic 0, critic 1]`.
    pub fn critic_loss(&self, batch: &Batch, targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim("critic targets", batch.len(), targets.len())?;
        let x = self.critic_input(self.normalize(batch.s.view()).view(), batch.a.view());
        let n = batch.len() as f64;
        let mut total = 0.0;
        let mut grad = Vec::new();
        for critic in &self.critics {
            let (loss, g) = critic.grad(x.view(), |q| {
                let mut d = Array2::zeros(q.raw_dim());
                let mut loss = 0.0;
                for i in 0..q.nrows() {
                    let e = q[[i, 0]] - targets[i];
                    loss += e * e / n;
                    d[[i, 0]] = 2.0 * e / n;
                }
                Ok((loss, d))
            })?;
            total += loss;
            grad.extend(g);
        }
        Ok((total, grad))
    }

    /// `alpha / mean |Q1(s, pi(s))|`, the weight on the Q term.
    pub fn q_weight(&self, batch: &Batch) -> Result<f64> {
        let s = self.normalize(batch.s.view());
        let a = self.actions_of(&self.actor, s.view())?;
        let q = self.critics[0].forward_batch(self.critic_input(s.view(), a.view()).view())?;
        let mean_abs = q.iter().map(|v| v.abs()).sum::<f64>() / batch.len() as f64;
        Ok(self.config.alpha / mean_abs.max(1e-8))
    }

    /// Actor loss at fixed `lambda` with its gradient; also returns the BC term.
    pub fn actor_loss(&self, batch: &Batch, lambda: f64) -> Result<(f64, f64, Vec<f64>)> {
        let c = &self.config;
        let b = self.action_bound;
        let n = batch.len() as f64;
        let s = self.normalize(batch.s.view());
        let cache = self.actor.forward_cached(s.view())?;
        let pi = cache.output() * b;
        let diff = &pi - &batch.a;
        let m = (batch.len() * self.action_dim) as f64;
        let bc = diff.mapv(|d| d * d).sum() / m;
        let mut d_pi = diff.mapv(|d| c.bc_weight * 2.0 * d / m);
        let mut loss = c.bc_weight * bc;
        if !c.disable_actor_q {
            let x = self.critic_input(s.view(), pi.view());
            let qc = self.critics[0].forward_cached(x.view())?;
            loss -= lambda * qc.output().sum() / n;
            let d_q = Array2::from_elem((batch.len(), 1), -lambda / n);
            let (_, d_x) = self.critics[0].backward(&qc, d_q.view())?;
            d_pi = d_pi + &(d_x.slice(s![.., self.state_dim..]).to_owned() / b);
        }
        let (g, _) = self.actor.backward(&cache, (d_pi * b).view())?;
        Ok((loss, bc, g))
    }

    fn soft_update_targets(&mut self) -> Result<()> {
        let tau = self.config.tau;
        self.actor_target.soft_update_from(&self.actor, tau)?;
        for k in 0..2 {
            self.critic_targets[k].soft_update_from(&self.critics[k], tau)?;
        }
        Ok(())
    }
}

impl Policy for ActorCritic {
    fn act(&self, s: &[f64], _rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.act_batch(&[s])?.remove(0))
    }
}

impl ActionSource for ActorCritic {
    fn actions(&self, states: &[&[f64]], _rngs: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
        self.act_batch(states)
    }
}

/// Optimizer state around an [`ActorCritic`].
pub struct Td3Trainer {
    pub model: ActorCritic,
    actor_opt: Adam,
    critic_opts: [Adam; 2],
    noise_rng: Rng,
    updates: usize,
}

impl Td3Trainer {
    pub fn new(model: ActorCritic, seed: u64) -> Self {
        let c = &model.config;
        let critic_opt = || Adam::new(model.critics[0].n_params(), AdamConfig::with_lr(c.critic_lr));
        Self {
            actor_opt: Adam::new(model.actor.n_params(), AdamConfig::with_lr(c.actor_lr)),
            critic_opts: [critic_opt(), critic_opt()],
            noise_rng: rng_from_seed(seed),
            updates: 0,
            model,
        }
    }

    /// One critic step, plus an actor step and target update every
    /// `policy_delay` calls.
    pub fn update(&mut self, rows: &[&Transition]) -> Result<Td3Losses> {
        let m = &self.model;
        let batch = Batch::new(rows, m.state_dim, m.action_dim)?;
        let noise = Array2::from_shape_simple_fn((batch.len(), m.action_dim), || {
            StandardNormal.sample(&mut self.noise_rng)
        });
        let targets = m.critic_targets_for(&batch, noise.view())?;
        let (critic, grad) = m.critic_loss(&batch, &targets)?;
        if !critic.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric(format!(
                "critic loss diverged at update {}: loss {critic}, target range [{}, {}]",
                self.updates,
                targets.iter().copied().fold(f64::INFINITY, f64::min),
                targets.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            )));
        }
        let n0 = self.model.critics[0].n_params();
        self.critic_opts[0].step(self.model.critics[0].params_mut(), &grad[..n0])?;
        self.critic_opts[1].step(self.model.critics[1].params_mut(), &grad[n0..])?;
        self.updates += 1;
        let mut losses = Td3Losses {
            step: self.updates,
            critic,
            actor: None,
            bc: None,
        };
        if self.updates % self.model.config.policy_delay == 0 {
            let lambda = self.model.q_weight(&batch)?;
            let (actor, bc, g) = self.model.actor_loss(&batch, lambda)?;
            if !actor.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "actor loss diverged at update {}: loss {actor}, lambda {lambda}",
                    self.updates
                )));
            }
            self.actor_opt.step(self.model.actor.params_mut(), &g)?;
            self.model.soft_update_targets()?;
            losses.actor = Some(actor);
            losses.bc = Some(bc);
        }
        Ok(losses)
    }
}

/// Trains from `source` for `config.steps` updates. State normalization is
/// fitted on the logged dataset only.
pub fn train_td3bc(
    dataset: &Dataset,
    source: &dyn BatchSource,
    config: &Td3BcConfig,
    seed: u64,
) -> Result<(ActorCritic, Vec<Td3Losses>)> {
    dataset.validate()?;
    let d = &dataset.descriptor;
    let bound = d
        .action_bound
        .ok_or_else(|| Error::param("the actor-critic needs continuous, bounded actions"))?;
    let states: Vec<&[f64]> = dataset.transitions.iter().map(|t| t.s.as_slice()).collect();
    let norm = Normalizer::fit(stack_rows(&states, d.state_dim)?.view());
    let model = ActorCritic::new(d.state_dim, d.action_dim, bound, norm, config.clone(), derive_seed(seed, 0))?;
    let mut trainer = Td3Trainer::new(model, derive_seed(seed, 1));
    let mut batch_rng = rng_from_seed(derive_seed(seed, 2));
    let mut log = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let rows = source.sample(config.batch_size, &mut batch_rng)?;
        log.push(trainer.update(&rows)?);
    }
    Ok((trainer.model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::{Mixed, ModelBuffer, RealOnly};
    use crate::env::{EnvSpec, PointMassConfig};
    use crate::nn::gradcheck::check_gradient;
    use rand::Rng as _;

    fn random_dataset(n: usize, constant_action: Option<[f64; 2]>, reward: Option<f64>, seed: u64) -> Dataset {
        let spec = EnvSpec::PointMass(PointMassConfig::default());
        let mut rng = rng_from_seed(seed);
        let mut v = |k: usize| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let ts = (0..n)
            .map(|_| {
                let a = constant_action.map(|c| c.to_vec()).unwrap_or_else(|| v(2));
                let s = v(4);
                let r = reward.unwrap_or(s[0] - s[1]);
                Transition {
                    s,
                    a,
                    r,
                    s_next: v(4),
                    done: false,
                }
            })
            .collect();
        Dataset::new(spec.descriptor().unwrap(), "synthetic", ts, vec![0]).unwrap()
    }

    fn small_model(seed: u64) -> (ActorCritic, Batch) {
        let ds = random_dataset(16, None, None, seed);
        let cfg = Td3BcConfig {
            hidden: vec![8, 8],
            activation: Activation::Tanh,
            ..Default::default()
        };
        let rows: Vec<&Transition> = ds.transitions.iter().collect();
        let norm = Normalizer::fit(Batch::new(&rows, 4, 2).unwrap().s.view());
        let m = ActorCritic::new(4, 2, 0.8, norm, cfg, seed).unwrap();
        let batch = Batch::new(&rows, 4, 2).unwrap();
        (m, batch)
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let (m, batch) = small_model(1);
        let targets: Vec<f64> = (0..batch.len()).map(|i| i as f64 * 0.1 - 0.5).collect();
        let (_, g) = m.critic_loss(&batch, &targets).unwrap();
        let n0 = m.critics[0].n_params();
        let x0 = [m.critics[0].params(), m.critics[1].params()].concat();
        let mut probe = m.clone();
        let r = check_gradient(
            |p| {
                probe.critics[0].params_mut().copy_from_slice(&p[..n0]);
                probe.critics[1].params_mut().copy_from_slice(&p[n0..]);
                probe.critic_loss(&batch, &targets).unwrap().0
            },
            &x0,
            &g,
            100,
            2,
        );
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let (m, batch) = small_model(3);
        let lambda = m.q_weight(&batch).unwrap();
        let (_, _, g) = m.actor_loss(&batch, lambda).unwrap();
        let mut probe = m.clone();
        let r = check_gradient(
            |p| {
                probe.actor.params_mut().copy_from_slice(p);
                probe.actor_loss(&batch, lambda).unwrap().0
            },
            m.actor.params(),
            &g,
            100,
            4,
        );
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn behavior_cloning_limit_approaches_logged_actions() {
        let c = [0.5, -0.25];
        let ds = random_dataset(512, Some(c), None, 5);
        let cfg = Td3BcConfig {
            hidden: vec![32, 32],
            disable_actor_q: true,
            policy_delay: 1,
            batch_size: 64,
            steps: 500,
            ..Default::default()
        };
        let dist = |m: &ActorCritic| {
            let states: Vec<&[f64]> = ds.transitions.iter().map(|t| t.s.as_slice()).collect();
            let a = m.act_batch(&states).unwrap();
            a.iter().map(|x| ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt()).sum::<f64>() / a.len() as f64
        };
        let untrained = ActorCritic::new(
            4,
            2,
            1.0,
            Normalizer::fit(
                stack_rows(&ds.transitions.iter().map(|t| t.s.as_slice()).collect::<Vec<_>>(), 4)
                    .unwrap()
                    .view(),
            ),
            cfg.clone(),
            derive_seed(9, 0),
        )
        .unwrap();
        let (trained, log) = train_td3bc(&ds, &RealOnly(&ds), &cfg, 9).unwrap();
        let (before, after) = (dist(&untrained), dist(&trained));
        assert!(after < before && after < 0.05, "{before} -> {after}");
        let bc: Vec<f64> = log.iter().filter_map(|l| l.bc).collect();
        assert!(bc.last().unwrap() < bc.first().unwrap());
    }

    #[test]
    fn zero_rewards_without_discount_drive_critics_to_zero() {
        let ds = random_dataset(256, None, Some(0.0), 6);
        let cfg = Td3BcConfig {
            hidden: vec![16],
            gamma: 0.0,
            critic_lr: 1e-3,
            batch_size: 64,
            steps: 400,
            ..Default::default()
        };
        let (m, log) = train_td3bc(&ds, &RealOnly(&ds), &cfg, 2).unwrap();
        let rows: Vec<&Transition> = ds.transitions.iter().take(32).collect();
        let batch = Batch::new(&rows, 4, 2).unwrap();
        let noise = Array2::zeros((32, 2));
        assert!(m.critic_targets_for(&batch, noise.view()).unwrap().iter().all(|&y| y == 0.0));
        let first = log[0].critic;
        let last = log.last().unwrap().critic;
        assert!(last < first * 0.05, "{first} -> {last}");
    }

    #[test]
    fn actor_respects_the_action_bound() {
        let (mut m, _) = small_model(7);
        m.actor.params_mut().iter_mut().for_each(|p| *p *= 40.0);
        let mut rng = rng_from_seed(8);
        for _ in 0..200 {
            let s: Vec<f64> = (0..4).map(|_| rng.random_range(-50.0..50.0)).collect();
            assert!(m.act(&s, &mut rng).unwrap().iter().all(|a| a.abs() <= 0.8));
        }
    }

    #[test]
    fn eta_one_training_equals_unaugmented_training() {
        let ds = random_dataset(300, None, None, 10);
        let mut buffer = ModelBuffer::new(10);
        let extra = random_dataset(10, None, None, 11);
        for (i, t) in extra.transitions.into_iter().enumerate() {
            buffer.push(
                t,
                crate::augmentation::Provenance {
                    trajectory: i as u64,
                    step: 0,
                    u: 0.0,
                    u_accum: 0.0,
                    epsilon: 1.0,
                },
            );
        }
        let cfg = Td3BcConfig {
            hidden: vec![16],
            batch_size: 32,
            steps: 60,
            ..Default::default()
        };
        let mixed = Mixed {
            dataset: &ds,
            buffer: &buffer,
            eta: 1.0,
        };
        let a = train_td3bc(&ds, &mixed, &cfg, 4).unwrap();
        let b = train_td3bc(&ds, &RealOnly(&ds), &cfg, 4).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
