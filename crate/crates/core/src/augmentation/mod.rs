//! Truncated model rollouts and the synthetic-transition buffer.
//!
//! Each trajectory starts from a logged state and steps the ensemble for at
//! most `h` steps. A step is admitted while the accumulated uncertainty stays
//! within the threshold; the first step that exceeds it ends the trajectory
//! without being stored.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dynamics::{sample_from, DynamicsEnsemble};
use crate::env::{Dataset, Environment, Policy, Transition};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::rollout::CvaeModel;
use crate::truncation::{advance, pessimistic_reward, Threshold, TruncationConfig, TruncationState};

/// Produces one action per state; each row owns its random stream.
pub trait ActionSource: Sync {
    fn actions(&self, states: &[&[f64]], rngs: &mut [Rng]) -> Result<Vec<Vec<f64>>>;
}

impl ActionSource for CvaeModel {
    fn actions(&self, states: &[&[f64]], rngs: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
        self.sample_actions(states, rngs)
    }
}

/// Adapts any per-state [`Policy`].
pub struct PolicySource<'a>(pub &'a dyn Policy);

impl ActionSource for PolicySource<'_> {
    fn actions(&self, states: &[&[f64]], rngs: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
        states.iter().zip(rngs).map(|(s, r)| self.0.act(s, r)).collect()
    }
}

/// Adapts a closure `(s, rng) -> a`.
pub struct FnSource<F>(pub F);

impl<F> ActionSource for FnSource<F>
where
    F: Fn(&[f64], &mut Rng) -> Vec<f64> + Sync,
{
    fn actions(&self, states: &[&[f64]], rngs: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
        Ok(states.iter().zip(rngs).map(|(s, r)| (self.0)(s, r)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSourceKind {
    LearnedPolicy,
    #[default]
    Cvae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub truncation: TruncationConfig,
    pub batch_size: usize,
    pub real_ratio: f64,
    pub action_source: ActionSourceKind,
    pub n_start_states: usize,
    pub buffer_capacity: usize,
    pub n_threads: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            truncation: TruncationConfig::default(),
            batch_size: 256,
            real_ratio: 0.7,
            action_source: ActionSourceKind::Cvae,
            n_start_states: 1000,
            buffer_capacity: 1_000_000,
            n_threads: 1,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        self.truncation.validate()?;
        if !(0.0..=1.0).contains(&self.real_ratio) {
            return Err(Error::param(format!("real_ratio must lie in [0, 1], got {}", self.real_ratio)));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.n_threads == 0 {
            return Err(Error::param("batch_size, buffer_capacity and n_threads must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub trajectory: u64,
    pub step: usize,
    /// Per-step uncertainty after clipping.
    pub u: f64,
    /// Accumulated uncertainty including this step.
    pub u_accum: f64,
    /// Threshold of the run that admitted the transition.
    pub epsilon: f64,
}

/// FIFO store of synthetic transitions with per-transition provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBuffer {
    capacity: usize,
    transitions: VecDeque<Transition>,
    provenance: VecDeque<Provenance>,
}

impl ModelBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            transitions: VecDeque::new(),
            provenance: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Appends, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, t: Transition, p: Provenance) {
        self.transitions.push_back(t);
        self.provenance.push_back(p);
        while self.transitions.len() > self.capacity {
            self.transitions.pop_front();
            self.provenance.pop_front();
        }
    }

    pub fn extend(&mut self, other: ModelBuffer) {
        for (t, p) in other.transitions.into_iter().zip(other.provenance) {
            self.push(t, p);
        }
    }

    pub fn transition(&self, i: usize) -> &Transition {
        &self.transitions[i]
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.transitions.iter()
    }

    pub fn provenance(&self) -> impl Iterator<Item = &Provenance> {
        self.provenance.iter()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Transition, &Provenance)> {
        self.transitions.iter().zip(&self.provenance)
    }

    /// Checks the admission contract and per-trajectory step numbering.
    /// Evicted prefixes are allowed, so a trajectory may start past step 0
    /// only if it is the oldest one present.
    pub fn check_invariants(&self) -> Result<()> {
        let mut next_step: BTreeMap<u64, usize> = BTreeMap::new();
        for (i, p) in self.provenance.iter().enumerate() {
            if p.u_accum > p.epsilon {
                return Err(Error::data(format!(
                    "entry {i} admitted with U = {} above epsilon {}",
                    p.u_accum, p.epsilon
                )));
            }
            let expected = next_step.get(&p.trajectory).copied();
            let ok = match expected {
                Some(step) => p.step == step,
                None => p.step == 0 || self.provenance.front().is_some_and(|f| f.trajectory == p.trajectory),
            };
            if !ok {
                return Err(Error::data(format!(
                    "entry {i}: trajectory {} has non-consecutive step {}",
                    p.trajectory, p.step
                )));
            }
            next_step.insert(p.trajectory, p.step + 1);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub start: Vec<f64>,
    pub transitions: Vec<Transition>,
    pub provenance: Vec<Provenance>,
    /// True when the threshold stopped the rollout before `h` steps.
    pub truncated: bool,
    /// Clipped uncertainty of the rejected step, if any.
    pub rejected_u: Option<f64>,
}

struct Rollout {
    id: u64,
    rng: Rng,
    state: Vec<f64>,
    trunc: TruncationState,
    out: Trajectory,
}

/// Steps a group of trajectories in lockstep batches.
fn roll_group(
    ensemble: &DynamicsEnsemble,
    env: &dyn Environment,
    source: &dyn ActionSource,
    threshold: &Threshold,
    cfg: &TruncationConfig,
    starts: &[(u64, Vec<f64>)],
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let mut live: Vec<Rollout> = starts
        .iter()
        .map(|(id, s)| Rollout {
            id: *id,
            rng: rng_from_seed(derive_seed(seed, *id)),
            state: s.clone(),
            trunc: TruncationState::default(),
            out: Trajectory {
                id: *id,
                start: s.clone(),
                transitions: Vec::new(),
                provenance: Vec::new(),
                truncated: false,
                rejected_u: None,
            },
        })
        .collect();
    let mut done = Vec::with_capacity(live.len());
    for _ in 0..cfg.horizon {
        if live.is_empty() {
            break;
        }
        let states: Vec<Vec<f64>> = live.iter().map(|r| r.state.clone()).collect();
        let state_refs: Vec<&[f64]> = states.iter().map(Vec::as_slice).collect();
        let mut rngs: Vec<Rng> = live.iter().map(|r| r.rng.clone()).collect();
        let actions = source.actions(&state_refs, &mut rngs)?;
        let action_refs: Vec<&[f64]> = actions.iter().map(Vec::as_slice).collect();
        let pred = ensemble.predict_batch(&state_refs, &action_refs)?;
        let mut still = Vec::with_capacity(live.len());
        for (i, (mut r, rng)) in live.into_iter().zip(rngs).enumerate() {
            r.rng = rng;
            let point = pred.point(i);
            let u = threshold.clip(cfg.quantifier.apply(&point)?);
            let next = advance(r.trunc, u, cfg, threshold.epsilon)?;
            if next.truncated {
                r.out.truncated = true;
                r.out.rejected_u = Some(u);
                if cfg.apply_kappa_to_last_admitted {
                    if let Some(last) = r.out.transitions.last_mut() {
                        last.r -= cfg.kappa;
                    }
                }
                done.push(r.out);
                continue;
            }
            let s_next = sample_from(&point, &mut r.rng);
            let reward = env.reward(&r.state, &actions[i], &s_next)?;
            r.out.provenance.push(Provenance {
                trajectory: r.id,
                step: r.trunc.step,
                u,
                u_accum: next.u_accum,
                epsilon: threshold.epsilon,
            });
            r.out.transitions.push(Transition {
                s: r.state.clone(),
                a: actions[i].clone(),
                r: pessimistic_reward(reward, u, cfg, false),
                s_next: s_next.clone(),
                done: false,
            });
            r.trunc = next;
            r.state = s_next;
            still.push(r);
        }
        live = still;
    }
    done.extend(live.into_iter().map(|r| r.out));
    Ok(done)
}

/// Uniform draws of start states from the dataset's start pool.
pub fn sample_start_states(dataset: &Dataset, n: usize, first_id: u64, seed: u64) -> Result<Vec<(u64, Vec<f64>)>> {
    if dataset.start_state_pool.is_empty() {
        return Err(Error::data("dataset has no start states"));
    }
    let mut rng = rng_from_seed(seed);
    Ok((0..n as u64)
        .map(|k| {
            let idx = dataset.start_state_pool[rng.random_range(0..dataset.start_state_pool.len())];
            (first_id + k, dataset.transitions[idx].s.clone())
        })
        .collect())
}

/// Rolls the given start states, optionally split across worker threads.
///
/// Every trajectory draws from its own stream derived from `(seed, id)`, so
/// the result does not depend on `n_threads`.
pub fn roll_from_starts(
    ensemble: &DynamicsEnsemble,
    env: &dyn Environment,
    source: &dyn ActionSource,
    threshold: &Threshold,
    cfg: &TruncationConfig,
    starts: &[(u64, Vec<f64>)],
    n_threads: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    if !ensemble.is_fitted() {
        return Err(Error::Unfitted("dynamics ensemble"));
    }
    if n_threads <= 1 || starts.len() < 2 {
        return roll_group(ensemble, env, source, threshold, cfg, starts, seed);
    }
    let chunk = starts.len().div_ceil(n_threads);
    let parts: Vec<Result<Vec<Trajectory>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = starts
            .chunks(chunk)
            .map(|c| scope.spawn(move || roll_group(ensemble, env, source, threshold, cfg, c, seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::numeric("rollout worker panicked"))))
            .collect()
    });
    let mut out = Vec::with_capacity(starts.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn buffer_from(trajectories: &[Trajectory], capacity: usize) -> ModelBuffer {
    let mut buf = ModelBuffer::new(capacity);
    for tr in trajectories {
        for (t, p) in tr.transitions.iter().zip(&tr.provenance) {
            buf.push(t.clone(), *p);
        }
    }
    buf
}

/// One generation round: `config.n_start_states` truncated trajectories and
/// the buffer entries they contribute. Rewards come from the environment's
/// reward rule, penalized by `lambda u`.
pub fn generate_truncated_trajectories(
    ensemble: &DynamicsEnsemble,
    dataset: &Dataset,
    source: &dyn ActionSource,
    threshold: &Threshold,
    config: &AugmentationConfig,
    seed: u64,
) -> Result<(Vec<Trajectory>, ModelBuffer)> {
    generate_round(ensemble, dataset, source, threshold, config, 0, seed)
}

fn generate_round(
    ensemble: &DynamicsEnsemble,
    dataset: &Dataset,
    source: &dyn ActionSource,
    threshold: &Threshold,
    config: &AugmentationConfig,
    first_id: u64,
    seed: u64,
) -> Result<(Vec<Trajectory>, ModelBuffer)> {
    config.validate()?;
    let env = dataset.descriptor.spec.build()?;
    let starts = sample_start_states(dataset, config.n_start_states, first_id, derive_seed(seed, 0))?;
    let trajectories = roll_from_starts(
        ensemble,
        env.as_ref(),
        source,
        threshold,
        &config.truncation,
        &starts,
        config.n_threads,
        derive_seed(seed, 1),
    )?;
    let delta = buffer_from(&trajectories, usize::MAX);
    Ok((trajectories, delta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins on `[0, max(values)]`; the last bin is closed.
    pub fn of(values: &[f64], bins: usize) -> Self {
        let hi = values.iter().copied().fold(0.0, f64::max);
        let width = if hi > 0.0 { hi / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| i as f64 * width).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let k = ((v / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub n_trajectories: usize,
    pub n_transitions: usize,
    pub mean_length: f64,
    /// Fraction of trajectories stopped by the threshold.
    pub rejection_rate: f64,
    pub full_length_fraction: f64,
    pub admitted_u: Histogram,
    pub rejected_u: Histogram,
}

pub const HISTOGRAM_BINS: usize = 20;

impl GenerationStats {
    pub fn from_trajectories(trajectories: &[Trajectory], horizon: usize) -> Self {
        let n = trajectories.len();
        let n_transitions: usize = trajectories.iter().map(|t| t.transitions.len()).sum();
        let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        let admitted: Vec<f64> = trajectories
            .iter()
            .flat_map(|t| t.provenance.iter().map(|p| p.u))
            .collect();
        let rejected: Vec<f64> = trajectories.iter().filter_map(|t| t.rejected_u).collect();
        Self {
            n_trajectories: n,
            n_transitions,
            mean_length: frac(n_transitions),
            rejection_rate: frac(trajectories.iter().filter(|t| t.truncated).count()),
            full_length_fraction: frac(trajectories.iter().filter(|t| t.transitions.len() == horizon).count()),
            admitted_u: Histogram::of(&admitted, HISTOGRAM_BINS),
            rejected_u: Histogram::of(&rejected, HISTOGRAM_BINS),
        }
    }

    /// Recomputes the admitted-side statistics from buffer provenance alone.
    /// Valid while nothing has been evicted; `n_trajectories` counts the
    /// rollouts that contributed nothing.
    pub fn admitted_from_buffer(buffer: &ModelBuffer, n_trajectories: usize, horizon: usize) -> (f64, f64, Histogram) {
        let mut lengths: BTreeMap<u64, usize> = BTreeMap::new();
        for p in buffer.provenance() {
            *lengths.entry(p.trajectory).or_default() += 1;
        }
        let full = lengths.values().filter(|&&l| l == horizon).count();
        let us: Vec<f64> = buffer.provenance().map(|p| p.u).collect();
        let n = n_trajectories.max(1) as f64;
        (buffer.len() as f64 / n, full as f64 / n, Histogram::of(&us, HISTOGRAM_BINS))
    }
}

/// Runs `n_epochs` generation rounds into one buffer.
pub fn run_augmentation_epochs(
    ensemble: &DynamicsEnsemble,
    dataset: &Dataset,
    source: &dyn ActionSource,
    threshold: &Threshold,
    config: &AugmentationConfig,
    n_epochs: usize,
    seed: u64,
) -> Result<(ModelBuffer, GenerationStats)> {
    let mut buffer = ModelBuffer::new(config.buffer_capacity);
    let mut all = Vec::new();
    for epoch in 0..n_epochs {
        let first_id = (epoch * config.n_start_states) as u64;
        let (trajectories, delta) = generate_round(
            ensemble,
            dataset,
            source,
            threshold,
            config,
            first_id,
            derive_seed(seed, epoch as u64),
        )?;
        buffer.extend(delta);
        all.extend(trajectories);
    }
    let stats = GenerationStats::from_trajectories(&all, config.truncation.horizon);
    log::info!(
        "augmentation: {} trajectories, mean length {:.3}, rejection rate {:.3}",
        stats.n_trajectories,
        stats.mean_length,
        stats.rejection_rate
    );
    Ok((buffer, stats))
}

/// Something that serves training batches.
pub trait BatchSource {
    fn sample<'a>(&'a self, batch_size: usize, rng: &mut Rng) -> Result<Vec<&'a Transition>>;
}

/// Uniform sampling with replacement from the logged data only.
pub struct RealOnly<'a>(pub &'a Dataset);

impl BatchSource for RealOnly<'_> {
    fn sample<'a>(&'a self, batch_size: usize, rng: &mut Rng) -> Result<Vec<&'a Transition>> {
        real_draws(self.0, batch_size, rng)
    }
}

fn real_draws<'a>(dataset: &'a Dataset, k: usize, rng: &mut Rng) -> Result<Vec<&'a Transition>> {
    if dataset.is_empty() {
        return Err(Error::data("cannot sample from an empty dataset"));
    }
    Ok((0..k).map(|_| &dataset.transitions[rng.random_range(0..dataset.len())]).collect())
}

/// Real and synthetic data at ratio `eta`.
pub struct Mixed<'a> {
    pub dataset: &'a Dataset,
    pub buffer: &'a ModelBuffer,
    pub eta: f64,
}

impl BatchSource for Mixed<'_> {
    fn sample<'a>(&'a self, batch_size: usize, rng: &mut Rng) -> Result<Vec<&'a Transition>> {
        mixed_draws(self.dataset, self.buffer, self.eta, batch_size, rng)
    }
}

/// `floor(eta B)` real draws first, then the synthetic remainder. An empty
/// buffer falls back to all-real.
fn mixed_draws<'a>(
    dataset: &'a Dataset,
    buffer: &'a ModelBuffer,
    eta: f64,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<&'a Transition>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::param(format!("eta must lie in [0, 1], got {eta}")));
    }
    if batch_size == 0 {
        return Err(Error::param("batch size must be positive"));
    }
    if buffer.is_empty() {
        if eta < 1.0 {
            log::info!("model buffer is empty; serving an all-real batch");
        }
        return real_draws(dataset, batch_size, rng);
    }
    let n_real = (eta * batch_size as f64).floor() as usize;
    let mut out = real_draws(dataset, n_real, rng)?;
    out.extend((n_real..batch_size).map(|_| buffer.transition(rng.random_range(0..buffer.len()))));
    Ok(out)
}

/// One mixed batch, deterministic in `seed`.
pub fn mixed_batch(
    dataset: &Dataset,
    buffer: &ModelBuffer,
    eta: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Transition>> {
    let mut rng = rng_from_seed(seed);
    Ok(mixed_draws(dataset, buffer, eta, batch_size, &mut rng)?
        .into_iter()
        .cloned()
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{EnsembleConfig, QuantifierConfig};
    use crate::env::{EnvSpec, PointMassConfig};
    use crate::nn::{Activation, Mlp, Normalizer};

    /// Members ignore their input: member `k` shifts every state by `k * step`
    /// with a fixed variance, so `u` is the same everywhere.
    fn planted(step: f64) -> DynamicsEnsemble {
        let cfg = EnsembleConfig {
            n_total: 3,
            n_elites: 3,
            ..Default::default()
        };
        let members = (0..3)
            .map(|k| {
                let mut m = Mlp::zeros(vec![6, 8], vec![Activation::Identity]).unwrap();
                let n = m.n_params();
                for d in 0..4 {
                    m.params_mut()[n - 8 + d] = k as f64 * step;
                    m.params_mut()[n - 4 + d] = -6.0;
                }
                m
            })
            .collect();
        DynamicsEnsemble::from_members(cfg, 4, 2, members, vec![0, 1, 2], Normalizer::identity(6), vec![0.01; 4])
            .unwrap()
    }

    fn dataset(n: usize) -> Dataset {
        let spec = EnvSpec::PointMass(PointMassConfig::default());
        let env = spec.build().unwrap();
        let mut rng = rng_from_seed(3);
        let ts = (0..n)
            .map(|_| {
                let s = env.reset(&mut rng);
                Transition {
                    s: s.clone(),
                    a: vec![0.0, 0.0],
                    r: 0.0,
                    s_next: s,
                    done: false,
                }
            })
            .collect();
        Dataset::new(spec.descriptor().unwrap(), "planted", ts, vec![0]).unwrap()
    }

    fn zero_actions() -> FnSource<impl Fn(&[f64], &mut Rng) -> Vec<f64> + Sync> {
        FnSource(|_: &[f64], _: &mut Rng| vec![0.0, 0.0])
    }

    fn config(h: usize, n: usize) -> AugmentationConfig {
        AugmentationConfig {
            truncation: TruncationConfig {
                horizon: h,
                quantifier: QuantifierConfig::morel(),
                ..Default::default()
            },
            n_start_states: n,
            ..Default::default()
        }
    }

    fn constant_u(ens: &DynamicsEnsemble, q: &QuantifierConfig) -> f64 {
        q.apply(&ens.predict(&[0.1, 0.2, 0.0, 0.0], &[0.0, 0.0]).unwrap()).unwrap()
    }

    fn threshold_at(eps: f64, cfg: &TruncationConfig) -> Threshold {
        Threshold {
            epsilon: eps,
            ..Threshold::disabled(cfg)
        }
    }

    #[test]
    fn infinite_threshold_keeps_full_trajectories() {
        let (ens, ds, cfg) = (planted(1.0), dataset(50), config(5, 40));
        let t = Threshold::disabled(&cfg.truncation);
        let (trs, delta) = generate_truncated_trajectories(&ens, &ds, &zero_actions(), &t, &cfg, 1).unwrap();
        assert_eq!(trs.len(), 40);
        assert!(trs.iter().all(|t| t.transitions.len() == 5 && !t.truncated));
        assert_eq!(delta.len(), 200);
        delta.check_invariants().unwrap();
    }

    #[test]
    fn zero_threshold_admits_nothing() {
        let (ens, ds, cfg) = (planted(1.0), dataset(50), config(5, 40));
        let t = threshold_at(0.0, &cfg.truncation);
        let (trs, delta) = generate_truncated_trajectories(&ens, &ds, &zero_actions(), &t, &cfg, 1).unwrap();
        assert!(delta.is_empty());
        assert!(trs.iter().all(|t| t.truncated && t.transitions.is_empty()));
    }

    #[test]
    fn constant_uncertainty_truncates_after_two_steps() {
        let (ens, ds, cfg) = (planted(1.0), dataset(50), config(5, 30));
        let c = constant_u(&ens, &cfg.truncation.quantifier);
        assert!(c > 0.0);
        let t = threshold_at(2.5 * c, &cfg.truncation);
        let (trs, delta) = generate_truncated_trajectories(&ens, &ds, &zero_actions(), &t, &cfg, 2).unwrap();
        assert!(trs.iter().all(|t| t.transitions.len() == 2 && t.truncated));
        delta.check_invariants().unwrap();
        for (tr, p) in delta.entries() {
            let expected_r = -(tr.s_next[0].hypot(tr.s_next[1])) - c;
            assert!((tr.r - expected_r).abs() < 1e-12);
            assert!(p.u_accum <= 2.5 * c);
        }
    }

    #[test]
    fn kappa_on_last_admitted_is_optional() {
        let (ens, ds, mut cfg) = (planted(1.0), dataset(20), config(5, 10));
        cfg.truncation.kappa = 3.0;
        let c = constant_u(&ens, &cfg.truncation.quantifier);
        let t = threshold_at(2.5 * c, &cfg.truncation);
        let (plain, _) = generate_truncated_trajectories(&ens, &ds, &zero_actions(), &t, &cfg, 4).unwrap();
        cfg.truncation.apply_kappa_to_last_admitted = true;
        let (kappa, _) = generate_truncated_trajectories(&ens, &ds, &zero_actions(), &t, &cfg, 4).unwrap();
        for (a, b) in plain.iter().zip(&kappa) {
            assert_eq!(a.transitions[0], b.transitions[0]);
            assert!((a.transitions[1].r - 3.0 - b.transitions[1].r).abs() < 1e-12);
        }
    }

    #[test]
    fn horizon_one_bounds_length() {
        let (ens, ds, cfg) = (planted(1.0), dataset(20), config(1, 25));
        let t = Threshold::disabled(&cfg.truncation);
        let (buf, stats) = run_augmentation_epochs(&ens, &ds, &zero_actions(), &t, &cfg, 2, 5).unwrap();
        assert!(stats.mean_length <= 1.0);
        assert_eq!(stats.n_trajectories, 50);
        assert_eq!(buf.len(), 50);
    }

    #[test]
    fn stats_agree_with_buffer_provenance() {
        let (ens, ds, cfg) = (planted(1.0), dataset(20), config(5, 25));
        let c = constant_u(&ens, &cfg.truncation.quantifier);
        let t = threshold_at(4.0 * c, &cfg.truncation);
        let (buf, stats) = run_augmentation_epochs(&ens, &ds, &zero_actions(), &t, &cfg, 3, 5).unwrap();
        let (mean, full, hist) = GenerationStats::admitted_from_buffer(&buf, stats.n_trajectories, 5);
        assert_eq!(mean, stats.mean_length);
        assert_eq!(full, stats.full_length_fraction);
        assert_eq!(hist, stats.admitted_u);
        assert_eq!(stats.rejection_rate, 1.0);
        assert_eq!(stats.rejected_u.counts.iter().sum::<usize>(), 75);
    }

    #[test]
    fn generation_is_deterministic_and_thread_independent() {
        let ens = planted(1.0);
        let ds = dataset(50);
        let mut cfg = config(5, 37);
        let noisy = FnSource(|s: &[f64], r: &mut Rng| vec![r.random_range(-1.0..1.0), s[0].tanh()]);
        let t = Threshold::disabled(&cfg.truncation);
        let (a, _) = generate_truncated_trajectories(&ens, &ds, &noisy, &t, &cfg, 9).unwrap();
        let (b, _) = generate_truncated_trajectories(&ens, &ds, &noisy, &t, &cfg, 9).unwrap();
        assert_eq!(a, b);
        cfg.n_threads = 4;
        let (c, _) = generate_truncated_trajectories(&ens, &ds, &noisy, &t, &cfg, 9).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn unfitted_ensemble_is_rejected() {
        let mut ens = planted(1.0);
        ens.elites.clear();
        let (ds, cfg) = (dataset(5), config(5, 3));
        let t = Threshold::disabled(&cfg.truncation);
        let err = generate_truncated_trajectories(&ens, &ds, &zero_actions(), &t, &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::Unfitted(_)));
    }

    fn tagged_buffer(n: usize) -> ModelBuffer {
        let mut b = ModelBuffer::new(n.max(1));
        for i in 0..n {
            let t = Transition {
                s: vec![99.0],
                a: vec![0.0],
                r: i as f64,
                s_next: vec![0.0],
                done: false,
            };
            b.push(
                t,
                Provenance {
                    trajectory: i as u64,
                    step: 0,
                    u: 0.0,
                    u_accum: 0.0,
                    epsilon: 1.0,
                },
            );
        }
        b
    }

    fn is_real(t: &Transition) -> bool {
        t.s[0] < 50.0
    }

    #[test]
    fn mixed_batch_split() {
        let ds = dataset(30);
        let buf = tagged_buffer(10);
        let count = |eta, b| {
            let batch = mixed_batch(&ds, &buf, eta, b, 7).unwrap();
            assert_eq!(batch.len(), b);
            batch.iter().filter(|t| is_real(t)).count()
        };
        assert_eq!(count(1.0, 16), 16);
        assert_eq!(count(0.0, 16), 0);
        assert_eq!(count(0.7, 10), 7);
        assert_eq!(count(0.05, 256), 12);
        let empty = ModelBuffer::new(4);
        assert!(mixed_batch(&ds, &empty, 0.0, 8, 1).unwrap().iter().all(is_real));
        assert!(mixed_batch(&ds, &buf, 1.5, 8, 1).is_err());
    }

    #[test]
    fn eta_one_matches_real_only_sampling() {
        let ds = dataset(30);
        let buf = tagged_buffer(10);
        let mixed = Mixed {
            dataset: &ds,
            buffer: &buf,
            eta: 1.0,
        };
        let (mut r1, mut r2) = (rng_from_seed(4), rng_from_seed(4));
        for _ in 0..5 {
            assert_eq!(
                mixed.sample(32, &mut r1).unwrap(),
                RealOnly(&ds).sample(32, &mut r2).unwrap()
            );
        }
    }

    #[test]
    fn buffer_evicts_oldest_first() {
        let extra = tagged_buffer(5);
        let mut small = ModelBuffer::new(3);
        small.extend(extra);
        assert_eq!(small.len(), 3);
        let rs: Vec<f64> = small.transitions().map(|t| t.r).collect();
        assert_eq!(rs, vec![2.0, 3.0, 4.0]);
        small.check_invariants().unwrap();
    }
}
