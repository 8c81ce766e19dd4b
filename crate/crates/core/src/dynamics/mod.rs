//! Probabilistic ensemble of next-state models.
//!
//! Each member maps normalized `(s, a)` to a diagonal Gaussian over the
//! scaled state delta `(s' - s) / delta_scale`. Members train on their own
//! bootstrap of the training split; the best members on held-out negative
//! log-likelihood become the elites used for sampling and uncertainty.

pub mod uncertainty;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::nn::losses::gaussian_nll_batch;
use crate::nn::{stack_pairs, stack_rows, Activation, Adam, AdamConfig, LogVarClamp, Mlp, Normalizer};
use crate::rng::{derive_seed, rng_from_seed, Rng};

pub use uncertainty::{
    dataset_max_uncertainty, uncertainty_mopo, uncertainty_morel, GaussianPrediction, QuantifierConfig,
    QuantifierKind, UncertaintyModel,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub n_total: usize,
    pub n_elites: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Upper bound on the held-out split; at most a fifth of the data is held out.
    pub validation_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub logvar_clamp: LogVarClamp,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_total: 7,
            n_elites: 5,
            hidden: vec![64, 64, 64],
            activation: Activation::Swish,
            validation_size: 1000,
            epochs: 30,
            batch_size: 256,
            lr: 1e-3,
            logvar_clamp: LogVarClamp::default(),
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_elites == 0 || self.n_elites > self.n_total {
            return Err(Error::param(format!(
                "need 1 <= n_elites <= n_total, got {} of {}",
                self.n_elites, self.n_total
            )));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::param("batch_size and lr must be positive"));
        }
        if !(self.logvar_clamp.min < self.logvar_clamp.max) {
            return Err(Error::param("logvar clamp needs min < max"));
        }
        Ok(())
    }
}

/// Indices of the `n_elites` lowest losses, ties going to the lower index.
pub fn select_elites(losses: &[f64], n_elites: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    idx.truncate(n_elites);
    idx
}

/// Elite predictions for a batch of pairs: one `(batch, state_dim)` matrix
/// of means and one of variances per elite.
#[derive(Debug, Clone)]
pub struct BatchPrediction {
    pub means: Vec<Array2<f64>>,
    pub variances: Vec<Array2<f64>>,
}

impl BatchPrediction {
    pub fn point(&self, i: usize) -> GaussianPrediction {
        GaussianPrediction {
            means: self.means.iter().map(|m| m.row(i).to_vec()).collect(),
            variances: self.variances.iter().map(|v| v.row(i).to_vec()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.means.first().map_or(0, |m| m.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsEnsemble {
    pub config: EnsembleConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    pub members: Vec<Mlp>,
    pub elites: Vec<usize>,
    pub input_norm: Normalizer,
    pub delta_scale: Vec<f64>,
    /// Final held-out NLL per member.
    pub validation_losses: Vec<f64>,
    /// Held-out NLL per member after each epoch.
    pub history: Vec<Vec<f64>>,
}

struct Split {
    x: Array2<f64>,
    y: Array2<f64>,
}

impl DynamicsEnsemble {
    /// Assembles an ensemble from given members; no training happens.
    pub fn from_members(
        config: EnsembleConfig,
        state_dim: usize,
        action_dim: usize,
        members: Vec<Mlp>,
        elites: Vec<usize>,
        input_norm: Normalizer,
        delta_scale: Vec<f64>,
    ) -> Result<Self> {
        check_dim("ensemble members", config.n_total, members.len())?;
        check_dim("input normalizer", state_dim + action_dim, input_norm.dim())?;
        check_dim("delta scale", state_dim, delta_scale.len())?;
        for m in &members {
            check_dim("member input", state_dim + action_dim, m.input_dim())?;
            check_dim("member output", 2 * state_dim, m.output_dim())?;
        }
        let mut seen = elites.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != elites.len() || elites.iter().any(|&e| e >= members.len()) {
            return Err(Error::param(format!("invalid elite set {elites:?}")));
        }
        let n = members.len();
        Ok(Self {
            config,
            state_dim,
            action_dim,
            members,
            elites,
            input_norm,
            delta_scale,
            validation_losses: vec![f64::NAN; n],
            history: vec![Vec::new(); n],
        })
    }

    pub fn is_fitted(&self) -> bool {
        !self.elites.is_empty()
    }

    fn member_output(&self, m: &Mlp, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = m.forward_batch(x)?;
        let d = self.state_dim;
        let mean = out.slice(s![.., ..d]).to_owned();
        let lv = out.slice(s![.., d..]).mapv(|r| self.config.logvar_clamp.apply(r).0);
        Ok((mean, lv))
    }

    /// Predictions of every elite member for a batch of pairs.
    pub fn predict_batch(&self, states: &[&[f64]], actions: &[&[f64]]) -> Result<BatchPrediction> {
        if !self.is_fitted() {
            return Err(Error::Unfitted("dynamics ensemble"));
        }
        let s_mat = stack_rows(states, self.state_dim)?;
        let x = stack_pairs(states, actions, self.state_dim, self.action_dim)?;
        let x = self.input_norm.apply(x.view());
        let scale = ArrayView2::from_shape((1, self.state_dim), &self.delta_scale).unwrap();
        let scale_sq = scale.mapv(|v| v * v);
        let mut means = Vec::with_capacity(self.elites.len());
        let mut variances = Vec::with_capacity(self.elites.len());
        for &e in &self.elites {
            let (delta, lv) = self.member_output(&self.members[e], x.view())?;
            means.push(&s_mat + &(&delta * &scale));
            variances.push(lv.mapv(f64::exp) * &scale_sq);
        }
        Ok(BatchPrediction { means, variances })
    }

    pub fn predict(&self, s: &[f64], a: &[f64]) -> Result<GaussianPrediction> {
        Ok(self.predict_batch(&[s], &[a])?.point(0))
    }

    /// Validation-split MSE of the elite means against logged next states.
    pub fn mean_squared_error(&self, dataset: &Dataset) -> Result<f64> {
        let states: Vec<&[f64]> = dataset.transitions.iter().map(|t| t.s.as_slice()).collect();
        let actions: Vec<&[f64]> = dataset.transitions.iter().map(|t| t.a.as_slice()).collect();
        let pred = self.predict_batch(&states, &actions)?;
        let mut total = 0.0;
        for m in &pred.means {
            for (row, t) in m.rows().into_iter().zip(&dataset.transitions) {
                total += row.iter().zip(&t.s_next).map(|(p, y)| (p - y).powi(2)).sum::<f64>();
            }
        }
        Ok(total / (pred.means.len() * dataset.len() * self.state_dim) as f64)
    }
}

/// Draws one elite uniformly and samples from its Gaussian.
pub fn sample_from(pred: &GaussianPrediction, rng: &mut Rng) -> Vec<f64> {
    let k = rng.random_range(0..pred.n_members());
    pred.means[k]
        .iter()
        .zip(&pred.variances[k])
        .map(|(m, v)| {
            let z: f64 = StandardNormal.sample(rng);
            m + v.sqrt() * z
        })
        .collect()
}

/// Samples `s'` from one uniformly chosen elite; also returns all elite predictions.
pub fn predict_next(
    ensemble: &DynamicsEnsemble,
    s: &[f64],
    a: &[f64],
    seed: u64,
) -> Result<(Vec<f64>, GaussianPrediction)> {
    let pred = ensemble.predict(s, a)?;
    let mut rng = rng_from_seed(seed);
    Ok((sample_from(&pred, &mut rng), pred))
}

impl UncertaintyModel for DynamicsEnsemble {
    fn uncertainties(&self, states: &[&[f64]], actions: &[&[f64]], q: &QuantifierConfig) -> Result<Vec<f64>> {
        const CHUNK: usize = 2048;
        let mut out = Vec::with_capacity(states.len());
        for (s, a) in states.chunks(CHUNK).zip(actions.chunks(CHUNK)) {
            let pred = self.predict_batch(s, a)?;
            for i in 0..pred.len() {
                out.push(q.apply(&pred.point(i))?);
            }
        }
        Ok(out)
    }
}

fn split_rows(x: &Array2<f64>, y: &Array2<f64>, idx: &[usize]) -> Split {
    Split {
        x: x.select(Axis(0), idx),
        y: y.select(Axis(0), idx),
    }
}

/// Mean NLL of one member on `(x, y)` in scaled units, with its gradient.
pub fn member_loss(
    m: &Mlp,
    clamp: &LogVarClamp,
    d: usize,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
) -> Result<(f64, Vec<f64>)> {
    m.grad(x, |out| {
        let mean = out.slice(s![.., ..d]);
        let raw = out.slice(s![.., d..]);
        let lv_and_d = raw.mapv(|r| clamp.apply(r));
        let lv = lv_and_d.mapv(|p| p.0);
        let (loss, d_mean, d_lv) = gaussian_nll_batch(mean, lv.view(), y)?;
        let d_raw = &d_lv * &lv_and_d.mapv(|p| p.1);
        Ok((loss, concatenate(Axis(1), &[d_mean.view(), d_raw.view()]).unwrap()))
    })
}

fn member_nll(m: &Mlp, clamp: &LogVarClamp, d: usize, split: &Split) -> Result<f64> {
    let out = m.forward_batch(split.x.view())?;
    let lv = out.slice(s![.., d..]).mapv(|r| clamp.apply(r).0);
    Ok(gaussian_nll_batch(out.slice(s![.., ..d]), lv.view(), split.y.view())?.0)
}

/// Trains the ensemble on `dataset`; deterministic in `seed`.
pub fn train_ensemble(dataset: &Dataset, config: &EnsembleConfig, seed: u64) -> Result<DynamicsEnsemble> {
    config.validate()?;
    dataset.validate()?;
    let n = dataset.len();
    let n_val = config.validation_size.min(n / 5);
    if n_val == 0 {
        return Err(Error::data(format!(
            "dataset of {n} transitions is too small to hold out a validation split"
        )));
    }
    let (ds, da) = (dataset.descriptor.state_dim, dataset.descriptor.action_dim);
    let states: Vec<&[f64]> = dataset.transitions.iter().map(|t| t.s.as_slice()).collect();
    let actions: Vec<&[f64]> = dataset.transitions.iter().map(|t| t.a.as_slice()).collect();
    let raw_x = stack_pairs(&states, &actions, ds, da)?;
    let delta: Vec<Vec<f64>> = dataset
        .transitions
        .iter()
        .map(|t| t.s_next.iter().zip(&t.s).map(|(b, a)| b - a).collect())
        .collect();
    let delta_rows: Vec<&[f64]> = delta.iter().map(Vec::as_slice).collect();
    let raw_y = stack_rows(&delta_rows, ds)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, 0)));
    let (train_idx, val_idx) = order.split_at(n - n_val);

    let train_raw = split_rows(&raw_x, &raw_y, train_idx);
    let input_norm = Normalizer::fit(train_raw.x.view());
    // Scale only, no shift: a zero network output must mean "no change".
    let delta_scale = Normalizer::fit(train_raw.y.view()).std;
    let scale_y = |y: &Array2<f64>| {
        let mut y = y.clone();
        for mut row in y.rows_mut() {
            row.iter_mut().zip(&delta_scale).for_each(|(v, s)| *v /= s);
        }
        y
    };
    let train = Split {
        x: input_norm.apply(train_raw.x.view()),
        y: scale_y(&train_raw.y),
    };
    let val_raw = split_rows(&raw_x, &raw_y, val_idx);
    let val = Split {
        x: input_norm.apply(val_raw.x.view()),
        y: scale_y(&val_raw.y),
    };

    let mut members = Vec::with_capacity(config.n_total);
    let mut history = Vec::with_capacity(config.n_total);
    let mut validation_losses = Vec::with_capacity(config.n_total);
    for k in 0..config.n_total {
        let member_seed = derive_seed(seed, 1 + k as u64);
        let (m, h) = train_member(&train, &val, ds, config, member_seed)?;
        validation_losses.push(*h.last().unwrap_or(&member_nll(&m, &config.logvar_clamp, ds, &val)?));
        members.push(m);
        history.push(h);
    }
    let elites = select_elites(&validation_losses, config.n_elites);
    log::debug!("ensemble validation NLL {validation_losses:?}, elites {elites:?}");
    Ok(DynamicsEnsemble {
        config: config.clone(),
        state_dim: ds,
        action_dim: da,
        members,
        elites,
        input_norm,
        delta_scale,
        validation_losses,
        history,
    })
}

fn train_member(train: &Split, val: &Split, d: usize, config: &EnsembleConfig, seed: u64) -> Result<(Mlp, Vec<f64>)> {
    let mut rng = rng_from_seed(seed);
    let n_in = train.x.ncols();
    let mut m = Mlp::new(n_in, &config.hidden, 2 * d, config.activation, Activation::Identity, rng.random())?;
    let mut opt = Adam::new(m.n_params(), AdamConfig::with_lr(config.lr));
    let n = train.x.nrows();
    let mut boot: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        boot.shuffle(&mut rng);
        for batch in boot.chunks(config.batch_size) {
            let x = train.x.select(Axis(0), batch);
            let y = train.y.select(Axis(0), batch);
            let (_, g) = member_loss(&m, &config.logvar_clamp, d, x.view(), y.view())?;
            opt.step(m.params_mut(), &g)?;
        }
        history.push(member_nll(&m, &config.logvar_clamp, d, val)?);
    }
    Ok((m, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvDescriptor, EnvSpec, PointMassConfig, Transition};
    use crate::nn::gradcheck::check_gradient;

    pub(crate) fn descriptor(state_dim: usize, action_dim: usize) -> EnvDescriptor {
        EnvDescriptor {
            id: "planted".into(),
            state_dim,
            action_dim,
            action_bound: Some(1.0),
            horizon: 10,
            gamma: 0.99,
            spec: EnvSpec::PointMass(PointMassConfig::default()),
        }
    }

    /// `s' = s + B a` with states uniform in a box of the given radius.
    pub(crate) fn planted_linear(n: usize, radius: f64, seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        let b = [[0.5, 0.0], [0.0, 0.3], [0.2, -0.1]];
        let transitions = (0..n)
            .map(|_| {
                let s: Vec<f64> = (0..3).map(|_| rng.random_range(-radius..radius)).collect();
                let a: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                let s_next = (0..3).map(|i| s[i] + b[i][0] * a[0] + b[i][1] * a[1]).collect();
                Transition {
                    s,
                    a,
                    r: 0.0,
                    s_next,
                    done: false,
                }
            })
            .collect();
        Dataset::new(descriptor(3, 2), "planted", transitions, vec![0]).unwrap()
    }

    fn small_config() -> EnsembleConfig {
        EnsembleConfig {
            n_total: 3,
            n_elites: 2,
            hidden: vec![16, 16],
            epochs: 5,
            batch_size: 64,
            ..Default::default()
        }
    }

    #[test]
    fn elite_selection_examples() {
        assert_eq!(select_elites(&[3.0, 1.0, 2.0, 5.0, 4.0, 7.0, 6.0], 5), vec![1, 2, 0, 4, 3]);
        assert_eq!(select_elites(&[1.0; 7], 5), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_elites(&[2.0, 1.0, 3.0], 3), vec![1, 0, 2]);
    }

    #[test]
    fn elite_selection_is_permutation_stable() {
        let losses = [0.4, 0.1, 0.9, 0.1, 0.3];
        let elites = select_elites(&losses, 3);
        let perm = [4, 2, 0, 3, 1];
        let permuted: Vec<f64> = perm.iter().map(|&i| losses[i]).collect();
        let mut mapped: Vec<f64> = select_elites(&permuted, 3).iter().map(|&i| permuted[i]).collect();
        let mut want: Vec<f64> = elites.iter().map(|&i| losses[i]).collect();
        mapped.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        assert_eq!(mapped, want);
    }

    #[test]
    fn zero_delta_network_predicts_the_input_state() {
        let cfg = EnsembleConfig {
            n_total: 2,
            n_elites: 2,
            ..Default::default()
        };
        let members = vec![Mlp::zeros(vec![5, 4, 6], vec![Activation::Swish, Activation::Identity]).unwrap(); 2];
        let ens = DynamicsEnsemble::from_members(cfg, 3, 2, members, vec![0, 1], Normalizer::identity(5), vec![0.7, 2.0, 0.1])
            .unwrap();
        let s = [0.3, -1.25, 4.0];
        let pred = ens.predict(&s, &[0.5, 0.5]).unwrap();
        for m in &pred.means {
            assert_eq!(m.as_slice(), &s);
        }
    }

    #[test]
    fn clamped_variance_sample_stays_at_mean() {
        let cfg = EnsembleConfig {
            n_total: 1,
            n_elites: 1,
            ..Default::default()
        };
        // Bias of the log-variance outputs far below the clamp floor.
        let mut m = Mlp::zeros(vec![3, 4], vec![Activation::Identity]).unwrap();
        let n = m.n_params();
        m.params_mut()[n - 2..].fill(-1e3);
        let ens = DynamicsEnsemble::from_members(cfg.clone(), 2, 1, vec![m], vec![0], Normalizer::identity(3), vec![1.0; 2])
            .unwrap();
        let (next, pred) = predict_next(&ens, &[1.0, 2.0], &[0.0], 5).unwrap();
        let tol = (cfg.logvar_clamp.min / 2.0).exp() * 6.0;
        for (x, m) in next.iter().zip(&pred.means[0]) {
            assert!((x - m).abs() <= tol);
        }
        assert_eq!(predict_next(&ens, &[1.0, 2.0], &[0.0], 5).unwrap().0, next);
    }

    #[test]
    fn unfitted_ensemble_is_rejected() {
        let cfg = EnsembleConfig {
            n_total: 1,
            n_elites: 1,
            ..Default::default()
        };
        let m = Mlp::zeros(vec![3, 4], vec![Activation::Identity]).unwrap();
        let ens = DynamicsEnsemble::from_members(cfg, 2, 1, vec![m], vec![], Normalizer::identity(3), vec![1.0; 2]).unwrap();
        assert!(matches!(ens.predict(&[0.0, 0.0], &[0.0]), Err(Error::Unfitted(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = planted_linear(400, 1.0, 1);
        let a = train_ensemble(&ds, &small_config(), 7).unwrap();
        let b = train_ensemble(&ds, &small_config(), 7).unwrap();
        assert_eq!(a.elites, b.elites);
        assert_eq!(a.validation_losses, b.validation_losses);
        assert_eq!(a.elites.len(), 2);
    }

    #[test]
    fn tiny_dataset_is_a_data_error() {
        let ds = planted_linear(4, 1.0, 1);
        assert!(matches!(train_ensemble(&ds, &small_config(), 0), Err(Error::Data(_))));
        let bad = EnsembleConfig {
            n_elites: 4,
            ..small_config()
        };
        assert!(train_ensemble(&planted_linear(100, 1.0, 1), &bad, 0).is_err());
    }

    #[test]
    fn repeated_transition_is_fit_with_decreasing_nll() {
        let t = Transition {
            s: vec![0.5, -0.5, 1.0],
            a: vec![0.2, 0.1],
            r: 0.0,
            s_next: vec![0.6, -0.45, 1.2],
            done: false,
        };
        let ds = Dataset::new(descriptor(3, 2), "same", vec![t.clone(); 200], vec![0]).unwrap();
        let cfg = EnsembleConfig {
            epochs: 80,
            ..small_config()
        };
        let ens = train_ensemble(&ds, &cfg, 2).unwrap();
        for h in &ens.history {
            assert!(h[..10].windows(2).all(|w| w[1] < w[0]), "{h:?}");
        }
        let pred = ens.predict(&t.s, &t.a).unwrap();
        for m in &pred.means {
            for (p, y) in m.iter().zip(&t.s_next) {
                assert!((p - y).abs() < 1e-2, "{m:?}");
            }
        }
    }

    #[test]
    fn member_loss_gradient_matches_finite_differences() {
        let ds = planted_linear(20, 1.0, 4);
        let states: Vec<&[f64]> = ds.transitions.iter().map(|t| t.s.as_slice()).collect();
        let actions: Vec<&[f64]> = ds.transitions.iter().map(|t| t.a.as_slice()).collect();
        let x = stack_pairs(&states, &actions, 3, 2).unwrap();
        let y = x.slice(s![.., ..3]).mapv(|v| 0.3 * v + 0.1);
        let clamp = LogVarClamp::default();
        let m = Mlp::new(5, &[8, 8], 6, Activation::Swish, Activation::Identity, 3).unwrap();
        let (_, g) = member_loss(&m, &clamp, 3, x.view(), y.view()).unwrap();
        let mut probe = m.clone();
        let r = check_gradient(
            |p| {
                probe.params_mut().copy_from_slice(p);
                member_loss(&probe, &clamp, 3, x.view(), y.view()).unwrap().0
            },
            m.params(),
            &g,
            100,
            1,
        );
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }
}
