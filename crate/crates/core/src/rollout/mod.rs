//! Conditional VAE over logged actions, used as the rollout policy.
//!
//! The encoder maps normalized `(s, a)` to a diagonal Gaussian over `z`; the
//! decoder maps `(s, z)` through `tanh` scaled to the action bound. Sampling
//! draws `z ~ N(0, I)` clipped to `[-z_clip, z_clip]`.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::nn::{stack_rows, Activation, Adam, AdamConfig, Mlp, Normalizer};
use crate::rng::{derive_seed, rng_from_seed, Rng};

/// Encoder log-variances are clipped here before exponentiation.
const LOGVAR_LIMIT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeConfig {
    pub hidden: Vec<usize>,
    /// Defaults to twice the action dimension.
    pub latent_dim: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub z_clip: f64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            latent_dim: None,
            epochs: 30,
            batch_size: 256,
            lr: 1e-3,
            z_clip: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub state_norm: Normalizer,
    pub state_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub action_bound: f64,
    pub z_clip: f64,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvaeLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

struct CvaeGrads {
    encoder: Vec<f64>,
    decoder: Vec<f64>,
}

impl CvaeModel {
    pub fn new(state_dim: usize, action_dim: usize, action_bound: f64, config: &CvaeConfig, seed: u64) -> Result<Self> {
        if !(action_bound > 0.0) {
            return Err(Error::param("the rollout policy needs a positive action bound"));
        }
        let latent_dim = config.latent_dim.unwrap_or(2 * action_dim);
        let encoder = Mlp::new(
            state_dim + action_dim,
            &config.hidden,
            2 * latent_dim,
            Activation::Relu,
            Activation::Identity,
            derive_seed(seed, 1),
        )?;
        let decoder = Mlp::new(
            state_dim + latent_dim,
            &config.hidden,
            action_dim,
            Activation::Relu,
            Activation::Tanh,
            derive_seed(seed, 2),
        )?;
        Ok(Self {
            encoder,
            decoder,
            state_norm: Normalizer::identity(state_dim),
            state_dim,
            action_dim,
            latent_dim,
            action_bound,
            z_clip: config.z_clip,
            history: Vec::new(),
        })
    }

    /// Decoded actions for a batch of states and latent codes.
    pub fn decode(&self, states: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("latent code", self.latent_dim, z.ncols())?;
        let xs = self.state_norm.apply(states);
        let input = concatenate(Axis(1), &[xs.view(), z]).map_err(|e| Error::param(e.to_string()))?;
        Ok(self.decoder.forward_batch(input.view())? * self.action_bound)
    }

    /// A clipped standard-normal latent code.
    pub fn sample_latent(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.latent_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z.clamp(-self.z_clip, self.z_clip)
            })
            .collect()
    }

    /// One action per state, each drawing its latent from its own generator.
    pub fn sample_actions(&self, states: &[&[f64]], rngs: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
        check_dim("generators", states.len(), rngs.len())?;
        let s = stack_rows(states, self.state_dim)?;
        let z: Vec<Vec<f64>> = rngs.iter_mut().map(|r| self.sample_latent(r)).collect();
        let z_rows: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
        let z = stack_rows(&z_rows, self.latent_dim)?;
        Ok(self.decode(s.view(), z.view())?.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    /// Loss and gradients with the reparametrization noise supplied explicitly.
    fn loss_and_grads(
        &self,
        states: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
        noise: ArrayView2<'_, f64>,
    ) -> Result<(CvaeLoss, CvaeGrads)> {
        let n = states.nrows();
        if n == 0 {
            return Err(Error::data("empty CVAE batch"));
        }
        check_dim("action batch", n, actions.nrows())?;
        check_dim("noise batch", n, noise.nrows())?;
        check_dim("noise width", self.latent_dim, noise.ncols())?;
        let l = self.latent_dim;
        let nf = n as f64;
        let xs = self.state_norm.apply(states);
        let enc_in = concatenate(Axis(1), &[xs.view(), actions]).map_err(|e| Error::param(e.to_string()))?;
        let enc = self.encoder.forward_cached(enc_in.view())?;
        let mu = enc.output().slice(s![.., ..l]).to_owned();
        let raw = enc.output().slice(s![.., l..]).to_owned();
        let lv = raw.mapv(|v| v.clamp(-LOGVAR_LIMIT, LOGVAR_LIMIT));
        let sigma = lv.mapv(|v| (0.5 * v).exp());
        let z = &mu + &(&sigma * &noise);
        let dec_in = concatenate(Axis(1), &[xs.view(), z.view()]).map_err(|e| Error::param(e.to_string()))?;
        let dec = self.decoder.forward_cached(dec_in.view())?;
        let a_hat = dec.output() * self.action_bound;
        let diff = &a_hat - &actions;
        let reconstruction = diff.mapv(|d| d * d).sum() / nf;
        let kl = ndarray::Zip::from(&mu)
            .and(&lv)
            .fold(0.0, |acc, &m, &v| acc + 0.5 * (m * m + v.exp() - v - 1.0))
            / nf;
        let total = reconstruction + kl;
        if !total.is_finite() {
            return Err(Error::numeric(format!("non-finite CVAE loss {total}")));
        }
        let d_y = diff.mapv(|d| 2.0 * d / nf * self.action_bound);
        let (g_dec, d_dec_in) = self.decoder.backward(&dec, d_y.view())?;
        let dz = d_dec_in.slice(s![.., self.state_dim..]).to_owned();
        let d_mu = &dz + &mu.mapv(|m| m / nf);
        let mut d_raw = &dz * &noise * &sigma * 0.5 + &lv.mapv(|v| 0.5 * (v.exp() - 1.0) / nf);
        ndarray::Zip::from(&mut d_raw).and(&raw).for_each(|d, &r| {
            if r.abs() > LOGVAR_LIMIT {
                *d = 0.0;
            }
        });
        let d_enc = concatenate(Axis(1), &[d_mu.view(), d_raw.view()]).unwrap();
        let (g_enc, _) = self.encoder.backward(&enc, d_enc.view())?;
        Ok((
            CvaeLoss {
                total,
                reconstruction,
                kl,
            },
            CvaeGrads {
                encoder: g_enc,
                decoder: g_dec,
            },
        ))
    }
}

/// Batch loss with explicit reparametrization noise.
pub fn cvae_loss_with_noise(
    model: &CvaeModel,
    states: ArrayView2<'_, f64>,
    actions: ArrayView2<'_, f64>,
    noise: ArrayView2<'_, f64>,
) -> Result<CvaeLoss> {
    Ok(model.loss_and_grads(states, actions, noise)?.0)
}

/// Flat gradient `[encoder params, decoder params]` of the total loss.
pub fn cvae_gradient(
    model: &CvaeModel,
    states: ArrayView2<'_, f64>,
    actions: ArrayView2<'_, f64>,
    noise: ArrayView2<'_, f64>,
) -> Result<(CvaeLoss, Vec<f64>)> {
    let (loss, g) = model.loss_and_grads(states, actions, noise)?;
    Ok((loss, [g.encoder, g.decoder].concat()))
}

fn draw_noise(n: usize, latent: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, latent), || StandardNormal.sample(rng))
}

/// Batch loss with noise drawn from `seed`.
pub fn cvae_loss(model: &CvaeModel, states: &[&[f64]], actions: &[&[f64]], seed: u64) -> Result<CvaeLoss> {
    let s = stack_rows(states, model.state_dim)?;
    let a = stack_rows(actions, model.action_dim)?;
    let noise = draw_noise(s.nrows(), model.latent_dim, &mut rng_from_seed(seed));
    cvae_loss_with_noise(model, s.view(), a.view(), noise.view())
}

pub fn train_cvae(dataset: &Dataset, config: &CvaeConfig, seed: u64) -> Result<CvaeModel> {
    dataset.validate()?;
    if config.batch_size == 0 || config.epochs == 0 || !(config.lr > 0.0) {
        return Err(Error::param("CVAE training needs positive epochs, batch size and lr"));
    }
    let d = &dataset.descriptor;
    let bound = d
        .action_bound
        .ok_or_else(|| Error::param("the rollout policy needs continuous, bounded actions"))?;
    let mut model = CvaeModel::new(d.state_dim, d.action_dim, bound, config, seed)?;
    let states: Vec<&[f64]> = dataset.transitions.iter().map(|t| t.s.as_slice()).collect();
    let actions: Vec<&[f64]> = dataset.transitions.iter().map(|t| t.a.as_slice()).collect();
    let s_all = stack_rows(&states, d.state_dim)?;
    let a_all = stack_rows(&actions, d.action_dim)?;
    model.state_norm = Normalizer::fit(s_all.view());
    let mut enc_opt = Adam::new(model.encoder.n_params(), AdamConfig::with_lr(config.lr));
    let mut dec_opt = Adam::new(model.decoder.n_params(), AdamConfig::with_lr(config.lr));
    let mut rng = rng_from_seed(derive_seed(seed, 3));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let s = s_all.select(Axis(0), batch);
            let a = a_all.select(Axis(0), batch);
            let noise = draw_noise(batch.len(), model.latent_dim, &mut rng);
            let (loss, g) = model.loss_and_grads(s.view(), a.view(), noise.view())?;
            enc_opt.step(model.encoder.params_mut(), &g.encoder)?;
            dec_opt.step(model.decoder.params_mut(), &g.decoder)?;
            total += loss.total * batch.len() as f64;
        }
        model.history.push(total / dataset.len() as f64);
    }
    Ok(model)
}

/// One action for `s`, deterministic in `seed`.
pub fn sample_action(model: &CvaeModel, s: &[f64], seed: u64) -> Result<Vec<f64>> {
    let mut rngs = [rng_from_seed(seed)];
    Ok(model.sample_actions(&[s], &mut rngs)?.remove(0))
}
