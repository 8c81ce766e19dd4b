//! Dense feed-forward network with batched forward and backward passes.
//!
//! Parameters live in one flat vector so optimizers, checkpoints and
//! finite-difference checks can treat them uniformly. Layer `l` stores its
//! weight matrix row-major with shape `(in, out)`, followed by its bias.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Swish,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Swish => z * sigmoid(z),
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and the output `y = f(z)`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Swish => {
                let sg = sigmoid(z);
                sg + y * (1.0 - sg)
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Swish => "swish",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "swish" => Some(Activation::Swish),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Intermediate values of a forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

impl Mlp {
    /// Hidden layers use `hidden_act`, the last layer uses `output_act`.
    /// Weights and biases start uniform in `±1/sqrt(fan_in)`.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        hidden_act: Activation,
        output_act: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(output_dim);
        let mut activations = vec![hidden_act; sizes.len() - 2];
        activations.push(output_act);
        let mut mlp = Self::zeros(sizes, activations)?;
        let mut rng = rng_from_seed(seed);
        let mut offset = 0;
        for l in 0..mlp.n_layers() {
            let (fan_in, fan_out) = (mlp.sizes[l], mlp.sizes[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut mlp.params[offset..offset + fan_in * fan_out + fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(mlp)
    }

    /// All-zero parameters with explicit per-layer activations.
    pub fn zeros(sizes: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::param(format!("invalid layer sizes {sizes:?}")));
        }
        check_dim("activation list", sizes.len() - 1, activations.len())?;
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            sizes,
            activations,
            params: vec![0.0; n],
        })
    }

    pub fn from_params(sizes: Vec<usize>, activations: Vec<Activation>, params: Vec<f64>) -> Result<Self> {
        let mut mlp = Self::zeros(sizes, activations)?;
        mlp.set_params(params)?;
        Ok(mlp)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn n_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Parameter count implied by the layer sizes.
    pub fn expected_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Moves the parameters out, leaving the architecture.
    pub(crate) fn take_params(&mut self) -> Vec<f64> {
        std::mem::take(&mut self.params)
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        check_dim("parameter vector", self.expected_params(), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::numeric("non-finite network parameter"));
        }
        self.params = params;
        Ok(())
    }

    /// Weight matrix `(in, out)` and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, &[f64]) {
        let offset = self.layer_offset(l);
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let w = ArrayView2::from_shape((i, o), &self.params[offset..offset + i * o]).unwrap();
        (w, &self.params[offset + i * o..offset + i * o + o])
    }

    fn layer_offset(&self, l: usize) -> usize {
        self.sizes[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("network input", self.input_dim(), x.len())?;
        let x = ArrayView2::from_shape((1, x.len()), x).unwrap();
        Ok(self.forward_batch(x)?.iter().copied().collect())
    }

    /// Forward pass over a `(batch, input_dim)` matrix.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("network input", self.input_dim(), x.ncols())?;
        let mut h = x.to_owned();
        for l in 0..self.n_layers() {
            let mut z = self.affine(l, h.view());
            let act = self.activations[l];
            z.mapv_inplace(|v| act.apply(v));
            h = z;
        }
        Ok(h)
    }

    /// Forward pass that keeps what the backward pass needs.
    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        check_dim("network input", self.input_dim(), x.ncols())?;
        let mut inputs = Vec::with_capacity(self.n_layers());
        let mut pre = Vec::with_capacity(self.n_layers());
        let mut h = x.to_owned();
        for l in 0..self.n_layers() {
            let z = self.affine(l, h.view());
            let act = self.activations[l];
            let y = z.mapv(|v| act.apply(v));
            inputs.push(h);
            pre.push(z);
            h = y;
        }
        Ok(ForwardCache { inputs, pre, output: h })
    }

    fn affine(&self, l: usize, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let (w, b) = self.layer(l);
        let mut z = x.dot(&w);
        z += &ArrayView2::from_shape((1, b.len()), b).unwrap();
        z
    }

    /// Backpropagates `d_out = dL/d(output)` and returns the parameter
    /// gradient (flat, same layout as the parameters) and `dL/d(input)`.
    pub fn backward(&self, cache: &ForwardCache, d_out: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        check_dim("output gradient rows", cache.output.nrows(), d_out.nrows())?;
        check_dim("output gradient cols", self.output_dim(), d_out.ncols())?;
        let mut grad = vec![0.0; self.params.len()];
        let mut dy = d_out.to_owned();
        for l in (0..self.n_layers()).rev() {
            let act = self.activations[l];
            let y = if l + 1 == self.n_layers() {
                &cache.output
            } else {
                &cache.inputs[l + 1]
            };
            let mut dz = dy;
            ndarray::Zip::from(&mut dz)
                .and(&cache.pre[l])
                .and(y)
                .for_each(|d, &z, &yv| *d *= act.derivative(z, yv));
            let offset = self.layer_offset(l);
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let dw = cache.inputs[l].t().dot(&dz);
            let db: Array1<f64> = dz.sum_axis(Axis(0));
            // `dot` may return column-major storage; copy in logical order.
            grad[offset..offset + i * o].iter_mut().zip(dw.iter()).for_each(|(g, v)| *g = *v);
            grad[offset + i * o..offset + i * o + o].iter_mut().zip(db.iter()).for_each(|(g, v)| *g = *v);
            let (w, _) = self.layer(l);
            dy = dz.dot(&w.t());
        }
        Ok((grad, dy))
    }

    /// Mean-loss gradient for a loss given as `loss(output) -> (value, dvalue/doutput)`.
    pub fn grad<F>(&self, x: ArrayView2<'_, f64>, loss: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&Array2<f64>) -> Result<(f64, Array2<f64>)>,
    {
        let cache = self.forward_cached(x)?;
        let (value, d_out) = loss(&cache.output)?;
        if !value.is_finite() {
            return Err(Error::numeric(format!("non-finite loss {value}")));
        }
        let (grad, _) = self.backward(&cache, d_out.view())?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric("non-finite gradient"));
        }
        Ok((value, grad))
    }

    /// Polyak update `self <- (1 - tau) self + tau other`.
    pub fn soft_update_from(&mut self, other: &Mlp, tau: f64) -> Result<()> {
        check_dim("soft update parameters", self.params.len(), other.params.len())?;
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            *p = (1.0 - tau) * *p + tau * q;
        }
        Ok(())
    }
}
