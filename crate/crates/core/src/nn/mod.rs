//! Small dense-network engine: MLPs with manual backprop, Adam, Gaussian
//! losses and a finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod losses;
pub mod mlp;

pub use adam::{Adam, AdamConfig};
pub use mlp::{Activation, ForwardCache, Mlp};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::nn::mlp::sigmoid;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Keeps raw log-variance outputs inside `[min, max]`.
///
/// A pair of softplus ramps keeps the map smooth; a final hard clip removes
/// the residual overshoot of order `exp(-(max - min))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogVarClamp {
    pub min: f64,
    pub max: f64,
}

impl Default for LogVarClamp {
    fn default() -> Self {
        Self { min: -10.0, max: 2.0 }
    }
}

impl LogVarClamp {
    /// Returns the clamped value and its derivative wrt `raw`.
    pub fn apply(&self, raw: f64) -> (f64, f64) {
        let upper = self.max - softplus(self.max - raw);
        let lv = self.min + softplus(upper - self.min);
        let d = sigmoid(self.max - raw) * sigmoid(upper - self.min);
        if lv > self.max {
            (self.max, 0.0)
        } else {
            (lv, d)
        }
    }
}

/// Per-column affine standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Columns with spread below `1e-8` keep unit scale.
    pub fn fit(rows: ArrayView2<'_, f64>) -> Self {
        let n = rows.nrows().max(1) as f64;
        let mean: Vec<f64> = rows.columns().into_iter().map(|c| c.sum() / n).collect();
        let std = rows
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(c, m)| {
                let sd = (c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
                if sd < 1e-8 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, rows: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = rows.to_owned();
        for mut row in out.rows_mut() {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        out
    }
}

/// Stacks equal-length rows into a matrix.
pub fn stack_rows(rows: &[&[f64]], dim: usize) -> Result<Array2<f64>> {
    let mut flat = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        check_dim("matrix row", dim, r.len())?;
        flat.extend_from_slice(r);
    }
    Ok(Array2::from_shape_vec((rows.len(), dim), flat).unwrap())
}

/// Stacks `[x_i, y_i]` concatenations into a matrix.
pub fn stack_pairs(xs: &[&[f64]], ys: &[&[f64]], dx: usize, dy: usize) -> Result<Array2<f64>> {
    check_dim("paired rows", xs.len(), ys.len())?;
    let mut flat = Vec::with_capacity(xs.len() * (dx + dy));
    for (x, y) in xs.iter().zip(ys) {
        check_dim("left row", dx, x.len())?;
        check_dim("right row", dy, y.len())?;
        flat.extend_from_slice(x);
        flat.extend_from_slice(y);
    }
    Ok(Array2::from_shape_vec((xs.len(), dx + dy), flat).unwrap())
}
