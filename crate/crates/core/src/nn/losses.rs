//! Gaussian likelihood and KL terms, scalar and batched, with gradients.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{check_dim, Error, Result};

/// `0.5 * ln(2 pi)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite {name}")))
    }
}

/// Negative log-likelihood of `target` under a diagonal Gaussian.
pub fn gaussian_nll(mean: &[f64], logvar: &[f64], target: &[f64]) -> Result<f64> {
    check_dim("logvar", mean.len(), logvar.len())?;
    check_dim("target", mean.len(), target.len())?;
    check_finite("mean", mean)?;
    check_finite("logvar", logvar)?;
    check_finite("target", target)?;
    Ok(mean
        .iter()
        .zip(logvar)
        .zip(target)
        .map(|((m, lv), t)| HALF_LN_2PI + 0.5 * lv + 0.5 * (t - m).powi(2) * (-lv).exp())
        .sum())
}

/// `KL(N(mu, diag(exp(logvar))) || N(0, I))`.
pub fn diag_gaussian_kl(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    check_dim("logvar", mu.len(), logvar.len())?;
    check_finite("mu", mu)?;
    check_finite("logvar", logvar)?;
    Ok(mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum())
}

/// Batch-mean Gaussian NLL with gradients wrt mean and logvar.
pub fn gaussian_nll_batch(
    mean: ArrayView2<'_, f64>,
    logvar: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if mean.shape() != logvar.shape() || mean.shape() != target.shape() {
        return Err(Error::Dimension {
            context: "gaussian nll batch",
            expected: mean.len(),
            got: target.len(),
        });
    }
    let n = mean.nrows().max(1) as f64;
    let mut d_mean = Array2::zeros(mean.raw_dim());
    let mut d_logvar = Array2::zeros(mean.raw_dim());
    let mut total = 0.0;
    Zip::from(&mut d_mean)
        .and(&mut d_logvar)
        .and(mean)
        .and(logvar)
        .and(target)
        .for_each(|dm, dl, &m, &lv, &t| {
            let inv = (-lv).exp();
            let r = m - t;
            total += HALF_LN_2PI + 0.5 * lv + 0.5 * r * r * inv;
            *dm = r * inv / n;
            *dl = 0.5 * (1.0 - r * r * inv) / n;
        });
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("non-finite gaussian nll {loss}")));
    }
    Ok((loss, d_mean, d_logvar))
}

/// Batch-mean diagonal KL to the standard normal with gradients.
pub fn diag_gaussian_kl_batch(
    mu: ArrayView2<'_, f64>,
    logvar: ArrayView2<'_, f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if mu.shape() != logvar.shape() {
        return Err(Error::Dimension {
            context: "kl batch",
            expected: mu.len(),
            got: logvar.len(),
        });
    }
    let n = mu.nrows().max(1) as f64;
    let mut d_mu = Array2::zeros(mu.raw_dim());
    let mut d_logvar = Array2::zeros(mu.raw_dim());
    let mut total = 0.0;
    Zip::from(&mut d_mu)
        .and(&mut d_logvar)
        .and(mu)
        .and(logvar)
        .for_each(|dm, dl, &m, &lv| {
            let e = lv.exp();
            total += 0.5 * (m * m + e - lv - 1.0);
            *dm = m / n;
            *dl = 0.5 * (e - 1.0) / n;
        });
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("non-finite kl {loss}")));
    }
    Ok((loss, d_mu, d_logvar))
}

/// Batch-mean of the per-row squared error `||pred - target||^2`.
pub fn squared_error_batch(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension {
            context: "squared error batch",
            expected: pred.len(),
            got: target.len(),
        });
    }
    let n = pred.nrows().max(1) as f64;
    let diff = &pred - &target;
    let loss = diff.mapv(|d| d * d).sum() / n;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("non-finite squared error {loss}")));
    }
    Ok((loss, diff.mapv(|d| 2.0 * d / n)))
}
