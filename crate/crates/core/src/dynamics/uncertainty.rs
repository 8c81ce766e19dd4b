//! Per-pair uncertainty quantifiers over an ensemble prediction.

use serde::{Deserialize, Serialize};

use crate::env::Dataset;
use crate::error::{Error, Result};

/// Per-member diagonal Gaussians over the next state, means already shifted by `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrediction {
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl GaussianPrediction {
    pub fn n_members(&self) -> usize {
        self.means.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantifierKind {
    /// Largest covariance norm across members.
    #[default]
    Mopo,
    /// Largest pairwise distance between member means.
    Morel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrobeniusVariant {
    /// `sqrt(sum a_ij^2)`.
    #[default]
    Standard,
    /// `sqrt(sum |a_ij|)`, the unsquared form.
    Unsquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceEntries {
    #[default]
    Variance,
    StdDev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantifierConfig {
    pub kind: QuantifierKind,
    pub frobenius: FrobeniusVariant,
    pub entries: CovarianceEntries,
}

impl QuantifierConfig {
    pub fn morel() -> Self {
        Self {
            kind: QuantifierKind::Morel,
            ..Self::default()
        }
    }

    pub fn apply(&self, pred: &GaussianPrediction) -> Result<f64> {
        match self.kind {
            QuantifierKind::Mopo => uncertainty_mopo_with(pred, self.frobenius, self.entries),
            QuantifierKind::Morel => uncertainty_morel(pred),
        }
    }
}

/// Max over members of the Frobenius norm of the diagonal covariance.
pub fn uncertainty_mopo(pred: &GaussianPrediction) -> Result<f64> {
    uncertainty_mopo_with(pred, FrobeniusVariant::Standard, CovarianceEntries::Variance)
}

pub fn uncertainty_mopo_with(
    pred: &GaussianPrediction,
    norm: FrobeniusVariant,
    entries: CovarianceEntries,
) -> Result<f64> {
    if pred.variances.is_empty() {
        return Err(Error::Quantifier("covariance norm needs at least one member".into()));
    }
    let mut best = 0.0f64;
    for var in &pred.variances {
        let sum: f64 = var
            .iter()
            .map(|&v| {
                let e = match entries {
                    CovarianceEntries::Variance => v,
                    CovarianceEntries::StdDev => v.sqrt(),
                };
                match norm {
                    FrobeniusVariant::Standard => e * e,
                    FrobeniusVariant::Unsquared => e.abs(),
                }
            })
            .sum();
        best = best.max(sum.sqrt());
    }
    Ok(best)
}

/// Max pairwise Euclidean distance between member means.
pub fn uncertainty_morel(pred: &GaussianPrediction) -> Result<f64> {
    let m = &pred.means;
    if m.len() < 2 {
        return Err(Error::Quantifier(format!(
            "mean discrepancy needs at least 2 members, got {}",
            m.len()
        )));
    }
    let mut best = 0.0f64;
    for i in 0..m.len() {
        for j in i + 1..m.len() {
            let d: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| (a - b).powi(2)).sum();
            best = best.max(d.sqrt());
        }
    }
    Ok(best)
}

/// Anything that scores `(s, a)` pairs with a scalar uncertainty.
pub trait UncertaintyModel {
    fn uncertainties(&self, states: &[&[f64]], actions: &[&[f64]], q: &QuantifierConfig) -> Result<Vec<f64>>;
}

/// Max of `u(s_i, a_i)` over every transition in the dataset.
pub fn dataset_max_uncertainty<M: UncertaintyModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    q: &QuantifierConfig,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::data("cannot take the max uncertainty of an empty dataset"));
    }
    let states: Vec<&[f64]> = dataset.transitions.iter().map(|t| t.s.as_slice()).collect();
    let actions: Vec<&[f64]> = dataset.transitions.iter().map(|t| t.a.as_slice()).collect();
    let u = model.uncertainties(&states, &actions, q)?;
    u.into_iter().try_fold(0.0f64, |acc, x| {
        if x.is_nan() || x < 0.0 {
            Err(Error::numeric(format!("invalid uncertainty {x}")))
        } else {
            Ok(acc.max(x))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> GaussianPrediction {
        GaussianPrediction { means, variances }
    }

    #[test]
    fn mopo_examples() {
        let p = pred(vec![vec![0.0; 2]], vec![vec![0.0, 0.0]]);
        assert_eq!(uncertainty_mopo(&p).unwrap(), 0.0);
        let p = pred(vec![vec![0.0; 2]], vec![vec![3.0, 4.0]]);
        assert_eq!(uncertainty_mopo(&p).unwrap(), 5.0);
        let p = pred(vec![vec![0.0; 2]; 2], vec![vec![1.0, 0.0], vec![0.0, 2.0]]);
        assert_eq!(uncertainty_mopo(&p).unwrap(), 2.0);
    }

    #[test]
    fn mopo_variants() {
        let p = pred(vec![vec![0.0; 2]], vec![vec![4.0, 9.0]]);
        let u = uncertainty_mopo_with(&p, FrobeniusVariant::Unsquared, CovarianceEntries::Variance).unwrap();
        assert_eq!(u, 13f64.sqrt());
        let u = uncertainty_mopo_with(&p, FrobeniusVariant::Standard, CovarianceEntries::StdDev).unwrap();
        assert_eq!(u, 13f64.sqrt());
        let u = uncertainty_mopo_with(&p, FrobeniusVariant::Unsquared, CovarianceEntries::StdDev).unwrap();
        assert_eq!(u, 5f64.sqrt());
    }

    #[test]
    fn morel_examples() {
        let p = pred(vec![vec![1.0, 2.0]; 3], vec![vec![1.0; 2]; 3]);
        assert_eq!(uncertainty_morel(&p).unwrap(), 0.0);
        let p = pred(vec![vec![0.0, 0.0], vec![3.0, 4.0]], vec![vec![1.0; 2]; 2]);
        assert_eq!(uncertainty_morel(&p).unwrap(), 5.0);
        let p = pred(vec![vec![0.0, 0.0]], vec![vec![1.0; 2]]);
        assert!(matches!(uncertainty_morel(&p), Err(Error::Quantifier(_))));
    }

    #[test]
    fn morel_matches_exhaustive_pairs() {
        use rand::Rng as _;
        let mut rng = crate::rng::rng_from_seed(3);
        let means: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut brute: f64 = 0.0;
        for a in &means {
            for b in &means {
                brute = brute.max(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
            }
        }
        let p = pred(means, vec![vec![1.0; 3]; 5]);
        assert_eq!(uncertainty_morel(&p).unwrap(), brute);
    }
}
