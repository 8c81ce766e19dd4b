//! Count-based tabular models estimated from logged transitions, and how
//! their error shrinks with dataset size.

use serde::{Deserialize, Serialize};

use crate::env::tabular::{StochasticPolicy, TabularMdp};
use crate::env::{collect_dataset, index_of, Dataset, TabularEnv, TabularEnvConfig};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::theory::bounds::LearnedModel;
use crate::theory::exact::tv_distance;
use crate::truncation::pessimistic::tabular_uncertainty;

/// Empirical transition frequencies and initial distribution.
///
/// Rows of unvisited pairs are uniform. `rho0` counts the states of the
/// episode-opening transitions; with none logged it is uniform.
pub fn estimate_model(dataset: &Dataset, n_states: usize, n_actions: usize) -> Result<LearnedModel> {
    let mut counts = vec![0.0; n_states * n_actions * n_states];
    let mut visits = vec![0usize; n_states * n_actions];
    for t in &dataset.transitions {
        let s = index_of(&t.s, n_states, "state")?;
        let a = index_of(&t.a, n_actions, "action")?;
        let s2 = index_of(&t.s_next, n_states, "next state")?;
        counts[(s * n_actions + a) * n_states + s2] += 1.0;
        visits[s * n_actions + a] += 1;
    }
    for (k, &v) in visits.iter().enumerate() {
        let row = &mut counts[k * n_states..(k + 1) * n_states];
        if v == 0 {
            row.fill(1.0 / n_states as f64);
        } else {
            row.iter_mut().for_each(|c| *c /= v as f64);
        }
    }
    let mut rho0 = vec![0.0; n_states];
    for &i in &dataset.episode_starts {
        rho0[index_of(&dataset.transitions[i].s, n_states, "state")?] += 1.0;
    }
    let n_starts = dataset.episode_starts.len();
    if n_starts == 0 {
        rho0.fill(1.0 / n_states as f64);
    } else {
        rho0.iter_mut().for_each(|c| *c /= n_starts as f64);
    }
    Ok(LearnedModel {
        transitions: counts,
        rho0,
    })
}

/// Number of logged transitions per `(s, a)` pair, row-major.
pub fn visit_counts(dataset: &Dataset, n_states: usize, n_actions: usize) -> Result<Vec<usize>> {
    let mut visits = vec![0usize; n_states * n_actions];
    for t in &dataset.transitions {
        visits[index_of(&t.s, n_states, "state")? * n_actions + index_of(&t.a, n_actions, "action")?] += 1;
    }
    Ok(visits)
}

/// Model error at one dataset size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationPoint {
    pub n_transitions: usize,
    pub tv_rho0: f64,
    /// Mean over all pairs of the exact per-pair uncertainty.
    pub mean_u: f64,
    /// Median per-row TV over visited pairs.
    pub median_visited_tv: f64,
    pub visited_fraction: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Error of the count-based model estimated from `dataset`.
pub fn estimation_error(mdp: &TabularMdp, dataset: &Dataset) -> Result<EstimationPoint> {
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    let model = estimate_model(dataset, n, m)?;
    let u = tabular_uncertainty(mdp, &model.transitions)?;
    let visits = visit_counts(dataset, n, m)?;
    let visited: Vec<f64> = u.iter().zip(&visits).filter(|(_, &c)| c > 0).map(|(&x, _)| x).collect();
    Ok(EstimationPoint {
        n_transitions: dataset.len(),
        tv_rho0: tv_distance(mdp.rho0(), &model.rho0)?,
        mean_u: u.iter().sum::<f64>() / u.len() as f64,
        median_visited_tv: if visited.is_empty() { 1.0 } else { median(visited.clone()) },
        visited_fraction: visited.len() as f64 / u.len() as f64,
    })
}

/// Collects uniform-policy datasets of each size from one environment and
/// reports the estimation error of each. Size `k` uses seed `(seed, k)`.
pub fn dataset_size_sweep(env_config: &TabularEnvConfig, sizes: &[usize], seed: u64) -> Result<Vec<EstimationPoint>> {
    if sizes.is_empty() {
        return Err(Error::param("dataset size sweep needs at least one size"));
    }
    let env = TabularEnv::new(env_config.clone())?;
    let pi = StochasticPolicy::uniform(env_config.n_states, env_config.n_actions);
    sizes
        .iter()
        .enumerate()
        .map(|(k, &size)| {
            let ds = collect_dataset(&env, &pi, "uniform", size, derive_seed(seed, k as u64))?;
            estimation_error(env.mdp(), &ds)
        })
        .collect()
}
