//! Accumulated-uncertainty truncation of model rollouts.
//!
//! A synthetic trajectory accumulates `U_t` from per-step uncertainties and
//! stops once `U_t` exceeds a threshold `epsilon` set from the largest
//! uncertainty seen on the real dataset. Admitted steps are rewarded
//! pessimistically with `r - lambda * u`, and `kappa` more at truncation.

pub mod pessimistic;

use serde::{Deserialize, Serialize};

use crate::dynamics::uncertainty::{dataset_max_uncertainty, QuantifierConfig, UncertaintyModel};
use crate::env::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumulationMode {
    /// `U_t = sum_{i<=t} gamma^i u_i`.
    Discounted,
    /// `U_t = sum_{i<=t} u_i`.
    #[default]
    Undiscounted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruncationConfig {
    /// Threshold strength: `epsilon = max dataset u / alpha`.
    pub alpha: f64,
    pub lambda_pen: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub horizon: usize,
    pub accumulation: AccumulationMode,
    pub quantifier: QuantifierConfig,
    /// Charge `kappa` to the last admitted transition of a truncated rollout.
    pub apply_kappa_to_last_admitted: bool,
    /// Drop the `lambda * u` term, for learners that already penalize `u`.
    pub skip_uncertainty_penalty: bool,
    /// Per-step `u` is clipped to `u_max_factor * max dataset u`.
    pub u_max_factor: f64,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            lambda_pen: 1.0,
            kappa: 0.0,
            gamma: 0.99,
            horizon: 5,
            accumulation: AccumulationMode::Undiscounted,
            quantifier: QuantifierConfig::default(),
            apply_kappa_to_last_admitted: false,
            skip_uncertainty_penalty: false,
            u_max_factor: 10.0,
        }
    }
}

impl TruncationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 1.0) || !self.alpha.is_finite() {
            return Err(Error::param(format!("alpha must be >= 1, got {}", self.alpha)));
        }
        if self.horizon == 0 {
            return Err(Error::param("rollout horizon must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::param(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.lambda_pen >= 0.0) || !(self.kappa >= 0.0) {
            return Err(Error::param("lambda_pen and kappa must be nonnegative"));
        }
        if !(self.u_max_factor >= 1.0) {
            return Err(Error::param("u_max_factor must be >= 1"));
        }
        Ok(())
    }

    fn effective_lambda(&self) -> f64 {
        if self.skip_uncertainty_penalty {
            0.0
        } else {
            self.lambda_pen
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TruncationState {
    pub u_accum: f64,
    pub step: usize,
    pub truncated: bool,
}

/// Adds this step's contribution to `U`; the truncation flag is untouched.
pub fn accumulate_step(state: TruncationState, u: f64, config: &TruncationConfig) -> Result<TruncationState> {
    if !(u >= 0.0) || !u.is_finite() {
        return Err(Error::param(format!("uncertainty must be finite and nonnegative, got {u}")));
    }
    let weight = match config.accumulation {
        AccumulationMode::Discounted => config.gamma.powi(state.step as i32),
        AccumulationMode::Undiscounted => 1.0,
    };
    Ok(TruncationState {
        u_accum: state.u_accum + weight * u,
        step: state.step + 1,
        truncated: state.truncated,
    })
}

/// Accumulates `u` and latches the truncation flag against `epsilon`.
pub fn advance(state: TruncationState, u: f64, config: &TruncationConfig, epsilon: f64) -> Result<TruncationState> {
    let mut next = accumulate_step(state, u, config)?;
    next.truncated = state.truncated || truncation_indicator(next.u_accum, epsilon);
    Ok(next)
}

/// `U <= epsilon` admits; the boundary is inclusive.
pub fn truncation_indicator(u_accum: f64, epsilon: f64) -> bool {
    u_accum > epsilon
}

/// `r - lambda u`, minus `kappa` more at a truncation step.
pub fn pessimistic_reward(r: f64, u: f64, config: &TruncationConfig, truncated: bool) -> f64 {
    let base = r - config.effective_lambda() * u;
    if truncated {
        base - config.kappa
    } else {
        base
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub epsilon: f64,
    pub source_max_u: f64,
    pub alpha_used: f64,
    pub quantifier: QuantifierConfig,
    /// Clip applied to per-step `u` during generation.
    pub u_max: f64,
}

impl Threshold {
    pub fn from_max(source_max_u: f64, config: &TruncationConfig) -> Result<Self> {
        config.validate()?;
        if !(source_max_u >= 0.0) || !source_max_u.is_finite() {
            return Err(Error::numeric(format!("invalid dataset max uncertainty {source_max_u}")));
        }
        Ok(Self {
            epsilon: source_max_u / config.alpha,
            source_max_u,
            alpha_used: config.alpha,
            quantifier: config.quantifier,
            u_max: config.u_max_factor * source_max_u,
        })
    }

    /// A threshold that never truncates, for tests and ablations.
    pub fn disabled(config: &TruncationConfig) -> Self {
        Self {
            epsilon: f64::INFINITY,
            source_max_u: f64::INFINITY,
            alpha_used: config.alpha,
            quantifier: config.quantifier,
            u_max: f64::INFINITY,
        }
    }

    pub fn clip(&self, u: f64) -> f64 {
        u.clamp(0.0, self.u_max)
    }
}

/// `epsilon = max_i u(s_i, a_i) / alpha` over the whole dataset.
pub fn compute_threshold<M: UncertaintyModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    config: &TruncationConfig,
) -> Result<Threshold> {
    config.validate()?;
    let max_u = dataset_max_uncertainty(model, dataset, &config.quantifier)?;
    Threshold::from_max(max_u, config)
}
