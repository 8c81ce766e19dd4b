//! Numerical checks of the performance bounds for ε-pessimistic MDPs.
//!
//! Notation: `M` is the true MDP, `M_p` the pessimistic MDP with true
//! dynamics, `M^_p` the ε-pessimistic MDP with learned dynamics and learned
//! initial distribution. `r_bar = r_max + lambda * u_max + kappa` bounds
//! every pessimistic reward in absolute value.

use serde::{Deserialize, Serialize};

use crate::env::tabular::{StochasticPolicy, TabularMdp};
use crate::error::{check_dim, Result};
use crate::theory::exact::{exact_return, policy_iteration, tv_distance};
use crate::truncation::pessimistic::{build_pessimistic_tabular, PessimisticPair, PessimisticParams};

/// Slack below which an inequality counts as violated.
pub const BOUND_TOL: f64 = 1e-9;

/// A learned tabular model: transition tensor plus initial distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedModel {
    pub transitions: Vec<f64>,
    pub rho0: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub lambda_pen: f64,
    pub kappa: f64,
    pub epsilon: f64,
}

impl BoundConfig {
    fn params(&self) -> PessimisticParams {
        PessimisticParams {
            lambda_pen: self.lambda_pen,
            kappa: self.kappa,
            epsilon: self.epsilon,
            ..Default::default()
        }
    }
}

/// Every quantity entering the bounds, plus the verdicts derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub gamma: f64,
    pub r_max: f64,
    pub lambda_pen: f64,
    pub kappa: f64,
    pub u_max: f64,
    pub epsilon_used: f64,
    pub r_bar: f64,
    pub tv_rho0: f64,
    /// `J(pi, M)`.
    pub j_true: f64,
    /// `J(pi, M_p)`.
    pub j_pess_true_dyn: f64,
    /// `J(pi, M^_p)`.
    pub j_pess_learned: f64,
    pub lower_bound_value: f64,
    pub upper_bound_value: f64,
    /// `J(M^_p) >= J(M) - 2 r_bar TV/(1-g) - r_bar eps - r_bar/(1-g)`.
    pub return_lower_ok: bool,
    /// `J(M^_p) <= J(M) + 2 r_bar TV/(1-g) + r_bar eps`.
    pub return_upper_ok: bool,
    /// `|J(M_p) - J(M^_p)| <= 2 r_bar TV/(1-g) + r_bar eps`.
    pub model_gap_ok: bool,
    /// `J(M) - r_bar/(1-g) <= J(M_p)`.
    pub sandwich_lower_ok: bool,
    /// `J(M_p) <= J(M)`.
    pub sandwich_upper_ok: bool,
    pub lower_slack: f64,
    pub upper_slack: f64,
    pub model_gap_slack: f64,
    pub sandwich_lower_slack: f64,
    pub sandwich_upper_slack: f64,
}

impl BoundReport {
    fn from_values(
        gamma: f64,
        r_max: f64,
        cfg: &BoundConfig,
        u_max: f64,
        tv_rho0: f64,
        j_true: f64,
        j_pess_true_dyn: f64,
        j_pess_learned: f64,
    ) -> Self {
        let r_bar = r_max + cfg.lambda_pen * u_max + cfg.kappa;
        let horizon = 1.0 / (1.0 - gamma);
        let init_term = 2.0 * r_bar * horizon * tv_rho0;
        let eps_term = r_bar * cfg.epsilon;
        let lower_bound_value = j_true - init_term - eps_term - r_bar * horizon;
        let upper_bound_value = j_true + init_term + eps_term;
        let lower_slack = j_pess_learned - lower_bound_value;
        let upper_slack = upper_bound_value - j_pess_learned;
        let model_gap_slack = init_term + eps_term - (j_pess_true_dyn - j_pess_learned).abs();
        let sandwich_lower_slack = j_pess_true_dyn - (j_true - r_bar * horizon);
        let sandwich_upper_slack = j_true - j_pess_true_dyn;
        Self {
            gamma,
            r_max,
            lambda_pen: cfg.lambda_pen,
            kappa: cfg.kappa,
            u_max,
            epsilon_used: cfg.epsilon,
            r_bar,
            tv_rho0,
            j_true,
            j_pess_true_dyn,
            j_pess_learned,
            lower_bound_value,
            upper_bound_value,
            return_lower_ok: lower_slack >= -BOUND_TOL,
            return_upper_ok: upper_slack >= -BOUND_TOL,
            model_gap_ok: model_gap_slack >= -BOUND_TOL,
            sandwich_lower_ok: sandwich_lower_slack >= -BOUND_TOL,
            sandwich_upper_ok: sandwich_upper_slack >= -BOUND_TOL,
            lower_slack,
            upper_slack,
            model_gap_slack,
            sandwich_lower_slack,
            sandwich_upper_slack,
        }
    }

    /// Recomputes every derived field from the stored primary values.
    pub fn recheck(&self) -> Self {
        let cfg = BoundConfig {
            lambda_pen: self.lambda_pen,
            kappa: self.kappa,
            epsilon: self.epsilon_used,
        };
        Self::from_values(
            self.gamma,
            self.r_max,
            &cfg,
            self.u_max,
            self.tv_rho0,
            self.j_true,
            self.j_pess_true_dyn,
            self.j_pess_learned,
        )
    }

    pub fn return_bound_ok(&self) -> bool {
        self.return_lower_ok && self.return_upper_ok
    }

    pub fn intermediate_bounds_ok(&self) -> bool {
        self.model_gap_ok && self.sandwich_lower_ok && self.sandwich_upper_ok
    }
}

/// Evaluates `pi` exactly on `M`, `M_p` and `M^_p` and checks the return
/// bound together with the two intermediate bounds it is assembled from.
pub fn check_bounds(
    true_mdp: &TabularMdp,
    learned: &LearnedModel,
    policy: &StochasticPolicy,
    cfg: &BoundConfig,
) -> Result<BoundReport> {
    let pair = build_pessimistic_tabular(true_mdp, &learned.transitions, &learned.rho0, &cfg.params())?;
    report_for(true_mdp, learned, &pair, policy, cfg)
}

fn report_for(
    true_mdp: &TabularMdp,
    learned: &LearnedModel,
    pair: &PessimisticPair,
    policy: &StochasticPolicy,
    cfg: &BoundConfig,
) -> Result<BoundReport> {
    let j_true = exact_return(true_mdp, policy, true_mdp.rho0())?;
    let j_pess_true_dyn = pair.true_dynamics.policy_return(policy)?;
    let j_pess_learned = pair.learned_dynamics.policy_return(policy)?;
    let tv_rho0 = tv_distance(true_mdp.rho0(), &learned.rho0)?;
    Ok(BoundReport::from_values(
        true_mdp.gamma(),
        true_mdp.r_max(),
        cfg,
        pair.u_max,
        tv_rho0,
        j_true,
        j_pess_true_dyn,
        j_pess_learned,
    ))
}

/// Sub-optimality bound for a candidate policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuboptimalityReport {
    /// `J(pi*_M, M)` with `pi*_M` from exact policy iteration on `M`.
    pub j_opt_true: f64,
    /// `J(pi, M)`.
    pub j_candidate_true: f64,
    /// `J(pi*_{M^_p}, M^_p)` from policy iteration on the extended MDP.
    pub j_opt_pess_learned: f64,
    /// `J(pi, M^_p)`.
    pub j_candidate_pess_learned: f64,
    /// `J(pi*_{M^_p}, M^_p) - J(pi, M^_p)`.
    pub delta_pi: f64,
    pub r_bar: f64,
    pub tv_rho0: f64,
    pub epsilon_used: f64,
    pub gamma: f64,
    pub gap: f64,
    pub bound: f64,
    pub slack: f64,
    pub ok: bool,
}

pub fn check_suboptimality(
    true_mdp: &TabularMdp,
    learned: &LearnedModel,
    candidate: &StochasticPolicy,
    cfg: &BoundConfig,
) -> Result<SuboptimalityReport> {
    check_dim("candidate policy", true_mdp.n_states(), candidate.n_states())?;
    let pair = build_pessimistic_tabular(true_mdp, &learned.transitions, &learned.rho0, &cfg.params())?;
    let (pi_star, _) = policy_iteration(true_mdp)?;
    let j_opt_true = exact_return(true_mdp, &pi_star, true_mdp.rho0())?;
    let j_candidate_true = exact_return(true_mdp, candidate, true_mdp.rho0())?;
    let j_opt_pess_learned = pair.learned_dynamics.optimal_return()?;
    let j_candidate_pess_learned = pair.learned_dynamics.policy_return(candidate)?;
    let delta_pi = j_opt_pess_learned - j_candidate_pess_learned;
    let tv_rho0 = tv_distance(true_mdp.rho0(), &learned.rho0)?;
    let gamma = true_mdp.gamma();
    let r_bar = true_mdp.r_max() + cfg.lambda_pen * pair.u_max + cfg.kappa;
    let horizon = 1.0 / (1.0 - gamma);
    let bound = delta_pi + 4.0 * r_bar * horizon * tv_rho0 + 2.0 * r_bar * cfg.epsilon + r_bar * horizon;
    let gap = j_opt_true - j_candidate_true;
    let slack = bound - gap;
    Ok(SuboptimalityReport {
        j_opt_true,
        j_candidate_true,
        j_opt_pess_learned,
        j_candidate_pess_learned,
        delta_pi,
        r_bar,
        tv_rho0,
        epsilon_used: cfg.epsilon,
        gamma,
        gap,
        bound,
        slack,
        ok: slack >= -BOUND_TOL,
    })
}
