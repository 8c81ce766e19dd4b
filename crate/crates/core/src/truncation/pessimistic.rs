//! Exact tabular ε-pessimistic MDPs.
//!
//! The truncation rule depends on the discounted sum `U_t = sum_i gamma^i u_i`
//! accumulated so far, so the process is not Markov in the base state alone.
//! We extend the state with the *rescaled remaining budget*
//!
//! ```text
//! B_t = (epsilon - U_{t-1}) / gamma^t,      B_0 = epsilon
//! ```
//!
//! which evolves time-homogeneously: step `t` truncates iff `u(s_t, a_t) > B_t`
//! (equivalently `U_t > epsilon`), and otherwise `B_{t+1} = (B_t - u) / gamma`.
//! Once `B >= u_max / (1 - gamma)` no future step can truncate, so all such
//! budgets collapse into a single "free" copy of each state.
//!
//! Budgets are kept on a grid of width `epsilon / 1000` and always rounded
//! down, which can only make truncation fire earlier than the exact rule.
//! Truncation moves the process into an absorbing zero-reward sink, so every
//! row stays stochastic.

use std::collections::{HashMap, VecDeque};

use crate::env::tabular::{check_simplex, StochasticPolicy, TabularMdp};
use crate::error::{check_dim, Error, Result};
use crate::theory::exact::{tv_distance, SparseMdp, SparseMdpBuilder, SINK};

/// Grid cells per epsilon for the remaining-budget coordinate.
pub const BUDGET_GRID_PER_EPSILON: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Budget {
    /// Remaining budget `k * epsilon / 1000`.
    Grid(u64),
    /// Remaining budget large enough that truncation can never fire again.
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PessimisticParams {
    pub lambda_pen: f64,
    pub kappa: f64,
    pub epsilon: f64,
    /// Refuse to build extended MDPs with more nodes than this.
    pub max_nodes: usize,
}

impl Default for PessimisticParams {
    fn default() -> Self {
        Self {
            lambda_pen: 1.0,
            kappa: 0.0,
            epsilon: 0.0,
            max_nodes: 2_000_000,
        }
    }
}

/// One budget-extended MDP (either true or learned dynamics).
#[derive(Debug, Clone)]
pub struct PessimisticTabularMdp {
    mdp: SparseMdp,
    /// Base state and budget of every node; `None` for the sink.
    labels: Vec<Option<(usize, Budget)>>,
    n_base_actions: usize,
}

impl PessimisticTabularMdp {
    pub fn sparse(&self) -> &SparseMdp {
        &self.mdp
    }

    pub fn n_nodes(&self) -> usize {
        self.mdp.n_nodes()
    }

    pub fn label(&self, node: usize) -> Option<(usize, Budget)> {
        self.labels[node]
    }

    /// Exact return of a base-state policy, lifted to ignore the budget.
    pub fn policy_return(&self, policy: &StochasticPolicy) -> Result<f64> {
        check_dim("policy actions", self.n_base_actions, policy.n_actions())?;
        self.mdp.policy_return(&|x| match self.labels[x] {
            None => vec![(0, 1.0)],
            Some((s, _)) => policy.action_probs(s).iter().copied().enumerate().collect(),
        })
    }

    /// Optimal return over budget-aware policies (policy iteration).
    pub fn optimal_return(&self) -> Result<f64> {
        let (_, v) = self.mdp.policy_iteration()?;
        Ok(self.mdp.start().iter().map(|&(x, p)| p * v[x]).sum())
    }

    /// Number of nodes whose budget is still on the grid.
    pub fn budget_nodes(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, Some((_, Budget::Grid(_)))))
            .count()
    }
}

/// The pair `(M_p, M^_p)`: identical truncation rule and rewards, true vs
/// learned dynamics and initial distributions.
#[derive(Debug, Clone)]
pub struct PessimisticPair {
    pub true_dynamics: PessimisticTabularMdp,
    pub learned_dynamics: PessimisticTabularMdp,
    /// `u(s, a) = D_TV(P^(.|s,a), P(.|s,a))`, row-major.
    pub uncertainty: Vec<f64>,
    pub u_max: f64,
    pub epsilon: f64,
}

/// Per-pair exact uncertainty `D_TV(P^(.|s,a), P(.|s,a))`.
pub fn tabular_uncertainty(true_mdp: &TabularMdp, learned_p: &[f64]) -> Result<Vec<f64>> {
    let (n, m) = (true_mdp.n_states(), true_mdp.n_actions());
    check_dim("learned transition tensor", n * m * n, learned_p.len())?;
    (0..n * m)
        .map(|i| {
            let (s, a) = (i / m, i % m);
            tv_distance(&learned_p[i * n..(i + 1) * n], true_mdp.next_dist(s, a))
        })
        .collect()
}

pub fn build_pessimistic_tabular(
    true_mdp: &TabularMdp,
    learned_p: &[f64],
    learned_rho0: &[f64],
    params: &PessimisticParams,
) -> Result<PessimisticPair> {
    let n = true_mdp.n_states();
    check_dim("learned rho0", n, learned_rho0.len())?;
    check_simplex(learned_rho0).map_err(|e| Error::param(format!("learned rho0: {e}")))?;
    if !(params.epsilon >= 0.0) || !params.epsilon.is_finite() {
        return Err(Error::param(format!("epsilon must be finite and >= 0, got {}", params.epsilon)));
    }
    if params.lambda_pen < 0.0 || params.kappa < 0.0 {
        return Err(Error::param("lambda and kappa must be nonnegative"));
    }
    let uncertainty = tabular_uncertainty(true_mdp, learned_p)?;
    let u_max = uncertainty.iter().copied().fold(0.0, f64::max);
    let rule = Rule {
        mdp: true_mdp,
        uncertainty: &uncertainty,
        u_max,
        params,
    };
    let true_dynamics = rule.extend(true_mdp.transitions(), true_mdp.rho0())?;
    let learned_dynamics = rule.extend(learned_p, learned_rho0)?;
    Ok(PessimisticPair {
        true_dynamics,
        learned_dynamics,
        uncertainty,
        u_max,
        epsilon: params.epsilon,
    })
}

struct Rule<'a> {
    mdp: &'a TabularMdp,
    uncertainty: &'a [f64],
    u_max: f64,
    params: &'a PessimisticParams,
}

impl Rule<'_> {
    fn budget_value(&self, k: u64) -> f64 {
        (k as f64 / BUDGET_GRID_PER_EPSILON as f64) * self.params.epsilon
    }

    fn classify(&self, budget: f64) -> Budget {
        let gamma = self.mdp.gamma();
        let free_at = self.u_max / (1.0 - gamma);
        if self.params.epsilon == 0.0 {
            return if free_at <= 0.0 { Budget::Free } else { Budget::Grid(0) };
        }
        let cells = budget.max(0.0) / self.params.epsilon * BUDGET_GRID_PER_EPSILON as f64;
        // Shave a relative ulp-scale margin so float noise never rounds up.
        let k = (cells * (1.0 - 1e-12)).floor() as u64;
        if self.budget_value(k) >= free_at {
            Budget::Free
        } else {
            Budget::Grid(k)
        }
    }

    fn extend(&self, transitions: &[f64], rho0: &[f64]) -> Result<PessimisticTabularMdp> {
        let (n, m) = (self.mdp.n_states(), self.mdp.n_actions());
        let gamma = self.mdp.gamma();
        let start_budget = self.classify(self.params.epsilon);
        let start_budget = match start_budget {
            // The start budget is epsilon itself, never rounded.
            Budget::Grid(_) if self.params.epsilon > 0.0 => Budget::Grid(BUDGET_GRID_PER_EPSILON),
            b => b,
        };

        let mut ids: HashMap<(usize, Budget), usize> = HashMap::new();
        let mut labels: Vec<Option<(usize, Budget)>> = vec![None];
        let mut queue = VecDeque::new();
        let mut intern = |key: (usize, Budget),
                          labels: &mut Vec<Option<(usize, Budget)>>,
                          queue: &mut VecDeque<(usize, Budget)>|
         -> Result<usize> {
            if let Some(&id) = ids.get(&key) {
                return Ok(id);
            }
            let id = labels.len();
            if id >= self.params.max_nodes {
                return Err(Error::numeric(format!(
                    "extended MDP exceeds {} nodes",
                    self.params.max_nodes
                )));
            }
            ids.insert(key, id);
            labels.push(Some(key));
            queue.push_back(key);
            Ok(id)
        };

        let mut start = Vec::new();
        for (s, &p) in rho0.iter().enumerate() {
            if p > 0.0 {
                start.push((intern((s, start_budget), &mut labels, &mut queue)?, p));
            }
        }

        // Nodes are numbered in discovery order, which is also the order rows
        // are pushed, since the queue is FIFO.
        let mut builder = SparseMdpBuilder::new(m, gamma);
        let mut next_buf: Vec<(usize, f64)> = Vec::with_capacity(n);
        while let Some((s, budget)) = queue.pop_front() {
            for a in 0..m {
                let u = self.uncertainty[s * m + a];
                let base = self.mdp.reward(s, a) - self.params.lambda_pen * u;
                let row = &transitions[(s * m + a) * n..(s * m + a + 1) * n];
                let next_budget = match budget {
                    Budget::Free => Budget::Free,
                    Budget::Grid(k) => {
                        let remaining = self.budget_value(k);
                        if u > remaining {
                            builder.push_row(base - self.params.kappa, &[(SINK, 1.0)]);
                            continue;
                        }
                        if gamma == 0.0 {
                            Budget::Free
                        } else {
                            self.classify((remaining - u) / gamma)
                        }
                    }
                };
                next_buf.clear();
                for (s2, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        next_buf.push((intern((s2, next_budget), &mut labels, &mut queue)?, p));
                    }
                }
                builder.push_row(base, &next_buf);
            }
        }
        debug_assert_eq!(builder.rows_pushed(), labels.len() * m);
        Ok(PessimisticTabularMdp {
            mdp: builder.finish(start)?,
            labels,
            n_base_actions: m,
        })
    }
}
