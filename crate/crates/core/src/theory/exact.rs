//! Exact evaluation of finite MDPs.
//!
//! Base MDPs are small and solved with a dense LU factorization. The
//! budget-extended MDPs built by [`crate::truncation::pessimistic`] can have
//! tens of thousands of nodes, but their transition graph is nearly acyclic
//! (the remaining budget mostly shrinks), so [`SparseMdp`] solves the
//! policy-induced chain one strongly connected component at a time.

use nalgebra::{DMatrix, DVector};

use crate::env::tabular::{check_simplex, StochasticPolicy, TabularMdp};
use crate::error::{check_dim, Error, Result};

/// Components up to this size are solved by dense LU; larger ones by
/// Gauss-Seidel sweeps.
const DENSE_COMPONENT_LIMIT: usize = 600;
const RESIDUAL_TOL: f64 = 1e-12;
const ITERATIVE_TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 200_000;

/// Total variation distance `0.5 * sum |p_i - q_i|` between two distributions.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    check_dim("tv_distance", p.len(), q.len())?;
    check_simplex(p).map_err(|e| Error::param(format!("tv_distance p: {e}")))?;
    check_simplex(q).map_err(|e| Error::param(format!("tv_distance q: {e}")))?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// State values `V^pi` of a base MDP via `(I - gamma P_pi) V = r_pi`.
pub fn policy_values(mdp: &TabularMdp, policy: &StochasticPolicy) -> Result<Vec<f64>> {
    check_dim("policy states", mdp.n_states(), policy.n_states())?;
    check_dim("policy actions", mdp.n_actions(), policy.n_actions())?;
    let n = mdp.n_states();
    let gamma = mdp.gamma();
    let mut system = DMatrix::<f64>::identity(n, n);
    let mut r_pi = DVector::<f64>::zeros(n);
    for s in 0..n {
        for (a, &pa) in policy.action_probs(s).iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            r_pi[s] += pa * mdp.reward(s, a);
            for (s2, &p) in mdp.next_dist(s, a).iter().enumerate() {
                system[(s, s2)] -= gamma * pa * p;
            }
        }
    }
    let v = system
        .clone()
        .lu()
        .solve(&r_pi)
        .ok_or_else(|| Error::numeric("singular policy-evaluation system"))?;
    let residual = (&system * &v - &r_pi).amax();
    let scale = v.amax().max(1.0);
    if !(residual <= RESIDUAL_TOL * scale) {
        return Err(Error::numeric(format!(
            "policy-evaluation residual {residual:e} above tolerance"
        )));
    }
    Ok(v.iter().copied().collect())
}

/// Expected discounted return `rho0^T (I - gamma P_pi)^{-1} r_pi`.
pub fn exact_return(mdp: &TabularMdp, policy: &StochasticPolicy, rho0: &[f64]) -> Result<f64> {
    check_dim("rho0", mdp.n_states(), rho0.len())?;
    check_simplex(rho0).map_err(|e| Error::param(format!("rho0: {e}")))?;
    let v = policy_values(mdp, policy)?;
    Ok(rho0.iter().zip(&v).map(|(p, v)| p * v).sum())
}

/// Optimal values and action-values by value iteration to a fixed point.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    let mut v = vec![0.0; n];
    let mut q = vec![0.0; n * m];
    loop {
        let mut delta: f64 = 0.0;
        for s in 0..n {
            for a in 0..m {
                let next: f64 = mdp.next_dist(s, a).iter().zip(&v).map(|(p, v)| p * v).sum();
                q[s * m + a] = mdp.reward(s, a) + mdp.gamma() * next;
            }
        }
        for s in 0..n {
            let best = q[s * m..(s + 1) * m].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - v[s]).abs());
            v[s] = best;
        }
        if delta <= tol {
            return (v, q);
        }
    }
}

/// Optimal deterministic policy by policy iteration (exact evaluation).
/// Ties are broken toward the lowest action index.
pub fn policy_iteration(mdp: &TabularMdp) -> Result<(StochasticPolicy, Vec<f64>)> {
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    let mut actions: Vec<usize> = (0..n)
        .map(|s| argmax_first((0..m).map(|a| mdp.reward(s, a))))
        .collect();
    loop {
        let policy = StochasticPolicy::deterministic(m, &actions)?;
        let v = policy_values(mdp, &policy)?;
        let mut changed = false;
        for s in 0..n {
            let q = |a: usize| {
                mdp.reward(s, a)
                    + mdp.gamma() * mdp.next_dist(s, a).iter().zip(&v).map(|(p, v)| p * v).sum::<f64>()
            };
            let current = q(actions[s]);
            let best = argmax_first((0..m).map(q));
            if q(best) > current + 1e-12 * current.abs().max(1.0) {
                actions[s] = best;
                changed = true;
            }
        }
        if !changed {
            return Ok((policy, v));
        }
    }
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in values.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// A finite MDP with sparse, fully stochastic rows.
///
/// Node 0 is always an absorbing zero-reward sink, so "stop the process"
/// is expressed as a transition into it.
#[derive(Debug, Clone)]
pub struct SparseMdp {
    n_actions: usize,
    gamma: f64,
    row_start: Vec<usize>,
    edges: Vec<(usize, f64)>,
    rewards: Vec<f64>,
    start: Vec<(usize, f64)>,
}

pub const SINK: usize = 0;

/// Incremental builder for [`SparseMdp`]; rows must be pushed in node order.
pub struct SparseMdpBuilder {
    n_actions: usize,
    gamma: f64,
    row_start: Vec<usize>,
    edges: Vec<(usize, f64)>,
    rewards: Vec<f64>,
}

impl SparseMdpBuilder {
    pub fn new(n_actions: usize, gamma: f64) -> Self {
        let mut b = Self {
            n_actions,
            gamma,
            row_start: vec![0],
            edges: Vec::new(),
            rewards: Vec::new(),
        };
        for _ in 0..n_actions {
            b.push_row(0.0, &[(SINK, 1.0)]);
        }
        b
    }

    pub fn push_row(&mut self, reward: f64, next: &[(usize, f64)]) {
        self.edges.extend_from_slice(next);
        self.row_start.push(self.edges.len());
        self.rewards.push(reward);
    }

    pub fn rows_pushed(&self) -> usize {
        self.rewards.len()
    }

    pub fn finish(self, start: Vec<(usize, f64)>) -> Result<SparseMdp> {
        if self.rewards.len() % self.n_actions != 0 {
            return Err(Error::param("incomplete node: rows must come in groups of n_actions"));
        }
        let mdp = SparseMdp {
            n_actions: self.n_actions,
            gamma: self.gamma,
            row_start: self.row_start,
            edges: self.edges,
            rewards: self.rewards,
            start,
        };
        mdp.validate()?;
        Ok(mdp)
    }
}

impl SparseMdp {
    pub fn n_nodes(&self) -> usize {
        self.rewards.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn start(&self) -> &[(usize, f64)] {
        &self.start
    }

    pub fn reward(&self, node: usize, action: usize) -> f64 {
        self.rewards[node * self.n_actions + action]
    }

    pub fn next(&self, node: usize, action: usize) -> &[(usize, f64)] {
        let row = node * self.n_actions + action;
        &self.edges[self.row_start[row]..self.row_start[row + 1]]
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_nodes();
        for row in 0..self.rewards.len() {
            let edges = &self.edges[self.row_start[row]..self.row_start[row + 1]];
            let mass: f64 = edges.iter().map(|e| e.1).sum();
            if (mass - 1.0).abs() > 1e-12 || edges.iter().any(|e| e.0 >= n || e.1 < 0.0) {
                return Err(Error::param(format!("row {row} is not a stochastic row over nodes")));
            }
        }
        let mass: f64 = self.start.iter().map(|e| e.1).sum();
        if (mass - 1.0).abs() > 1e-12 || self.start.iter().any(|e| e.0 >= n) {
            return Err(Error::param("start distribution is not a distribution over nodes"));
        }
        Ok(())
    }

    /// Values of every node under a (node-level) stochastic policy.
    pub fn evaluate(&self, policy: &dyn Fn(usize) -> Vec<(usize, f64)>) -> Result<Vec<f64>> {
        let n = self.n_nodes();
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
        let mut r = vec![0.0; n];
        for x in 0..n {
            let mut row: Vec<(usize, f64)> = Vec::new();
            for (a, pa) in policy(x) {
                if pa == 0.0 {
                    continue;
                }
                r[x] += pa * self.reward(x, a);
                for &(y, p) in self.next(x, a) {
                    row.push((y, pa * p));
                }
            }
            row.sort_unstable_by_key(|e| e.0);
            row.dedup_by(|b, a| {
                if a.0 == b.0 {
                    a.1 += b.1;
                    true
                } else {
                    false
                }
            });
            rows.push(row);
        }
        solve_chain(&rows, &r, self.gamma)
    }

    /// Return from the start distribution under a node-level policy.
    pub fn policy_return(&self, policy: &dyn Fn(usize) -> Vec<(usize, f64)>) -> Result<f64> {
        let v = self.evaluate(policy)?;
        Ok(self.start.iter().map(|&(x, p)| p * v[x]).sum())
    }

    /// Optimal deterministic node policy by policy iteration. Returns the
    /// chosen action per node and the node values.
    pub fn policy_iteration(&self) -> Result<(Vec<usize>, Vec<f64>)> {
        let n = self.n_nodes();
        let m = self.n_actions;
        let mut actions: Vec<usize> = (0..n)
            .map(|x| argmax_first((0..m).map(|a| self.reward(x, a))))
            .collect();
        loop {
            let current = actions.clone();
            let v = self.evaluate(&|x| vec![(current[x], 1.0)])?;
            let mut changed = false;
            for x in 0..n {
                let q = |a: usize| {
                    self.reward(x, a)
                        + self.gamma * self.next(x, a).iter().map(|&(y, p)| p * v[y]).sum::<f64>()
                };
                let here = q(actions[x]);
                let best = argmax_first((0..m).map(q));
                if q(best) > here + 1e-12 * here.abs().max(1.0) {
                    actions[x] = best;
                    changed = true;
                }
            }
            if !changed {
                return Ok((actions, v));
            }
        }
    }
}

/// Solves `v = r + gamma P v` for a Markov reward process with sparse rows.
pub fn solve_chain(rows: &[Vec<(usize, f64)>], r: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let n = rows.len();
    let components = tarjan_scc(rows);
    let mut v = vec![0.0; n];
    let mut comp_of = vec![usize::MAX; n];
    // Tarjan emits components in reverse topological order: every edge
    // leaving a component points into one already emitted.
    for (ci, comp) in components.iter().enumerate() {
        for &x in comp {
            comp_of[x] = ci;
        }
        let external = |x: usize| -> f64 {
            rows[x]
                .iter()
                .filter(|e| comp_of[e.0] != ci)
                .map(|&(y, p)| p * v[y])
                .sum()
        };
        if comp.len() == 1 && !rows[comp[0]].iter().any(|e| e.0 == comp[0]) {
            let x = comp[0];
            v[x] = r[x] + gamma * external(x);
        } else if comp.len() <= DENSE_COMPONENT_LIMIT {
            let k = comp.len();
            let local: std::collections::HashMap<usize, usize> =
                comp.iter().enumerate().map(|(i, &x)| (x, i)).collect();
            let mut a = DMatrix::<f64>::identity(k, k);
            let mut b = DVector::<f64>::zeros(k);
            for (i, &x) in comp.iter().enumerate() {
                b[i] = r[x] + gamma * external(x);
                for &(y, p) in &rows[x] {
                    if let Some(&j) = local.get(&y) {
                        a[(i, j)] -= gamma * p;
                    }
                }
            }
            let sol = a
                .clone()
                .lu()
                .solve(&b)
                .ok_or_else(|| Error::numeric("singular component system"))?;
            for (i, &x) in comp.iter().enumerate() {
                v[x] = sol[i];
            }
        } else {
            let base: Vec<f64> = comp.iter().map(|&x| r[x] + gamma * external(x)).collect();
            let mut sweeps = 0;
            loop {
                let mut delta: f64 = 0.0;
                let mut scale: f64 = 1.0;
                for (i, &x) in comp.iter().enumerate() {
                    let inner: f64 = rows[x]
                        .iter()
                        .filter(|e| comp_of[e.0] == ci)
                        .map(|&(y, p)| p * v[y])
                        .sum();
                    let new = base[i] + gamma * inner;
                    delta = delta.max((new - v[x]).abs());
                    scale = scale.max(new.abs());
                    v[x] = new;
                }
                sweeps += 1;
                if delta <= ITERATIVE_TOL * scale {
                    break;
                }
                if sweeps >= MAX_SWEEPS {
                    return Err(Error::numeric("Gauss-Seidel did not converge"));
                }
            }
        }
    }
    let scale = v.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let residual = (0..n)
        .map(|x| {
            let pv: f64 = rows[x].iter().map(|&(y, p)| p * v[y]).sum();
            (v[x] - r[x] - gamma * pv).abs()
        })
        .fold(0.0, f64::max);
    if !(residual <= 1e-11 * scale) {
        return Err(Error::numeric(format!("chain solve residual {residual:e} above tolerance")));
    }
    Ok(v)
}

/// Iterative Tarjan; components come out in reverse topological order.
fn tarjan_scc(rows: &[Vec<(usize, f64)>]) -> Vec<Vec<usize>> {
    let n = rows.len();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    let mut counter = 0;
    let mut call: Vec<(usize, usize)> = Vec::new();
    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        call.push((root, 0));
        while let Some(&mut (x, ref mut edge)) = call.last_mut() {
            if *edge == 0 && index[x] == usize::MAX {
                index[x] = counter;
                low[x] = counter;
                counter += 1;
                stack.push(x);
                on_stack[x] = true;
            }
            if *edge < rows[x].len() {
                let y = rows[x][*edge].0;
                *edge += 1;
                if index[y] == usize::MAX {
                    call.push((y, 0));
                } else if on_stack[y] {
                    low[x] = low[x].min(index[y]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                low[parent] = low[parent].min(low[x]);
            }
            if low[x] == index[x] {
                let mut comp = Vec::new();
                loop {
                    let y = stack.pop().expect("tarjan stack underflow");
                    on_stack[y] = false;
                    comp.push(y);
                    if y == x {
                        break;
                    }
                }
                out.push(comp);
            }
        }
    }
    out
}
