//! Single-arm MDP primitives: transition kernels, rewards with an activation
//! charge, and discounted Bellman solvers.
//!
//! An arm is a two-action MDP (action 0 = passive, 1 = active). Under an
//! activation charge λ the per-step payoff is r(s,a) − λ·a and the optimal
//! value functions satisfy
//!
//! ```text
//! Q(s,a) = r(s,a) − λ·a + γ · Σ_{s'} P(s'|s,a) · V(s')
//! V(s)   = max_a Q(s,a)
//! ```
//!
//! `value_iteration` finds the fixpoint by successive approximation, stopping
//! when the sup-norm residual falls below tol·(1−γ)/(2γ), which guarantees
//! ‖V − V*‖∞ ≤ tol/2. `policy_evaluation` computes the finite-horizon
//! discounted value of a fixed policy exactly, by forward propagation of the
//! state distribution (no sampling).

use thiserror::Error;

/// Number of actions per arm: 0 = passive, 1 = active.
pub const ACTIONS: usize = 2;

/// Row sums may deviate from 1 by at most this much.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Errors from kernel construction and Bellman solvers.
#[derive(Debug, Error)]
pub enum MdpError {
    #[error("transition row (s={state}, a={action}) sums to {sum} instead of 1")]
    NonStochasticRow { state: usize, action: usize, sum: f64 },
    #[error("transition row (s={state}, a={action}) has an entry outside [0, 1]")]
    ProbabilityOutOfRange { state: usize, action: usize },
    #[error("discount factor {0} outside [0, 1)")]
    InvalidGamma(f64),
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },
    #[error("value iteration hit the sweep cap {max_sweeps} (residual {residual:.3e})")]
    NoConvergence { max_sweeps: usize, residual: f64 },
    #[error("{what} sized for {got} states, expected {expected}")]
    SizeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("policy assigns invalid action {action} at state {state}")]
    InvalidAction { state: usize, action: usize },
}

/// State space of one arm: the states are the indices `0..size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateSpace {
    size: usize,
}

impl StateSpace {
    /// A state space with `size` ≥ 1 states.
    pub fn new(size: usize) -> Self {
        assert!(size >= 1, "state space must have at least one state");
        Self { size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Iterator over all states.
    pub fn states(&self) -> std::ops::Range<usize> {
        0..self.size
    }
}

/// Row-stochastic transition probabilities P(s'|s,a) for one arm.
///
/// Stored densely as rows indexed by (s, a); all rows are validated to sum to
/// 1 within [`ROW_SUM_TOL`] at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    n_states: usize,
    rows: Vec<f64>,
}

impl TransitionKernel {
    /// Builds a kernel from `n_states·2·n_states` probabilities laid out as
    /// `rows[(s·2 + a)·n_states + s']`.
    pub fn from_rows(n_states: usize, rows: Vec<f64>) -> Result<Self, MdpError> {
        assert!(n_states >= 1, "kernel needs at least one state");
        if rows.len() != n_states * ACTIONS * n_states {
            return Err(MdpError::SizeMismatch {
                what: "transition rows",
                expected: n_states * ACTIONS * n_states,
                got: rows.len(),
            });
        }
        let kernel = Self { n_states, rows };
        for s in 0..n_states {
            for a in 0..ACTIONS {
                let row = kernel.row(s, a);
                let mut sum = 0.0;
                for &p in row {
                    if !p.is_finite() || !(-ROW_SUM_TOL..=1.0 + ROW_SUM_TOL).contains(&p) {
                        return Err(MdpError::ProbabilityOutOfRange { state: s, action: a });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(MdpError::NonStochasticRow { state: s, action: a, sum });
                }
            }
        }
        Ok(kernel)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// The distribution over next states from (s, a).
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * ACTIONS + a) * self.n_states;
        &self.rows[base..base + self.n_states]
    }

    pub fn prob(&self, s_next: usize, s: usize, a: usize) -> f64 {
        self.rows[(s * ACTIONS + a) * self.n_states + s_next]
    }

    /// max over (s,a) of Σ_{s'} |P(s'|s,a) − Q(s'|s,a)|: the row-level L1
    /// distance used by the drift model and the confidence balls.
    pub fn max_row_l1_distance(&self, other: &TransitionKernel) -> f64 {
        assert_eq!(self.n_states, other.n_states, "kernel size mismatch");
        let mut worst = 0.0f64;
        for s in 0..self.n_states {
            for a in 0..ACTIONS {
                let d: f64 = self
                    .row(s, a)
                    .iter()
                    .zip(other.row(s, a))
                    .map(|(p, q)| (p - q).abs())
                    .sum();
                worst = worst.max(d);
            }
        }
        worst
    }

    /// Raw bit pattern of every probability, for exact memo keys.
    pub fn bit_key(&self) -> Vec<u64> {
        self.rows.iter().map(|p| p.to_bits()).collect()
    }
}

/// Per-(state, action) rewards r(s,a).
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable {
    n_states: usize,
    values: Vec<f64>,
}

impl RewardTable {
    /// Builds a table from `n_states·2` values laid out as `values[s·2 + a]`.
    pub fn from_values(n_states: usize, values: Vec<f64>) -> Result<Self, MdpError> {
        if values.len() != n_states * ACTIONS {
            return Err(MdpError::SizeMismatch {
                what: "reward values",
                expected: n_states * ACTIONS,
                got: values.len(),
            });
        }
        if values.iter().any(|r| !r.is_finite()) {
            return Err(MdpError::NonFinite { what: "reward" });
        }
        Ok(Self { n_states, values })
    }

    /// Builds a table by evaluating `f(s, a)` over a state space.
    pub fn from_fn(space: StateSpace, f: impl Fn(usize, usize) -> f64) -> Result<Self, MdpError> {
        let values = space
            .states()
            .flat_map(|s| (0..ACTIONS).map(move |a| (s, a)))
            .map(|(s, a)| f(s, a))
            .collect();
        Self::from_values(space.size(), values)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn at(&self, s: usize, a: usize) -> f64 {
        self.values[s * ACTIONS + a]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Raw bit pattern of every reward, for exact memo keys.
    pub fn bit_key(&self) -> Vec<u64> {
        self.values.iter().map(|r| r.to_bits()).collect()
    }
}

/// Optimal value functions of one arm at a fixed activation charge λ.
#[derive(Debug, Clone)]
pub struct ValueFunctions {
    pub gamma: f64,
    pub lambda: f64,
    v: Vec<f64>,
    q: Vec<f64>,
    /// Number of Bellman sweeps performed to produce these values.
    pub sweeps: usize,
}

impl ValueFunctions {
    pub(crate) fn new(gamma: f64, lambda: f64, v: Vec<f64>, q: Vec<f64>, sweeps: usize) -> Self {
        Self { gamma, lambda, v, q, sweeps }
    }

    pub fn n_states(&self) -> usize {
        self.v.len()
    }

    pub fn v(&self, s: usize) -> f64 {
        self.v[s]
    }

    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * ACTIONS + a]
    }

    /// Q(s,1) − Q(s,0): positive where activating is strictly better.
    pub fn delta(&self, s: usize) -> f64 {
        self.q(s, 1) - self.q(s, 0)
    }

    /// Greedy action; exact ties prefer the passive action 0.
    pub fn greedy(&self, s: usize) -> usize {
        usize::from(self.q(s, 1) > self.q(s, 0))
    }

    pub fn values(&self) -> &[f64] {
        &self.v
    }
}

/// Sparse view of a kernel: per-(s,a) lists of (next state, probability > 0).
///
/// The experiment chains have two or three reachable next states per row, so
/// Bellman sweeps over this view are far cheaper than dense dot products.
pub(crate) struct SparseKernel {
    n_states: usize,
    offsets: Vec<u32>,
    entries: Vec<(u32, f64)>,
}

impl SparseKernel {
    pub(crate) fn new(kernel: &TransitionKernel) -> Self {
        let n = kernel.n_states();
        let mut offsets = Vec::with_capacity(n * ACTIONS + 1);
        let mut entries = Vec::with_capacity(n * ACTIONS * 2);
        offsets.push(0);
        for s in 0..n {
            for a in 0..ACTIONS {
                for (s_next, &p) in kernel.row(s, a).iter().enumerate() {
                    if p != 0.0 {
                        entries.push((s_next as u32, p));
                    }
                }
                offsets.push(entries.len() as u32);
            }
        }
        Self { n_states: n, offsets, entries }
    }

    pub(crate) fn n_states(&self) -> usize {
        self.n_states
    }

    #[inline]
    pub(crate) fn row(&self, s: usize, a: usize) -> &[(u32, f64)] {
        let i = s * ACTIONS + a;
        &self.entries[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }
}

/// One Jacobi sweep: fills `q_out` and `v_out` from `v`, returning the
/// sup-norm residual ‖v_out − v‖∞. Exact ties in the max prefer action 0.
#[inline]
pub(crate) fn sweep(
    sparse: &SparseKernel,
    rewards: &RewardTable,
    lambda: f64,
    gamma: f64,
    v: &[f64],
    v_out: &mut [f64],
    q_out: &mut [f64],
) -> f64 {
    let mut residual = 0.0f64;
    for s in 0..sparse.n_states() {
        let mut best = f64::NEG_INFINITY;
        for a in 0..ACTIONS {
            let mut expect = 0.0;
            for &(s_next, p) in sparse.row(s, a) {
                expect += p * v[s_next as usize];
            }
            let q = rewards.at(s, a) - lambda * a as f64 + gamma * expect;
            q_out[s * ACTIONS + a] = q;
            // strict > keeps action 0 on exact ties
            if a == 0 || q > best {
                best = q;
            }
        }
        v_out[s] = best;
        let diff = (best - v[s]).abs();
        if diff > residual {
            residual = diff;
        }
    }
    residual
}

/// One exact Bellman backup from the previous value function.
///
/// Returns Q and V after a single application of the Bellman operator to the
/// V implied by `v_prev` (callers iterating by hand can feed the output back
/// in). Validation covers γ, λ, and dimensions.
pub fn bellman_backup(
    kernel: &TransitionKernel,
    rewards: &RewardTable,
    lambda: f64,
    gamma: f64,
    v_prev: &[f64],
) -> Result<ValueFunctions, MdpError> {
    check_problem(kernel, rewards, lambda, gamma)?;
    if v_prev.len() != kernel.n_states() {
        return Err(MdpError::SizeMismatch {
            what: "previous value function",
            expected: kernel.n_states(),
            got: v_prev.len(),
        });
    }
    if v_prev.iter().any(|v| !v.is_finite()) {
        return Err(MdpError::NonFinite { what: "previous value function" });
    }
    let n = kernel.n_states();
    let sparse = SparseKernel::new(kernel);
    let mut v = vec![0.0; n];
    let mut q = vec![0.0; n * ACTIONS];
    sweep(&sparse, rewards, lambda, gamma, v_prev, &mut v, &mut q);
    Ok(ValueFunctions::new(gamma, lambda, v, q, 1))
}

/// Knobs for [`value_iteration_with`].
#[derive(Debug, Clone)]
pub struct ValueIterationOptions {
    /// Target sup-norm accuracy of V; the loop stops once the residual is
    /// below tol·(1−γ)/(2γ).
    pub tol: f64,
    /// Hard cap on sweeps before reporting non-convergence.
    pub max_sweeps: usize,
    /// Starting V (defaults to all zeros). A good warm start saves most of
    /// the sweeps when solving many nearby problems, as the index search does.
    pub warm_start: Option<Vec<f64>>,
}

impl Default for ValueIterationOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_sweeps: 100_000, warm_start: None }
    }
}

/// Solves for the optimal discounted Q/V at activation charge λ.
pub fn value_iteration(
    kernel: &TransitionKernel,
    rewards: &RewardTable,
    lambda: f64,
    gamma: f64,
    tol: f64,
) -> Result<ValueFunctions, MdpError> {
    value_iteration_with(
        kernel,
        rewards,
        lambda,
        gamma,
        &ValueIterationOptions { tol, ..Default::default() },
    )
}

/// [`value_iteration`] with explicit options.
pub fn value_iteration_with(
    kernel: &TransitionKernel,
    rewards: &RewardTable,
    lambda: f64,
    gamma: f64,
    opts: &ValueIterationOptions,
) -> Result<ValueFunctions, MdpError> {
    check_problem(kernel, rewards, lambda, gamma)?;
    if !opts.tol.is_finite() || opts.tol <= 0.0 {
        return Err(MdpError::NonFinite { what: "tolerance" });
    }
    let n = kernel.n_states();
    let sparse = SparseKernel::new(kernel);
    let mut v = match &opts.warm_start {
        Some(start) => {
            if start.len() != n {
                return Err(MdpError::SizeMismatch {
                    what: "warm start",
                    expected: n,
                    got: start.len(),
                });
            }
            start.clone()
        }
        None => vec![0.0; n],
    };
    let mut v_next = vec![0.0; n];
    let mut q = vec![0.0; n * ACTIONS];
    // Residual threshold guaranteeing ‖V − V*‖∞ ≤ tol/2; γ=0 converges in one
    // sweep, so any residual is acceptable there.
    let threshold = if gamma > 0.0 { opts.tol * (1.0 - gamma) / (2.0 * gamma) } else { f64::INFINITY };
    let mut prev_residual = f64::INFINITY;
    for sweeps in 1..=opts.max_sweeps {
        let residual = sweep(&sparse, rewards, lambda, gamma, &v, &mut v_next, &mut q);
        std::mem::swap(&mut v, &mut v_next);
        if prev_residual.is_finite() {
            // The Bellman operator is a γ-contraction in sup norm; violations
            // beyond floating-point slack mean the solver is broken.
            let scale = v.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            assert!(
                residual <= gamma * prev_residual + 1e-9 * scale,
                "value iteration lost contraction: residual {residual:.3e} after {prev_residual:.3e} (gamma {gamma})"
            );
        }
        prev_residual = residual;
        if residual <= threshold {
            return Ok(ValueFunctions::new(gamma, lambda, v, q, sweeps));
        }
    }
    Err(MdpError::NoConvergence { max_sweeps: opts.max_sweeps, residual: prev_residual })
}

/// Exact finite-horizon discounted value of a fixed policy.
///
/// Returns E[Σ_{h=1..horizon} γ^{h−1} (r(s_h, π(s_h)) − λ·π(s_h))] starting
/// from `start`, computed by propagating the state distribution forward.
pub fn policy_evaluation(
    policy: &[usize],
    kernel: &TransitionKernel,
    rewards: &RewardTable,
    lambda: f64,
    gamma: f64,
    horizon: usize,
    start: usize,
) -> Result<f64, MdpError> {
    check_problem(kernel, rewards, lambda, gamma)?;
    let n = kernel.n_states();
    if policy.len() != n {
        return Err(MdpError::SizeMismatch { what: "policy", expected: n, got: policy.len() });
    }
    for (s, &a) in policy.iter().enumerate() {
        if a >= ACTIONS {
            return Err(MdpError::InvalidAction { state: s, action: a });
        }
    }
    assert!(start < n, "start state {start} out of range");
    let mut dist = vec![0.0; n];
    dist[start] = 1.0;
    let mut next = vec![0.0; n];
    let mut total = 0.0;
    let mut discount = 1.0;
    for _ in 0..horizon {
        let mut step = 0.0;
        next.iter_mut().for_each(|p| *p = 0.0);
        for s in 0..n {
            let mass = dist[s];
            if mass == 0.0 {
                continue;
            }
            let a = policy[s];
            step += mass * (rewards.at(s, a) - lambda * a as f64);
            for (s_next, &p) in kernel.row(s, a).iter().enumerate() {
                if p != 0.0 {
                    next[s_next] += mass * p;
                }
            }
        }
        total += discount * step;
        discount *= gamma;
        std::mem::swap(&mut dist, &mut next);
    }
    Ok(total)
}

fn check_problem(
    kernel: &TransitionKernel,
    rewards: &RewardTable,
    lambda: f64,
    gamma: f64,
) -> Result<(), MdpError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(MdpError::InvalidGamma(gamma));
    }
    if !lambda.is_finite() {
        return Err(MdpError::NonFinite { what: "lambda" });
    }
    if rewards.n_states() != kernel.n_states() {
        return Err(MdpError::SizeMismatch {
            what: "reward table",
            expected: kernel.n_states(),
            got: rewards.n_states(),
        });
    }
    Ok(())
}
