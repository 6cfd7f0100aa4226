//! Whittle indices for two-action restless arms.
//!
//! At activation charge λ the arm's optimal values satisfy
//! Q_λ(s,a) = r(s,a) − λ·a + γ·Σ P(s'|s,a)·V_λ(s'). The Whittle index of a
//! state is the smallest charge that makes the passive action weakly optimal
//! there:
//!
//! ```text
//! W(s) = inf { λ : Q_λ(s,0) ≥ Q_λ(s,1) }
//! ```
//!
//! On an indexable arm the activate set {s : Q_λ(s,1) > Q_λ(s,0)} only
//! shrinks as λ grows, so W(s) is found by bisecting on the sign of
//! Δ_λ(s) = Q_λ(s,1) − Q_λ(s,0).
//!
//! Bracketing: for λ ≥ 0 every policy earns per-step payoff in
//! [r_min − λ, r_max], and the all-passive policy is always available, so
//! V_λ ∈ [r_min/(1−γ), r_max/(1−γ)] regardless of λ. Plugging that span into
//! Δ gives Δ_λ(s) ≤ (r_max − r_min) − λ + γ(r_max − r_min)/(1−γ), which is
//! ≤ 0 once λ ≥ (r_max − r_min)/(1−γ). That value is the default search
//! ceiling; with a negative search floor the ceiling grows by
//! γ·|λ_lo|/(1−γ) to keep the same argument valid.
//!
//! Sign certification: value iteration stopped at sup-norm residual ρ has
//! ‖V − V*‖ ≤ γρ/(1−γ) and the Q table lags V by one sweep, giving
//! |Δ − Δ*| ≤ 2γρ/(1−γ). The search treats a computed Δ as positive only
//! when it exceeds that bound; anything uncertain counts as ≤ 0, which
//! biases ties toward the leftmost crossing, matching the infimum in the
//! definition.
//!
//! The table builder shares every value-function solve across all states:
//! it bisects intervals of λ, partitioning the states whose crossing lies
//! inside, so arms whose states flip at different charges still cost one
//! warm-started solve per probed λ.

use crate::mdp::{self, MdpError, RewardTable, TransitionKernel, ACTIONS};
use thiserror::Error;

/// Errors from index search and indexability probing.
#[derive(Debug, Error)]
pub enum WhittleError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("lambda bracket [{lo}, {hi}] is empty or non-finite")]
    BadBracket { lo: f64, hi: f64 },
    #[error("search tolerance {0} must be positive and finite")]
    BadSearchTol(f64),
    #[error("state {state} out of range for {n_states} states")]
    BadState { state: usize, n_states: usize },
    #[error(
        "activation advantage {delta:.3e} still positive at lambda_max={lambda_max} for state {state}; raise lambda_max"
    )]
    NotBracketed { state: usize, lambda_max: f64, delta: f64 },
}

/// Knobs for the index search.
#[derive(Debug, Clone)]
pub struct IndexSearchOptions {
    /// Width of the final λ bracket; the returned index sits within about
    /// 0.6·search_tol of the true crossing.
    pub search_tol: f64,
    /// Lower end of the search range. Indices at or below it clamp to it.
    pub lambda_lo: f64,
    /// Upper end of the search range; `None` derives the provably
    /// sufficient ceiling from the reward span.
    pub lambda_max: Option<f64>,
    /// Per-solve sweep cap passed through to value iteration.
    pub max_sweeps: usize,
}

impl Default for IndexSearchOptions {
    fn default() -> Self {
        Self { search_tol: 1e-4, lambda_lo: 0.0, lambda_max: None, max_sweeps: 200_000 }
    }
}

/// Whittle indices of every state of one arm.
#[derive(Debug, Clone)]
pub struct WhittleIndexTable {
    indices: Vec<f64>,
    pub lambda_lo: f64,
    pub lambda_max: f64,
    pub search_tol: f64,
}

impl WhittleIndexTable {
    pub fn n_states(&self) -> usize {
        self.indices.len()
    }

    pub fn index(&self, s: usize) -> f64 {
        self.indices[s]
    }

    pub fn indices(&self) -> &[f64] {
        &self.indices
    }
}

/// Nesting check of activate sets over a λ grid.
#[derive(Debug, Clone)]
pub struct IndexabilityReport {
    /// True when no state certifiably re-entered the activate set at a
    /// larger charge anywhere on the grid.
    pub indexable: bool,
    pub lambda_grid: Vec<f64>,
    /// Number of states with Δ ≤ 0 at each grid point; nondecreasing on an
    /// indexable arm up to certification noise.
    pub passive_set_sizes: Vec<usize>,
    /// First (λ, state) where nesting certifiably broke.
    pub first_violation: Option<(f64, usize)>,
}

/// The reward-span ceiling above which activation is never strictly optimal.
pub fn default_lambda_max(rewards: &RewardTable, gamma: f64, lambda_lo: f64) -> f64 {
    let span = rewards.max() - rewards.min();
    (((span + gamma * (-lambda_lo).max(0.0)) / (1.0 - gamma)).max(lambda_lo)).max(0.0)
}

/// Warm-started Δ evaluator shared by the search paths.
///
/// `eval` sweeps until either every requested state's sign is certified or
/// the residual floor is reached, and returns the certification bound that
/// the stored deltas carry.
struct DeltaSolver<'a> {
    sparse: mdp::SparseKernel,
    rewards: &'a RewardTable,
    gamma: f64,
    res_floor: f64,
    max_sweeps: usize,
    v: Vec<f64>,
    v_scratch: Vec<f64>,
    q: Vec<f64>,
    deltas: Vec<f64>,
}

impl<'a> DeltaSolver<'a> {
    fn new(
        kernel: &TransitionKernel,
        rewards: &'a RewardTable,
        gamma: f64,
        search_tol: f64,
        max_sweeps: usize,
    ) -> Self {
        let n = kernel.n_states();
        // At the floor the deltas are trusted to within 5% of the bracket
        // width, which the bisection treats as "uncertain counts as ≤ 0".
        let err_floor = 0.05 * search_tol;
        let res_floor =
            if gamma > 0.0 { err_floor * (1.0 - gamma) / (2.0 * gamma) } else { f64::INFINITY };
        Self {
            sparse: mdp::SparseKernel::new(kernel),
            rewards,
            gamma,
            res_floor,
            max_sweeps,
            v: vec![0.0; n],
            v_scratch: vec![0.0; n],
            q: vec![0.0; n * ACTIONS],
            deltas: vec![0.0; n],
        }
    }

    fn err_of(&self, residual: f64) -> f64 {
        if self.gamma > 0.0 { 2.0 * self.gamma * residual / (1.0 - self.gamma) } else { 0.0 }
    }

    fn eval(&mut self, lambda: f64, need: &[u32]) -> Result<f64, WhittleError> {
        let mut prev_residual = f64::INFINITY;
        for _ in 0..self.max_sweeps {
            let residual = mdp::sweep(
                &self.sparse,
                self.rewards,
                lambda,
                self.gamma,
                &self.v,
                &mut self.v_scratch,
                &mut self.q,
            );
            std::mem::swap(&mut self.v, &mut self.v_scratch);
            if prev_residual.is_finite() {
                let scale = self.v.iter().fold(1.0f64, |m, x| m.max(x.abs()));
                assert!(
                    residual <= self.gamma * prev_residual + 1e-9 * scale,
                    "index search lost contraction: residual {residual:.3e} after {prev_residual:.3e}"
                );
            }
            prev_residual = residual;
            for s in 0..self.deltas.len() {
                self.deltas[s] = self.q[s * ACTIONS + 1] - self.q[s * ACTIONS];
            }
            let err = self.err_of(residual);
            if residual <= self.res_floor
                || need.iter().all(|&s| self.deltas[s as usize].abs() > err)
            {
                return Ok(err.min(self.err_of(self.res_floor.min(residual))));
            }
        }
        Err(MdpError::NoConvergence { max_sweeps: self.max_sweeps, residual: prev_residual }
            .into())
    }
}

fn check_search(
    kernel: &TransitionKernel,
    rewards: &RewardTable,
    gamma: f64,
    opts: &IndexSearchOptions,
) -> Result<(f64, f64), WhittleError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(MdpError::InvalidGamma(gamma).into());
    }
    if rewards.n_states() != kernel.n_states() {
        return Err(MdpError::SizeMismatch {
            what: "reward table",
            expected: kernel.n_states(),
            got: rewards.n_states(),
        }
        .into());
    }
    if !opts.search_tol.is_finite() || opts.search_tol <= 0.0 {
        return Err(WhittleError::BadSearchTol(opts.search_tol));
    }
    let lo = opts.lambda_lo;
    let hi = opts.lambda_max.unwrap_or_else(|| default_lambda_max(rewards, gamma, lo));
    if !lo.is_finite() || !hi.is_finite() || hi < lo {
        return Err(WhittleError::BadBracket { lo, hi });
    }
    Ok((lo, hi))
}

fn indices_for_states(
    kernel: &TransitionKernel,
    rewards: &RewardTable,
    gamma: f64,
    opts: &IndexSearchOptions,
    states: &[usize],
    out: &mut [f64],
) -> Result<(f64, f64), WhittleError> {
    let (lambda_lo, lambda_max) = check_search(kernel, rewards, gamma, opts)?;
    for &s in states {
        if s >= kernel.n_states() {
            return Err(WhittleError::BadState { state: s, n_states: kernel.n_states() });
        }
    }
    let mut solver = DeltaSolver::new(kernel, rewards, gamma, opts.search_tol, opts.max_sweeps);
    let need: Vec<u32> = states.iter().map(|&s| s as u32).collect();
    let err = solver.eval(lambda_lo, &need)?;
    let mut undecided: Vec<u32> = Vec::new();
    for &s in &need {
        if solver.deltas[s as usize] > err {
            undecided.push(s);
        } else {
            out[s as usize] = lambda_lo;
        }
    }
    if !undecided.is_empty() {
        let err = solver.eval(lambda_max, &undecided)?;
        if let Some(&s) =
            undecided.iter().find(|&&s| solver.deltas[s as usize] > err)
        {
            return Err(WhittleError::NotBracketed {
                state: s as usize,
                lambda_max,
                delta: solver.deltas[s as usize],
            });
        }
        let mut stack = vec![(lambda_lo, lambda_max, undecided)];
        while let Some((lo, hi, group)) = stack.pop() {
            if hi - lo <= opts.search_tol {
                let mid = 0.5 * (lo + hi);
                for s in group {
                    out[s as usize] = mid;
                }
                continue;
            }
            let mid = 0.5 * (lo + hi);
            let err = solver.eval(mid, &group)?;
            let (right, left): (Vec<u32>, Vec<u32>) =
                group.into_iter().partition(|&s| solver.deltas[s as usize] > err);
            if !left.is_empty() {
                stack.push((lo, mid, left));
            }
            if !right.is_empty() {
                stack.push((mid, hi, right));
            }
        }
    }
    Ok((lambda_lo, lambda_max))
}

/// Whittle index of one state, assuming the arm is indexable.
///
/// Bisects Δ_λ(state) over [0, lambda_max], deriving the ceiling from the
/// reward span when `lambda_max` is `None`. The result is within about
/// 0.6·search_tol of the true crossing; indices at or below the floor clamp
/// to it.
pub fn whittle_index(
    kernel: &TransitionKernel,
    rewards: &RewardTable,
    gamma: f64,
    state: usize,
    search_tol: f64,
    lambda_max: Option<f64>,
) -> Result<f64, WhittleError> {
    whittle_index_with(
        kernel,
        rewards,
        gamma,
        state,
        &IndexSearchOptions { search_tol, lambda_max, ..Default::default() },
    )
}

/// [`whittle_index`] with explicit options.
pub fn whittle_index_with(
    kernel: &TransitionKernel,
    rewards: &RewardTable,
    gamma: f64,
    state: usize,
    opts: &IndexSearchOptions,
) -> Result<f64, WhittleError> {
    let mut out = vec![f64::NAN; kernel.n_states()];
    indices_for_states(kernel, rewards, gamma, opts, &[state], &mut out)?;
    Ok(out[state])
}

/// Whittle indices of all states, sharing value-function solves across the
/// whole bisection.
pub fn whittle_index_table(
    kernel: &TransitionKernel,
    rewards: &RewardTable,
    gamma: f64,
    opts: &IndexSearchOptions,
) -> Result<WhittleIndexTable, WhittleError> {
    let states: Vec<usize> = (0..kernel.n_states()).collect();
    let mut indices = vec![f64::NAN; kernel.n_states()];
    let (lambda_lo, lambda_max) =
        indices_for_states(kernel, rewards, gamma, opts, &states, &mut indices)?;
    Ok(WhittleIndexTable { indices, lambda_lo, lambda_max, search_tol: opts.search_tol })
}

/// States where activating is strictly better than resting at charge λ.
///
/// Near-indifferent states resolve by the sign of the computed advantage at
/// the given solve tolerance.
pub fn activate_set(
    kernel: &TransitionKernel,
    rewards: &RewardTable,
    gamma: f64,
    lambda: f64,
    vi_tol: f64,
) -> Result<Vec<usize>, WhittleError> {
    let vf = mdp::value_iteration(kernel, rewards, lambda, gamma, vi_tol)?;
    Ok((0..kernel.n_states()).filter(|&s| vf.delta(s) > 0.0).collect())
}

/// Sweeps a λ grid checking that activate sets only shrink.
///
/// A state counts as a violation only when it certifiably left the activate
/// set at some charge and certifiably re-entered it at a larger one, so
/// solver noise near indifference points cannot produce false negatives.
pub fn indexability_probe(
    kernel: &TransitionKernel,
    rewards: &RewardTable,
    gamma: f64,
    grid_points: usize,
    opts: &IndexSearchOptions,
) -> Result<IndexabilityReport, WhittleError> {
    assert!(grid_points >= 2, "need at least two grid points");
    let (lambda_lo, lambda_max) = check_search(kernel, rewards, gamma, opts)?;
    let n = kernel.n_states();
    let mut solver = DeltaSolver::new(kernel, rewards, gamma, opts.search_tol, opts.max_sweeps);
    let need: Vec<u32> = (0..n as u32).collect();
    let mut lambda_grid = Vec::with_capacity(grid_points);
    let mut passive_set_sizes = Vec::with_capacity(grid_points);
    let mut last_certain: Vec<i8> = vec![0; n];
    let mut first_violation = None;
    for i in 0..grid_points {
        let frac = i as f64 / (grid_points - 1) as f64;
        let lambda = lambda_lo + frac * (lambda_max - lambda_lo);
        let err = solver.eval(lambda, &need)?;
        lambda_grid.push(lambda);
        passive_set_sizes.push((0..n).filter(|&s| solver.deltas[s] <= 0.0).count());
        for (s, cert) in last_certain.iter_mut().enumerate() {
            if solver.deltas[s] > err {
                if *cert < 0 && first_violation.is_none() {
                    first_violation = Some((lambda, s));
                }
                *cert = 1;
            } else if solver.deltas[s] < -err {
                *cert = -1;
            }
        }
    }
    Ok(IndexabilityReport {
        indexable: first_violation.is_none(),
        lambda_grid,
        passive_set_sizes,
        first_violation,
    })
}

/// Per-step payoff of holding age `h` in the freshness chain:
/// g(h) = −log2(1 − (σ²)ʰ)/2 with 0 < σ² < 1.
pub fn aoi_reward(sigma2: f64, age: usize) -> f64 {
    assert!(age >= 1, "ages start at 1");
    assert!(sigma2 > 0.0 && sigma2 < 1.0, "sigma2 must lie in (0, 1)");
    -0.5 * (1.0 - sigma2.powi(age as i32)).log2()
}

/// Average-reward Whittle index of the freshness chain, in closed form.
///
/// The chain ages by one each step; activating resets the age to 1 with
/// probability q, at charge λ per attempt. Under a threshold policy
/// "activate at age ≥ τ" a renewal cycle has expected length (τ−1) + 1/q and
/// expected payoff Σ_{j<τ} g(j) + A(τ) − λ/q, with
/// A(m) = Σ_{i≥0} (1−q)^i g(m+i) the expected payoff collected during the
/// attempt phase. Setting the average rewards of thresholds h and h+1 equal
/// and simplifying with A(h) = g(h) + (1−q)A(h+1) gives
///
/// ```text
/// W(h) = q · ( Σ_{j=1..h} g(j) − q·h·A(h+1) )
/// ```
///
/// which is nonnegative and nondecreasing in h because g decreases, so the
/// chain is indexable. The γ-discounted index converges to this value as
/// γ → 1.
pub fn aoi_closed_form_index(q: f64, sigma2: f64, age: usize) -> f64 {
    assert!((0.0..=1.0).contains(&q), "reset probability must lie in [0, 1]");
    assert!(age >= 1, "ages start at 1");
    if q == 0.0 {
        // a channel that never delivers earns no subsidy
        return 0.0;
    }
    let head: f64 = (1..=age).map(|j| aoi_reward(sigma2, j)).sum();
    // tail series: terms decay like ((1−q)·σ²)^i, and g itself underflows to
    // exactly 0 once σ²ʰ does, so the break always triggers
    let mut tail = 0.0;
    let mut weight = 1.0;
    for i in 0.. {
        let term = weight * aoi_reward(sigma2, age + 1 + i);
        tail += term;
        weight *= 1.0 - q;
        if term < 1e-16 * (1.0 + tail) || weight == 0.0 {
            break;
        }
    }
    q * (head - q * age as f64 * tail)
}
