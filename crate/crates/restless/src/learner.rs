//! Sliding-window optimistic learning for arms with drifting kernels.
//!
//! The learner never sees an arm's transition kernel. What it does get, per
//! (state, action) row, is one of three kinds of prior knowledge: the row is
//! known exactly, the row is fixed but unknown, or the row may drift by at
//! most ε in L1 per episode. Unknown rows also come with a support: the set
//! of states the row can reach at all (its complement is the structural zero
//! set, and observing a transition into it is a hard error).
//!
//! Fixed rows are estimated from all history; drifting rows from a sliding
//! window of the last w completed episodes, so that stale pre-drift samples
//! age out. Around the empirical row P̂ the learner puts an L1 ball of radius
//!
//! ```text
//! fixed:    d₁ = min(2, √(2|S|·ln(2|Z₁|NT/η₁) / max(C_hist, 1)))
//! drifting: d₂ = min(2, √(2|S|·ln(2|Z₂|NT/η₂) / max(C_w, 1)) + w·ε)
//! ```
//!
//! where C counts the samples behind the estimate, |Z₁| and |Z₂| count the
//! arm's rows of each kind, and the w·ε term pays for drift inside the
//! window itself. With probability 1−η₁−η₂ every true row lies inside its
//! ball in every episode.
//!
//! Planning is optimistic: among the kernels in the ball, use the one that
//! maximizes the value at the current activation charge λ. Per row the
//! maximizer moves min(d/2, headroom) of probability onto the best reachable
//! state and drains it from the worst ones, so for a fixed value ordering it
//! has a closed form. When the optimal values are known to be monotone in
//! the state index (birth-death ladders, freshness chains) that ordering is
//! fixed a priori and one transport suffices; otherwise extended value
//! iteration re-derives the ordering every sweep until the joint fixpoint.
//!
//! An episode then plays the top-M arms by current-state Whittle index for H
//! slots, and the charge couples consecutive episodes: λ for the next episode
//! is the M-th highest current-state index at the last slot of this one.

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

use crate::mdp::{
    value_iteration_with, MdpError, RewardTable, TransitionKernel, ValueFunctions,
    ValueIterationOptions, ACTIONS,
};
use crate::whittle::{
    aoi_closed_form_index, whittle_index_table, IndexSearchOptions, WhittleError,
};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error(
        "transition {s}->{s_next} under action {a} on arm {arm} lands outside the declared support"
    )]
    PriorViolation {
        arm: usize,
        s: usize,
        a: usize,
        s_next: usize,
    },
    #[error("window exponent k={0} must be positive and finite; stationary runs should use the full horizon as the window instead")]
    WindowExponent(f64),
    #[error("optimistic values are not {expected} in the state index near state {state}")]
    NotMonotone {
        expected: &'static str,
        state: usize,
    },
    #[error("{0}")]
    BadModel(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Whittle(#[from] WhittleError),
}

/// What is known in advance about one (state, action) row of an arm.
#[derive(Debug, Clone)]
pub enum RowPrior {
    /// Fixed but unknown; estimated from all recorded history.
    Stationary { support: Vec<bool> },
    /// May move by at most ε in L1 per episode; estimated from the window.
    Drifting { support: Vec<bool> },
    /// Known exactly; never estimated, confidence radius 0.
    Known { row: Vec<f64> },
}

/// One row belonging to a [`ParameterTie`]: the shared scalar is the
/// probability of landing on `hi`; the row's other support state takes the
/// remaining mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TieMember {
    pub s: usize,
    pub a: usize,
    pub hi: usize,
}

/// A scalar transition parameter shared by several rows of one arm.
///
/// Ladders and age-reset chains are governed by one or two scalars (a climb
/// probability, a delivery probability): every member row puts θ of its mass
/// on its `hi` state and 1−θ on its single other support state. Declaring
/// the group lets ball assembly pool the members' transition counts into one
/// estimate of θ, which concentrates far faster than the per-row counts it
/// replaces. Members must all be stationary or all drifting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterTie {
    pub members: Vec<TieMember>,
}

/// Per-arm structural knowledge: row kinds, supports, and the drift budget.
#[derive(Debug, Clone)]
pub struct PriorKnowledge {
    n_states: usize,
    rows: Vec<RowPrior>,
    supports: Vec<bool>,
    ties: Vec<ParameterTie>,
    /// Per-episode L1 drift bound for the drifting rows.
    pub epsilon: f64,
}

impl PriorKnowledge {
    /// Rows are indexed by (state, action) in row-major order. Supports must
    /// be non-empty, known rows must be valid distributions, and ε must be a
    /// finite non-negative number.
    pub fn new(n_states: usize, rows: Vec<RowPrior>, epsilon: f64) -> Result<Self, LearnerError> {
        if n_states == 0 {
            return Err(LearnerError::BadModel(
                "state space must be non-empty".into(),
            ));
        }
        if rows.len() != n_states * ACTIONS {
            return Err(LearnerError::BadModel(format!(
                "expected {} row priors, got {}",
                n_states * ACTIONS,
                rows.len()
            )));
        }
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(LearnerError::BadModel(format!(
                "drift bound {epsilon} must be finite and >= 0"
            )));
        }
        let mut supports = Vec::with_capacity(rows.len() * n_states);
        for (i, prior) in rows.iter().enumerate() {
            match prior {
                RowPrior::Stationary { support } | RowPrior::Drifting { support } => {
                    if support.len() != n_states {
                        return Err(LearnerError::BadModel(format!(
                            "support of row {i} has length {}, want {n_states}",
                            support.len()
                        )));
                    }
                    if !support.iter().any(|&b| b) {
                        return Err(LearnerError::BadModel(format!(
                            "support of row {i} is empty"
                        )));
                    }
                    supports.extend_from_slice(support);
                }
                RowPrior::Known { row } => {
                    if row.len() != n_states {
                        return Err(LearnerError::BadModel(format!(
                            "known row {i} has length {}, want {n_states}",
                            row.len()
                        )));
                    }
                    let mut sum = 0.0;
                    for &p in row {
                        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                            return Err(LearnerError::BadModel(format!(
                                "known row {i} has entry {p} outside [0, 1]"
                            )));
                        }
                        sum += p;
                    }
                    if (sum - 1.0).abs() > 1e-9 {
                        return Err(LearnerError::BadModel(format!(
                            "known row {i} sums to {sum}, want 1"
                        )));
                    }
                    supports.extend(row.iter().map(|&p| p > 0.0));
                }
            }
        }
        Ok(Self {
            n_states,
            rows,
            supports,
            ties: Vec::new(),
            epsilon,
        })
    }

    /// Declares scalar-parameter groups. Every member row must be estimable
    /// (not known), have exactly two support states including its `hi`, and
    /// belong to at most one group; a group may not mix stationary and
    /// drifting rows, since the two kinds read different count tables.
    pub fn with_ties(mut self, ties: Vec<ParameterTie>) -> Result<Self, LearnerError> {
        let mut seen = vec![false; self.n_states * ACTIONS];
        for (g, tie) in ties.iter().enumerate() {
            if tie.members.is_empty() {
                return Err(LearnerError::BadModel(format!(
                    "tie {g} has no member rows"
                )));
            }
            let mut windowed = None;
            for m in &tie.members {
                if m.s >= self.n_states || m.a >= ACTIONS || m.hi >= self.n_states {
                    return Err(LearnerError::BadModel(format!(
                        "tie {g} member ({}, {}) -> {} is out of range",
                        m.s, m.a, m.hi
                    )));
                }
                let is_windowed = match self.row(m.s, m.a) {
                    RowPrior::Drifting { .. } => true,
                    RowPrior::Stationary { .. } => false,
                    RowPrior::Known { .. } => {
                        return Err(LearnerError::BadModel(format!(
                            "tie {g} member ({}, {}) is a known row and needs no estimate",
                            m.s, m.a
                        )))
                    }
                };
                if *windowed.get_or_insert(is_windowed) != is_windowed {
                    return Err(LearnerError::BadModel(format!(
                        "tie {g} mixes stationary and drifting rows"
                    )));
                }
                let sup = self.support(m.s, m.a);
                if sup.iter().filter(|&&b| b).count() != 2 || !sup[m.hi] {
                    return Err(LearnerError::BadModel(format!(
                        "tie {g} member ({}, {}) needs exactly two support states with {} among them",
                        m.s, m.a, m.hi
                    )));
                }
                let cell = &mut seen[m.s * ACTIONS + m.a];
                if *cell {
                    return Err(LearnerError::BadModel(format!(
                        "row ({}, {}) appears in more than one tie",
                        m.s, m.a
                    )));
                }
                *cell = true;
            }
        }
        self.ties = ties;
        Ok(self)
    }

    /// Scalar-parameter groups pooled at ball assembly; empty when unset.
    pub fn ties(&self) -> &[ParameterTie] {
        &self.ties
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn row(&self, s: usize, a: usize) -> &RowPrior {
        &self.rows[s * ACTIONS + a]
    }

    /// Reachable-state mask of the row (known rows: their positive entries).
    pub fn support(&self, s: usize, a: usize) -> &[bool] {
        let i = (s * ACTIONS + a) * self.n_states;
        &self.supports[i..i + self.n_states]
    }

    pub fn allows(&self, s: usize, a: usize, s_next: usize) -> bool {
        self.support(s, a)[s_next]
    }

    /// |Z₁|: number of fixed-but-unknown rows.
    pub fn stationary_rows(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| matches!(r, RowPrior::Stationary { .. }))
            .count()
    }

    /// |Z₂|: number of drifting rows.
    pub fn drifting_rows(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| matches!(r, RowPrior::Drifting { .. }))
            .count()
    }
}

/// Transition counts of one arm, split into all-history totals and a sliding
/// window over the last `window` completed episodes.
///
/// Counts recorded during an episode become visible only after
/// [`WindowedCounts::end_episode`]; balls are built between episodes, so the
/// estimate for episode t uses exactly episodes 1..t−1 (history) and
/// t−w..t−1 (window).
#[derive(Debug, Clone)]
pub struct WindowedCounts {
    n_states: usize,
    window: usize,
    completed: usize,
    cumulative: Vec<u64>,
    window_sums: Vec<u64>,
    current: Vec<u32>,
    // per-episode tables pending eviction; empty when the window covers the
    // whole run, where window_sums simply mirrors cumulative
    ring: VecDeque<Vec<u32>>,
    keep_ring: bool,
}

impl WindowedCounts {
    pub fn new(n_states: usize, window: usize, t_total: usize) -> Self {
        assert!(n_states >= 1, "state space must be non-empty");
        assert!(window >= 1, "window must cover at least one episode");
        let cells = n_states * ACTIONS * n_states;
        Self {
            n_states,
            window,
            completed: 0,
            cumulative: vec![0; cells],
            window_sums: vec![0; cells],
            current: vec![0; cells],
            ring: VecDeque::new(),
            keep_ring: window < t_total,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn completed_episodes(&self) -> usize {
        self.completed
    }

    pub fn record(&mut self, s: usize, a: usize, s_next: usize) {
        assert!(s < self.n_states && a < ACTIONS && s_next < self.n_states);
        self.current[(s * ACTIONS + a) * self.n_states + s_next] += 1;
    }

    /// Folds the in-progress episode into history and the window, evicting
    /// the episode that just slid out.
    pub fn end_episode(&mut self) {
        for (i, &c) in self.current.iter().enumerate() {
            self.cumulative[i] += u64::from(c);
            self.window_sums[i] += u64::from(c);
        }
        if self.keep_ring {
            let table = std::mem::replace(&mut self.current, vec![0; self.cumulative.len()]);
            self.ring.push_back(table);
            if self.ring.len() > self.window {
                let old = self.ring.pop_front().expect("ring cannot be empty here");
                for (i, &c) in old.iter().enumerate() {
                    self.window_sums[i] -= u64::from(c);
                }
            }
        } else {
            self.current.fill(0);
        }
        self.completed += 1;
    }

    /// Entrywise union of several synchronized count tables, for arms whose
    /// true kernels are declared identical and whose observations may
    /// therefore be pooled before building one shared ball.
    ///
    /// The result is a between-episode snapshot: it keeps no per-episode
    /// ring, so recording into it or ending episodes on it would break the
    /// window bookkeeping. Build a fresh merge each episode instead.
    pub fn merged(parts: &[&WindowedCounts]) -> WindowedCounts {
        let first = parts
            .first()
            .expect("merged needs at least one count table");
        let mut out = WindowedCounts::new(first.n_states, first.window, first.window);
        out.completed = first.completed;
        for part in parts {
            assert!(
                part.n_states == first.n_states
                    && part.window == first.window
                    && part.completed == first.completed,
                "pooled count tables must track the same chain in lockstep"
            );
            assert!(
                part.current.iter().all(|&c| c == 0),
                "pooling mid-episode would lose the in-progress counts"
            );
            for (o, &c) in out.cumulative.iter_mut().zip(&part.cumulative) {
                *o += c;
            }
            for (o, &c) in out.window_sums.iter_mut().zip(&part.window_sums) {
                *o += c;
            }
        }
        out
    }

    pub fn hist_row(&self, s: usize, a: usize) -> &[u64] {
        let i = (s * ACTIONS + a) * self.n_states;
        &self.cumulative[i..i + self.n_states]
    }

    pub fn window_row(&self, s: usize, a: usize) -> &[u64] {
        let i = (s * ACTIONS + a) * self.n_states;
        &self.window_sums[i..i + self.n_states]
    }

    pub fn hist_total(&self, s: usize, a: usize) -> u64 {
        self.hist_row(s, a).iter().sum()
    }

    pub fn window_total(&self, s: usize, a: usize) -> u64 {
        self.window_row(s, a).iter().sum()
    }
}

/// Problem-level constants entering the radius formulas.
#[derive(Debug, Clone, Copy)]
pub struct RadiusParams {
    /// Number of arms in the whole problem.
    pub n_arms: usize,
    /// Episode budget T.
    pub t_total: usize,
    /// Failure mass granted to the fixed-row balls.
    pub eta1: f64,
    /// Failure mass granted to the drifting-row balls.
    pub eta2: f64,
}

/// Empirical kernel: known rows verbatim, fixed rows from all history,
/// drifting rows from the window. Rows never observed fall back to uniform
/// over their support, and structural zeros stay exactly 0.
pub fn empirical_kernel(
    counts: &WindowedCounts,
    prior: &PriorKnowledge,
) -> Result<TransitionKernel, LearnerError> {
    let n = prior.n_states();
    if counts.n_states() != n {
        return Err(LearnerError::BadModel(format!(
            "counts track {} states but the prior declares {n}",
            counts.n_states()
        )));
    }
    let mut rows = vec![0.0; n * ACTIONS * n];
    for s in 0..n {
        for a in 0..ACTIONS {
            let out = &mut rows[(s * ACTIONS + a) * n..][..n];
            match prior.row(s, a) {
                RowPrior::Known { row } => out.copy_from_slice(row),
                RowPrior::Stationary { support } => {
                    fill_estimate(counts.hist_row(s, a), support, out)
                }
                RowPrior::Drifting { support } => {
                    fill_estimate(counts.window_row(s, a), support, out)
                }
            }
        }
    }
    Ok(TransitionKernel::from_rows(n, rows)?)
}

fn fill_estimate(counts: &[u64], support: &[bool], out: &mut [f64]) {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        let width = support.iter().filter(|&&b| b).count();
        for (o, &b) in out.iter_mut().zip(support) {
            *o = if b { 1.0 / width as f64 } else { 0.0 };
        }
    } else {
        for (o, &c) in out.iter_mut().zip(counts) {
            *o = c as f64 / total as f64;
        }
    }
}

/// L1 confidence radius per row; known rows get exactly 0.
pub fn confidence_radii(
    counts: &WindowedCounts,
    prior: &PriorKnowledge,
    params: &RadiusParams,
) -> Vec<f64> {
    let n = prior.n_states() as f64;
    let z1 = prior.stationary_rows() as f64;
    let z2 = prior.drifting_rows() as f64;
    let nt = params.n_arms as f64 * params.t_total as f64;
    let w = counts.window() as f64;
    let mut radii = Vec::with_capacity(prior.n_states() * ACTIONS);
    for s in 0..prior.n_states() {
        for a in 0..ACTIONS {
            let r = match prior.row(s, a) {
                RowPrior::Known { .. } => 0.0,
                RowPrior::Stationary { .. } => {
                    let c = counts.hist_total(s, a).max(1) as f64;
                    (2.0 * n * (2.0 * z1 * nt / params.eta1).ln() / c)
                        .sqrt()
                        .min(2.0)
                }
                RowPrior::Drifting { .. } => {
                    let c = counts.window_total(s, a).max(1) as f64;
                    let sampling = (2.0 * n * (2.0 * z2 * nt / params.eta2).ln() / c).sqrt();
                    // the window itself may straddle up to w drift steps
                    (sampling + w * prior.epsilon).min(2.0)
                }
            };
            radii.push(r);
        }
    }
    radii
}

/// Per-row L1 ball around the empirical kernel.
#[derive(Debug, Clone)]
pub struct ConfidenceBall {
    center: TransitionKernel,
    radii: Vec<f64>,
    supports: Vec<bool>,
    counts: Vec<u64>,
}

impl ConfidenceBall {
    /// Assembles a ball from explicit parts. `radii` and `counts` are indexed
    /// by (state, action); `supports` is the flattened reachable-state mask.
    /// The center must put zero mass outside each row's support.
    pub fn from_parts(
        center: TransitionKernel,
        radii: Vec<f64>,
        supports: Vec<bool>,
        counts: Vec<u64>,
    ) -> Result<Self, LearnerError> {
        let n = center.n_states();
        if radii.len() != n * ACTIONS
            || counts.len() != n * ACTIONS
            || supports.len() != n * ACTIONS * n
        {
            return Err(LearnerError::BadModel(
                "ball part sizes disagree with the center".into(),
            ));
        }
        for (i, &r) in radii.iter().enumerate() {
            if !r.is_finite() || !(0.0..=2.0).contains(&r) {
                return Err(LearnerError::BadModel(format!(
                    "radius {r} of row {i} outside [0, 2]"
                )));
            }
        }
        for s in 0..n {
            for a in 0..ACTIONS {
                let sup = &supports[(s * ACTIONS + a) * n..][..n];
                if !sup.iter().any(|&b| b) {
                    return Err(LearnerError::BadModel(format!(
                        "support of row ({s},{a}) is empty"
                    )));
                }
                for (s2, (&p, &ok)) in center.row(s, a).iter().zip(sup).enumerate() {
                    if p > 0.0 && !ok {
                        return Err(LearnerError::BadModel(format!(
                            "center puts mass {p} on excluded transition {s}->{s2} under action {a}"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            center,
            radii,
            supports,
            counts,
        })
    }

    pub fn n_states(&self) -> usize {
        self.center.n_states()
    }

    pub fn center(&self) -> &TransitionKernel {
        &self.center
    }

    pub fn radius(&self, s: usize, a: usize) -> f64 {
        self.radii[s * ACTIONS + a]
    }

    pub fn support(&self, s: usize, a: usize) -> &[bool] {
        let i = (s * ACTIONS + a) * self.n_states();
        &self.supports[i..i + self.n_states()]
    }

    /// Samples behind each row's estimate, floored at 1.
    pub fn count(&self, s: usize, a: usize) -> u64 {
        self.counts[s * ACTIONS + a]
    }

    /// Whether every row of `kernel` sits inside this ball (row-wise L1,
    /// with structural zeros respected).
    pub fn contains(&self, kernel: &TransitionKernel) -> bool {
        if kernel.n_states() != self.n_states() {
            return false;
        }
        for s in 0..self.n_states() {
            for a in 0..ACTIONS {
                let sup = self.support(s, a);
                let mut l1 = 0.0;
                for (s2, (&p, &c)) in kernel
                    .row(s, a)
                    .iter()
                    .zip(self.center.row(s, a))
                    .enumerate()
                {
                    if p > 0.0 && !sup[s2] {
                        return false;
                    }
                    l1 += (p - c).abs();
                }
                if l1 > self.radius(s, a) + 1e-9 {
                    return false;
                }
            }
        }
        true
    }
}

/// Ball for the coming episode: empirical center plus confidence radii.
///
/// Rows grouped by a [`ParameterTie`] are re-estimated jointly: their counts
/// pool into one scalar θ̂ (½ when nothing was observed), each member row
/// becomes (θ̂ on `hi`, 1−θ̂ on the other support state), and all members
/// share one radius computed from the pooled sample count over the group's
/// two-outcome alphabet. Untied rows keep their per-row estimates.
pub fn build_ball(
    counts: &WindowedCounts,
    prior: &PriorKnowledge,
    params: &RadiusParams,
) -> Result<ConfidenceBall, LearnerError> {
    let center = empirical_kernel(counts, prior)?;
    let mut radii = confidence_radii(counts, prior, params);
    let n = prior.n_states();
    let mut denoms = Vec::with_capacity(n * ACTIONS);
    for s in 0..n {
        for a in 0..ACTIONS {
            let c = match prior.row(s, a) {
                RowPrior::Drifting { .. } => counts.window_total(s, a),
                _ => counts.hist_total(s, a),
            };
            denoms.push(c.max(1));
        }
    }
    if prior.ties().is_empty() {
        return ConfidenceBall::from_parts(center, radii, prior.supports.clone(), denoms);
    }

    let mut rows: Vec<f64> = (0..n)
        .flat_map(|s| (0..ACTIONS).flat_map(move |a| (0..n).map(move |s2| (s, a, s2))))
        .map(|(s, a, s2)| center.prob(s2, s, a))
        .collect();
    let nt = params.n_arms as f64 * params.t_total as f64;
    // the union bound counts estimated objects, and a pooled tie is a single
    // object: each tie collapses its member rows into one scalar estimate
    let is_drifting_tie = |tie: &ParameterTie| {
        matches!(
            prior.row(tie.members[0].s, tie.members[0].a),
            RowPrior::Drifting { .. }
        )
    };
    let mut z2_objects = prior.drifting_rows();
    let mut z1_objects = prior.stationary_rows();
    for tie in prior.ties() {
        if is_drifting_tie(tie) {
            z2_objects = z2_objects + 1 - tie.members.len();
        } else {
            z1_objects = z1_objects + 1 - tie.members.len();
        }
    }
    for tie in prior.ties() {
        let windowed = is_drifting_tie(tie);
        let mut hits = 0u64;
        let mut trials = 0u64;
        for m in &tie.members {
            let row = if windowed {
                counts.window_row(m.s, m.a)
            } else {
                counts.hist_row(m.s, m.a)
            };
            hits += row[m.hi];
            trials += row.iter().sum::<u64>();
        }
        let theta = if trials == 0 {
            0.5
        } else {
            hits as f64 / trials as f64
        };
        let c = trials.max(1) as f64;
        let (z, eta) = if windowed {
            (z2_objects.max(1) as f64, params.eta2)
        } else {
            (z1_objects.max(1) as f64, params.eta1)
        };
        // two-outcome alphabet: every member row has support size 2
        let mut radius = (2.0 * 2.0 * (2.0 * z * nt / eta).ln() / c).sqrt();
        if windowed {
            radius += counts.window() as f64 * prior.epsilon;
        }
        let radius = radius.min(2.0);
        for m in &tie.members {
            let sup = prior.support(m.s, m.a);
            let lo = (0..n)
                .find(|&i| sup[i] && i != m.hi)
                .expect("tie members have two support states");
            let out = &mut rows[(m.s * ACTIONS + m.a) * n..][..n];
            out.fill(0.0);
            out[m.hi] = theta;
            out[lo] = 1.0 - theta;
            radii[m.s * ACTIONS + m.a] = radius;
            denoms[m.s * ACTIONS + m.a] = trials.max(1);
        }
    }
    let center = TransitionKernel::from_rows(n, rows)?;
    ConfidenceBall::from_parts(center, radii, prior.supports.clone(), denoms)
}

/// Direction of the optimal values across the state index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monotonicity {
    /// V nondecreasing in the state index (reward ladders).
    Increasing,
    /// V nonincreasing in the state index (freshness chains: low index means
    /// recent information).
    Decreasing,
}

/// Moves min(d/2, headroom) of mass onto the best allowed state and drains it
/// from the worst allowed states upward. `order_asc` lists states from worst
/// to best value.
fn transport_row(
    center: &[f64],
    support: &[bool],
    radius: f64,
    order_asc: &[u32],
    out: &mut [f64],
) {
    out.copy_from_slice(center);
    if radius <= 0.0 {
        return;
    }
    let best = *order_asc
        .iter()
        .rev()
        .find(|&&i| support[i as usize])
        .expect("supports are non-empty") as usize;
    let delta = (radius / 2.0).min(1.0 - out[best]);
    if delta <= 0.0 {
        return;
    }
    out[best] += delta;
    let mut need = delta;
    for &i in order_asc {
        let i = i as usize;
        if i == best {
            continue;
        }
        let take = need.min(out[i]);
        out[i] -= take;
        need -= take;
        if need <= 0.0 {
            break;
        }
    }
    debug_assert!(need <= 1e-12, "drained less mass than was added: {need}");
}

/// Extended value iteration: jointly solves for the kernel in the ball and
/// the values it induces, both maximal at charge λ.
///
/// Each sweep re-sorts states by current value and rebuilds every row's
/// optimal transport before the Bellman backup, so the iterate is the
/// optimistic operator applied exactly; it remains a γ-contraction and the
/// usual residual rule certifies ‖V − V*‖∞ ≤ tol/2. Returns the transported
/// kernel from the final sweep together with its values.
pub fn optimistic_kernel(
    ball: &ConfidenceBall,
    rewards: &RewardTable,
    lambda: f64,
    gamma: f64,
    tol: f64,
) -> Result<(TransitionKernel, ValueFunctions), LearnerError> {
    let n = ball.n_states();
    check_plan_inputs(n, rewards, lambda, gamma, tol)?;
    let max_sweeps = 200_000;
    let mut v: Vec<f64> = vec![0.0; n];
    let mut v_next = vec![0.0; n];
    let mut q = vec![0.0; n * ACTIONS];
    let mut rows = vec![0.0; n * ACTIONS * n];
    let mut order: Vec<u32> = (0..n as u32).collect();
    let threshold = if gamma > 0.0 {
        tol * (1.0 - gamma) / (2.0 * gamma)
    } else {
        f64::INFINITY
    };
    let mut prev_residual = f64::INFINITY;
    for sweeps in 1..=max_sweeps {
        // ties broken by state id so reruns pick identical transports
        order.sort_unstable_by(|&a, &b| v[a as usize].total_cmp(&v[b as usize]).then(a.cmp(&b)));
        let mut residual = 0.0f64;
        for s in 0..n {
            let mut best = f64::NEG_INFINITY;
            for a in 0..ACTIONS {
                let out = &mut rows[(s * ACTIONS + a) * n..][..n];
                transport_row(
                    ball.center().row(s, a),
                    ball.support(s, a),
                    ball.radius(s, a),
                    &order,
                    out,
                );
                let expect: f64 = out.iter().zip(&v).map(|(p, vv)| p * vv).sum();
                let qv = rewards.at(s, a) - lambda * a as f64 + gamma * expect;
                q[s * ACTIONS + a] = qv;
                if a == 0 || qv > best {
                    best = qv;
                }
            }
            v_next[s] = best;
            residual = residual.max((best - v[s]).abs());
        }
        std::mem::swap(&mut v, &mut v_next);
        if prev_residual.is_finite() {
            let scale = v.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            assert!(
                residual <= gamma * prev_residual + 1e-9 * scale,
                "optimistic iteration lost contraction: {residual:.3e} after {prev_residual:.3e}"
            );
        }
        prev_residual = residual;
        if residual <= threshold {
            let kernel = TransitionKernel::from_rows(n, rows)?;
            return Ok((kernel, ValueFunctions::new(gamma, lambda, v, q, sweeps)));
        }
    }
    Err(LearnerError::Mdp(MdpError::NoConvergence {
        max_sweeps,
        residual: prev_residual,
    }))
}

/// Optimistic kernel for arms whose optimal values are monotone in the state
/// index: the transport ordering is known a priori, so one pass builds the
/// kernel and a plain solve prices it.
///
/// The declared shape is verified on the solved values; if it fails to hold
/// the closed form was not the optimum and the call errors instead of
/// returning a quietly wrong kernel.
pub fn monotone_optimistic_kernel(
    ball: &ConfidenceBall,
    rewards: &RewardTable,
    lambda: f64,
    gamma: f64,
    direction: Monotonicity,
    tol: f64,
) -> Result<(TransitionKernel, ValueFunctions), LearnerError> {
    let n = ball.n_states();
    check_plan_inputs(n, rewards, lambda, gamma, tol)?;
    let order: Vec<u32> = match direction {
        Monotonicity::Increasing => (0..n as u32).collect(),
        Monotonicity::Decreasing => (0..n as u32).rev().collect(),
    };
    let mut rows = vec![0.0; n * ACTIONS * n];
    for s in 0..n {
        for a in 0..ACTIONS {
            let out = &mut rows[(s * ACTIONS + a) * n..][..n];
            transport_row(
                ball.center().row(s, a),
                ball.support(s, a),
                ball.radius(s, a),
                &order,
                out,
            );
        }
    }
    let kernel = TransitionKernel::from_rows(n, rows)?;
    let opts = ValueIterationOptions {
        tol,
        ..Default::default()
    };
    let vf = value_iteration_with(&kernel, rewards, lambda, gamma, &opts)?;
    let slack = tol + 1e-9 * (0..n).fold(1.0f64, |m, s| m.max(vf.v(s).abs()));
    for s in 0..n.saturating_sub(1) {
        let (lo, hi, expected) = match direction {
            Monotonicity::Increasing => (vf.v(s), vf.v(s + 1), "nondecreasing"),
            Monotonicity::Decreasing => (vf.v(s + 1), vf.v(s), "nonincreasing"),
        };
        if hi < lo - slack {
            return Err(LearnerError::NotMonotone { expected, state: s });
        }
    }
    Ok((kernel, vf))
}

fn check_plan_inputs(
    n: usize,
    rewards: &RewardTable,
    lambda: f64,
    gamma: f64,
    tol: f64,
) -> Result<(), LearnerError> {
    if rewards.n_states() != n {
        return Err(LearnerError::Mdp(MdpError::SizeMismatch {
            what: "reward table",
            expected: n,
            got: rewards.n_states(),
        }));
    }
    if !lambda.is_finite() {
        return Err(LearnerError::Mdp(MdpError::NonFinite { what: "lambda" }));
    }
    if !gamma.is_finite() || !(0.0..1.0).contains(&gamma) {
        return Err(LearnerError::Mdp(MdpError::InvalidGamma(gamma)));
    }
    if !tol.is_finite() || tol <= 0.0 {
        return Err(LearnerError::Mdp(MdpError::NonFinite { what: "tolerance" }));
    }
    Ok(())
}

/// Window size for a drift budget decaying like T^{−k}: w = round(T^min(2k/3, 1)),
/// clamped to [1, T]. Faster drift (small k) means a shorter window.
pub fn select_window(t_total: usize, k: f64) -> Result<usize, LearnerError> {
    if t_total == 0 {
        return Err(LearnerError::BadModel(
            "episode budget must be positive".into(),
        ));
    }
    if !k.is_finite() || k <= 0.0 {
        return Err(LearnerError::WindowExponent(k));
    }
    let exponent = (2.0 * k / 3.0).min(1.0);
    let w = (t_total as f64).powf(exponent).round() as usize;
    Ok(w.clamp(1, t_total))
}

/// M-th highest entry of `values` (m is 1-based): the charge that would admit
/// exactly m arms if each value were an index.
pub fn mth_highest(values: &[f64], m: usize) -> f64 {
    assert!(
        m >= 1 && m <= values.len(),
        "need 1 <= m <= {}, got {m}",
        values.len()
    );
    assert!(
        values.iter().all(|v| v.is_finite()),
        "indices must be finite"
    );
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    sorted[m - 1]
}

/// How one arm's optimistic kernel is computed each episode.
#[derive(Debug, Clone, Copy)]
pub enum OptimismStrategy {
    /// Extended value iteration; works for any ball.
    Evi,
    /// Single closed-form transport, valid when the arm's values are monotone
    /// in the state index.
    Monotone(Monotonicity),
}

/// How one arm's index table is computed from its optimistic kernel.
#[derive(Debug, Clone)]
pub enum IndexStrategy {
    /// Certified bisection on the activation charge.
    BinarySearch,
    /// Closed-form freshness index; state i is age i+1 and the optimistic
    /// delivery probability is read off each active row's mass on age 1.
    AoiClosedForm { sigma2: f64 },
}

/// Everything the learner knows about one arm.
#[derive(Debug, Clone)]
pub struct ArmModel {
    pub prior: PriorKnowledge,
    pub rewards: RewardTable,
    pub optimism: OptimismStrategy,
    pub index: IndexStrategy,
    /// Episodes of history used for this arm's drifting rows.
    pub window: usize,
    /// Arms declared to share one true kernel pool their counts before ball
    /// assembly. Arms with equal tags must have identical priors and
    /// windows; `None` keeps the arm's counts to itself.
    pub share_group: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct LearnerConfig {
    pub gamma: f64,
    /// Failure mass for fixed-row balls; 0.05 unless a run overrides it.
    pub eta1: f64,
    /// Failure mass for drifting-row balls.
    pub eta2: f64,
    /// Episode budget T.
    pub t_total: usize,
    /// Arms activated per slot.
    pub m_budget: usize,
    pub search: IndexSearchOptions,
    /// Accuracy of the optimistic planning solves.
    pub evi_tol: f64,
}

impl LearnerConfig {
    pub fn new(gamma: f64, t_total: usize, m_budget: usize) -> Self {
        Self {
            gamma,
            eta1: 0.05,
            eta2: 0.05,
            t_total,
            m_budget,
            search: IndexSearchOptions::default(),
            evi_tol: 1e-6,
        }
    }
}

struct ArmState {
    model: ArmModel,
    counts: WindowedCounts,
}

/// The sliding-window optimistic index policy.
///
/// Per episode: build each arm's confidence ball, pick the optimistic kernel
/// at the current charge λ, tabulate Whittle indices, then activate the top-M
/// arms by current-state index at every slot (ties to the lower arm id). At
/// the episode's end λ becomes the M-th highest current-state index seen at
/// the final decision slot, coupling consecutive episodes.
pub struct SlidingWindowLearner {
    config: LearnerConfig,
    arms: Vec<ArmState>,
    lambda: f64,
    completed: usize,
    planned: bool,
    last_decision_states: Vec<usize>,
    indices: Vec<Vec<f64>>,
    balls: Vec<ConfidenceBall>,
    // index tables keyed by the exact bits of (optimistic kernel, rewards,
    // gamma); arms whose ball stops moving (all rows known) hit this cache
    // every episode
    table_memo: HashMap<Vec<u64>, Vec<f64>>,
}

impl SlidingWindowLearner {
    pub fn new(config: LearnerConfig, arms: Vec<ArmModel>) -> Result<Self, LearnerError> {
        if arms.is_empty() {
            return Err(LearnerError::BadModel("need at least one arm".into()));
        }
        if config.m_budget == 0 || config.m_budget > arms.len() {
            return Err(LearnerError::BadModel(format!(
                "budget {} must lie in 1..={}",
                config.m_budget,
                arms.len()
            )));
        }
        if config.t_total == 0 {
            return Err(LearnerError::BadModel(
                "episode budget must be positive".into(),
            ));
        }
        if !config.gamma.is_finite() || !(0.0..1.0).contains(&config.gamma) {
            return Err(LearnerError::Mdp(MdpError::InvalidGamma(config.gamma)));
        }
        for eta in [config.eta1, config.eta2] {
            if !eta.is_finite() || !(0.0..1.0).contains(&eta) || eta == 0.0 {
                return Err(LearnerError::BadModel(format!(
                    "failure mass {eta} must lie in (0, 1)"
                )));
            }
        }
        let mut states = Vec::with_capacity(arms.len());
        for (i, model) in arms.into_iter().enumerate() {
            let n = model.prior.n_states();
            if model.rewards.n_states() != n {
                return Err(LearnerError::BadModel(format!(
                    "arm {i}: prior declares {n} states but rewards cover {}",
                    model.rewards.n_states()
                )));
            }
            if model.window == 0 {
                return Err(LearnerError::BadModel(format!(
                    "arm {i}: window must be positive"
                )));
            }
            if let IndexStrategy::AoiClosedForm { sigma2 } = model.index {
                if !(sigma2 > 0.0 && sigma2 < 1.0) {
                    return Err(LearnerError::BadModel(format!(
                        "arm {i}: freshness decay {sigma2} must lie in (0, 1)"
                    )));
                }
            }
            let counts = WindowedCounts::new(n, model.window, config.t_total);
            states.push(ArmState { model, counts });
        }
        for i in 0..states.len() {
            let Some(tag) = states[i].model.share_group else {
                continue;
            };
            for j in 0..i {
                if states[j].model.share_group != Some(tag) {
                    continue;
                }
                let (a, b) = (&states[j].model, &states[i].model);
                if a.prior.n_states() != b.prior.n_states() || a.window != b.window {
                    return Err(LearnerError::BadModel(format!(
                        "arms {j} and {i} share group {tag} but disagree on shape or window"
                    )));
                }
            }
        }
        Ok(Self {
            config,
            arms: states,
            lambda: 0.0,
            completed: 0,
            planned: false,
            last_decision_states: Vec::new(),
            indices: Vec::new(),
            balls: Vec::new(),
            table_memo: HashMap::new(),
        })
    }

    pub fn n_arms(&self) -> usize {
        self.arms.len()
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    /// Current activation charge λ; 0 before the first episode.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn completed_episodes(&self) -> usize {
        self.completed
    }

    pub fn counts(&self, arm: usize) -> &WindowedCounts {
        &self.arms[arm].counts
    }

    /// This episode's index table for one arm. Valid between begin_episode
    /// and end_episode.
    pub fn index_table(&self, arm: usize) -> &[f64] {
        assert!(self.planned, "no episode in progress");
        &self.indices[arm]
    }

    /// This episode's confidence ball for one arm.
    pub fn ball(&self, arm: usize) -> &ConfidenceBall {
        assert!(self.planned, "no episode in progress");
        &self.balls[arm]
    }

    /// Rebuilds balls, optimistic kernels, and index tables for the coming
    /// episode.
    pub fn begin_episode(&mut self) -> Result<(), LearnerError> {
        assert!(
            !self.planned,
            "begin_episode called twice without end_episode"
        );
        let params = RadiusParams {
            n_arms: self.arms.len(),
            t_total: self.config.t_total,
            eta1: self.config.eta1,
            eta2: self.config.eta2,
        };
        self.balls.clear();
        self.indices.clear();
        let mut pooled: HashMap<usize, WindowedCounts> = HashMap::new();
        for arm in &self.arms {
            if let Some(tag) = arm.model.share_group {
                pooled.entry(tag).or_insert_with(|| {
                    let members: Vec<&WindowedCounts> = self
                        .arms
                        .iter()
                        .filter(|other| other.model.share_group == Some(tag))
                        .map(|other| &other.counts)
                        .collect();
                    WindowedCounts::merged(&members)
                });
            }
        }
        for arm in &self.arms {
            let counts = match arm.model.share_group {
                Some(tag) => &pooled[&tag],
                None => &arm.counts,
            };
            let ball = build_ball(counts, &arm.model.prior, &params)?;
            let (optimistic, _) = match arm.model.optimism {
                OptimismStrategy::Evi => optimistic_kernel(
                    &ball,
                    &arm.model.rewards,
                    self.lambda,
                    self.config.gamma,
                    self.config.evi_tol,
                )?,
                OptimismStrategy::Monotone(direction) => monotone_optimistic_kernel(
                    &ball,
                    &arm.model.rewards,
                    self.lambda,
                    self.config.gamma,
                    direction,
                    self.config.evi_tol,
                )?,
            };
            let table = match &arm.model.index {
                IndexStrategy::BinarySearch => {
                    let mut key = optimistic.bit_key();
                    key.extend(arm.model.rewards.bit_key());
                    key.push(self.config.gamma.to_bits());
                    match self.table_memo.get(&key) {
                        Some(t) => t.clone(),
                        None => {
                            let table = whittle_index_table(
                                &optimistic,
                                &arm.model.rewards,
                                self.config.gamma,
                                &self.config.search,
                            )?;
                            let t = table.indices().to_vec();
                            self.table_memo.insert(key, t.clone());
                            t
                        }
                    }
                }
                IndexStrategy::AoiClosedForm { sigma2 } => (0..ball.n_states())
                    .map(|i| aoi_closed_form_index(optimistic.prob(0, i, 1), *sigma2, i + 1))
                    .collect(),
            };
            self.balls.push(ball);
            self.indices.push(table);
        }
        self.planned = true;
        self.last_decision_states.clear();
        Ok(())
    }

    /// Activates the top-M arms by current-state index, ties to the lower
    /// arm id. Returns one action per arm.
    pub fn select_actions(&mut self, states: &[usize]) -> Vec<usize> {
        assert!(self.planned, "no episode in progress");
        assert_eq!(states.len(), self.arms.len(), "one state per arm");
        for (i, (&s, arm)) in states.iter().zip(&self.arms).enumerate() {
            assert!(
                s < arm.model.prior.n_states(),
                "state {s} out of range on arm {i}"
            );
        }
        let mut ranked: Vec<usize> = (0..self.arms.len()).collect();
        ranked.sort_unstable_by(|&i, &j| {
            self.indices[j][states[j]]
                .total_cmp(&self.indices[i][states[i]])
                .then(i.cmp(&j))
        });
        let mut actions = vec![0; self.arms.len()];
        for &i in ranked.iter().take(self.config.m_budget) {
            actions[i] = 1;
        }
        self.last_decision_states = states.to_vec();
        actions
    }

    /// Feeds one observed transition into the arm's counts. Known rows are
    /// validated but not counted; estimable rows route to history or the
    /// window by their prior kind.
    pub fn record_transition(
        &mut self,
        arm: usize,
        s: usize,
        a: usize,
        s_next: usize,
    ) -> Result<(), LearnerError> {
        assert!(arm < self.arms.len(), "arm {arm} out of range");
        let state = &mut self.arms[arm];
        if !state.model.prior.allows(s, a, s_next) {
            return Err(LearnerError::PriorViolation { arm, s, a, s_next });
        }
        if !matches!(state.model.prior.row(s, a), RowPrior::Known { .. }) {
            state.counts.record(s, a, s_next);
        }
        Ok(())
    }

    /// Closes the episode: the charge for the next episode becomes the M-th
    /// highest current-state index at the final decision slot, and this
    /// episode's counts become visible to future estimates.
    pub fn end_episode(&mut self) -> Result<(), LearnerError> {
        assert!(self.planned, "no episode in progress");
        assert!(
            !self.last_decision_states.is_empty(),
            "an episode needs at least one decision slot before it can end"
        );
        let current: Vec<f64> = self
            .last_decision_states
            .iter()
            .enumerate()
            .map(|(i, &s)| self.indices[i][s])
            .collect();
        self.lambda = mth_highest(&current, self.config.m_budget);
        for arm in &mut self.arms {
            arm.counts.end_episode();
        }
        self.completed += 1;
        self.planned = false;
        Ok(())
    }
}

/// Everything observable about one played episode.
#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    /// states[h][n]: arm n's state entering slot h+1; the last entry is the
    /// post-episode state.
    pub states: Vec<Vec<usize>>,
    /// actions[h][n] ∈ {0, 1}.
    pub actions: Vec<Vec<usize>>,
    /// Index table per arm for this episode.
    pub index_tables: Vec<Vec<f64>>,
    /// Charge λ the episode was planned at.
    pub lambda_used: f64,
    /// Charge the episode handed to its successor.
    pub lambda_next: f64,
}

/// Plays one full episode: plan, act for `horizon` slots against the sampled
/// environment, learn, and update the charge. `sample_next(arm, s, a)` draws
/// the arm's next state from the true (hidden) kernel.
pub fn run_episode(
    learner: &mut SlidingWindowLearner,
    starts: &[usize],
    horizon: usize,
    mut sample_next: impl FnMut(usize, usize, usize) -> usize,
) -> Result<EpisodeTrace, LearnerError> {
    assert!(horizon >= 1, "episodes need at least one slot");
    assert_eq!(starts.len(), learner.n_arms(), "one start state per arm");
    learner.begin_episode()?;
    let lambda_used = learner.lambda();
    let index_tables: Vec<Vec<f64>> = (0..learner.n_arms())
        .map(|i| learner.index_table(i).to_vec())
        .collect();
    let mut states = Vec::with_capacity(horizon + 1);
    states.push(starts.to_vec());
    let mut actions = Vec::with_capacity(horizon);
    let mut cur = starts.to_vec();
    for _ in 0..horizon {
        let acts = learner.select_actions(&cur);
        let mut next = vec![0usize; cur.len()];
        for (arm, slot) in next.iter_mut().enumerate() {
            let s2 = sample_next(arm, cur[arm], acts[arm]);
            learner.record_transition(arm, cur[arm], acts[arm], s2)?;
            *slot = s2;
        }
        actions.push(acts);
        states.push(next.clone());
        cur = next;
    }
    learner.end_episode()?;
    Ok(EpisodeTrace {
        states,
        actions,
        index_tables,
        lambda_used,
        lambda_next: learner.lambda(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{value_iteration, StateSpace};
    use crate::streams;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn full(n: usize) -> Vec<bool> {
        vec![true; n]
    }

    fn mask(n: usize, allowed: &[usize]) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in allowed {
            m[i] = true;
        }
        m
    }

    /// Ball with every row centered on `rows` and a shared radius.
    fn simple_ball(n: usize, rows: Vec<f64>, radius: f64) -> ConfidenceBall {
        let center = TransitionKernel::from_rows(n, rows).unwrap();
        ConfidenceBall::from_parts(
            center,
            vec![radius; n * ACTIONS],
            vec![true; n * ACTIONS * n],
            vec![1; n * ACTIONS],
        )
        .unwrap()
    }

    #[test]
    fn window_counts_follow_the_sliding_window() {
        let mut counts = WindowedCounts::new(2, 2, 10);
        for _ in 0..2 {
            counts.record(0, 1, 1);
        }
        // in-progress counts stay invisible until the episode closes
        assert_eq!(counts.window_total(0, 1), 0);
        assert_eq!(counts.hist_total(0, 1), 0);
        counts.end_episode();
        counts.record(0, 1, 1);
        counts.end_episode();
        for _ in 0..5 {
            counts.record(0, 1, 1);
        }
        counts.end_episode();
        // window of 2 sees episodes two and three: 1 + 5
        assert_eq!(counts.window_total(0, 1), 6);
        assert_eq!(counts.hist_total(0, 1), 8);
        counts.end_episode();
        assert_eq!(counts.window_total(0, 1), 5);
        assert_eq!(counts.hist_total(0, 1), 8);
    }

    #[test]
    fn window_rows_match_a_recount_from_scratch() {
        let n = 3;
        let window = 4;
        let mut counts = WindowedCounts::new(n, window, 12);
        let mut rng = streams::stream(99, &[7]);
        let mut episodes: Vec<Vec<u32>> = Vec::new();
        for _ in 0..12 {
            let mut table = vec![0u32; n * ACTIONS * n];
            for _ in 0..20 {
                let s = rng.gen_range(0..n);
                let a = rng.gen_range(0..ACTIONS);
                let s2 = rng.gen_range(0..n);
                counts.record(s, a, s2);
                table[(s * ACTIONS + a) * n + s2] += 1;
            }
            counts.end_episode();
            episodes.push(table);
            let lo = episodes.len().saturating_sub(window);
            for s in 0..n {
                for a in 0..ACTIONS {
                    for s2 in 0..n {
                        let cell = (s * ACTIONS + a) * n + s2;
                        let want: u64 = episodes[lo..].iter().map(|t| u64::from(t[cell])).sum();
                        assert_eq!(counts.window_row(s, a)[s2], want);
                        let all: u64 = episodes.iter().map(|t| u64::from(t[cell])).sum();
                        assert_eq!(counts.hist_row(s, a)[s2], all);
                    }
                }
            }
        }
    }

    #[test]
    fn empirical_rows_normalize_counts_and_default_to_uniform() {
        let n = 4;
        let rows = vec![
            RowPrior::Stationary {
                support: mask(n, &[0, 1, 2]),
            }, // (0,0)
            RowPrior::Drifting {
                support: mask(n, &[1, 2]),
            }, // (0,1)
            RowPrior::Known {
                row: vec![0.0, 0.0, 0.0, 1.0],
            }, // (1,0)
            RowPrior::Drifting { support: full(n) }, // (1,1)
            RowPrior::Stationary { support: full(n) }, // (2,0)
            RowPrior::Stationary { support: full(n) }, // (2,1)
            RowPrior::Known {
                row: vec![0.25, 0.25, 0.25, 0.25],
            }, // (3,0)
            RowPrior::Known {
                row: vec![1.0, 0.0, 0.0, 0.0],
            }, // (3,1)
        ];
        let prior = PriorKnowledge::new(n, rows, 0.01).unwrap();
        let mut counts = WindowedCounts::new(n, 3, 10);
        for _ in 0..3 {
            counts.record(0, 1, 1);
        }
        counts.record(0, 1, 2);
        counts.end_episode();
        let kernel = empirical_kernel(&counts, &prior).unwrap();
        assert_eq!(kernel.row(0, 1), &[0.0, 0.75, 0.25, 0.0]);
        // never observed: uniform over the declared support, zeros elsewhere
        assert_eq!(kernel.row(0, 0), &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]);
        assert_eq!(kernel.row(1, 0), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(prior.stationary_rows(), 3);
        assert_eq!(prior.drifting_rows(), 2);
    }

    #[test]
    fn radius_example_reproduces_hand_arithmetic() {
        // two drifting rows, two known rows, 100 window samples on (0,1)
        let n = 2;
        let rows = vec![
            RowPrior::Known {
                row: vec![1.0, 0.0],
            },
            RowPrior::Drifting { support: full(n) },
            RowPrior::Known {
                row: vec![0.0, 1.0],
            },
            RowPrior::Drifting { support: full(n) },
        ];
        let prior = PriorKnowledge::new(n, rows, 0.01).unwrap();
        let mut counts = WindowedCounts::new(n, 5, 10);
        for _ in 0..2 {
            for _ in 0..25 {
                counts.record(0, 1, 0);
                counts.record(0, 1, 1);
            }
            counts.end_episode();
        }
        let params = RadiusParams {
            n_arms: 1,
            t_total: 10,
            eta1: 0.05,
            eta2: 0.1,
        };
        let radii = confidence_radii(&counts, &prior, &params);
        // 2|S|·ln(2·|Z₂|·N·T/η₂)/C = 4·ln(400)/100, plus w·ε = 0.05
        let want = (4.0 * 400f64.ln() / 100.0).sqrt() + 0.05;
        assert_relative_eq!(radii[1], want, epsilon = 1e-12);
        assert!((radii[1] - 0.539_549_366_136_163_3).abs() < 1e-12);
        assert_eq!(radii[0], 0.0);
        assert_eq!(radii[2], 0.0);
        // the unobserved drifting row clips at the L1 diameter
        assert_eq!(radii[3], 2.0);
    }

    #[test]
    fn radii_shrink_with_data_and_grow_with_drift() {
        let n = 2;
        let make = |eps: f64| {
            PriorKnowledge::new(
                n,
                vec![
                    RowPrior::Stationary { support: full(n) },
                    RowPrior::Drifting { support: full(n) },
                    RowPrior::Known {
                        row: vec![0.5, 0.5],
                    },
                    RowPrior::Known {
                        row: vec![0.5, 0.5],
                    },
                ],
                eps,
            )
            .unwrap()
        };
        let params = RadiusParams {
            n_arms: 2,
            t_total: 50,
            eta1: 0.05,
            eta2: 0.05,
        };
        let with_samples = |per_ep: usize, eps: f64| {
            let prior = make(eps);
            let mut counts = WindowedCounts::new(n, 5, 50);
            for _ in 0..5 {
                for _ in 0..per_ep {
                    counts.record(0, 0, 0);
                    counts.record(0, 1, 1);
                }
                counts.end_episode();
            }
            confidence_radii(&counts, &prior, &params)
        };
        let small = with_samples(200, 0.01);
        let big = with_samples(20, 0.01);
        assert!(small[0] < big[0], "history radius must shrink with data");
        assert!(small[1] < big[1], "window radius must shrink with data");
        let drifty = with_samples(200, 0.05);
        assert!(
            drifty[1] > small[1],
            "window radius must grow with the drift budget"
        );
        assert_relative_eq!(drifty[1] - small[1], 5.0 * 0.04, epsilon = 1e-12);
        // one lonely sample: sampling term alone exceeds the L1 diameter
        let starved = with_samples(0, 0.01);
        assert_eq!(starved[0], 2.0);
        assert_eq!(starved[1], 2.0);
    }

    /// Three-state ladder whose two passive fall rows share one scalar; the
    /// active rows are known so the tie is the only estimated object.
    fn tied_fall_prior(n: usize, eps: f64) -> PriorKnowledge {
        let rows = vec![
            RowPrior::Known {
                row: vec![1.0, 0.0, 0.0],
            },
            RowPrior::Known {
                row: vec![0.0, 1.0, 0.0],
            },
            RowPrior::Drifting {
                support: mask(n, &[0, 1]),
            },
            RowPrior::Known {
                row: vec![0.0, 0.0, 1.0],
            },
            RowPrior::Drifting {
                support: mask(n, &[1, 2]),
            },
            RowPrior::Known {
                row: vec![0.0, 0.0, 1.0],
            },
        ];
        let tie = ParameterTie {
            members: vec![
                TieMember { s: 1, a: 0, hi: 0 },
                TieMember { s: 2, a: 0, hi: 1 },
            ],
        };
        PriorKnowledge::new(n, rows, eps)
            .unwrap()
            .with_ties(vec![tie])
            .unwrap()
    }

    #[test]
    fn tied_rows_pool_counts_into_one_scalar_estimate() {
        let n = 3;
        let prior = tied_fall_prior(n, 0.01);
        let mut counts = WindowedCounts::new(n, 3, 10);
        // the lower fall row drops 3 of 4 times, the upper 2 of 4
        for _ in 0..3 {
            counts.record(1, 0, 0);
        }
        counts.record(1, 0, 1);
        for _ in 0..2 {
            counts.record(2, 0, 1);
            counts.record(2, 0, 2);
        }
        counts.end_episode();
        let params = RadiusParams {
            n_arms: 1,
            t_total: 10,
            eta1: 0.05,
            eta2: 0.1,
        };
        let ball = build_ball(&counts, &prior, &params).unwrap();
        // pooled estimate (3 + 2) / (4 + 4), painted on both member rows
        let theta = 5.0 / 8.0;
        assert_relative_eq!(ball.center().prob(0, 1, 0), theta, epsilon = 1e-12);
        assert_relative_eq!(ball.center().prob(1, 1, 0), 1.0 - theta, epsilon = 1e-12);
        assert_eq!(ball.center().prob(2, 1, 0), 0.0);
        assert_relative_eq!(ball.center().prob(1, 2, 0), theta, epsilon = 1e-12);
        assert_relative_eq!(ball.center().prob(2, 2, 0), 1.0 - theta, epsilon = 1e-12);
        // both drifting rows collapse into a single estimated object, so the
        // union bound sees z = 1, and the alphabet is the two outcomes
        let want = (2.0 * 2.0 * (2.0_f64 * 10.0 / 0.1).ln() / 8.0).sqrt() + 3.0 * 0.01;
        assert_relative_eq!(ball.radius(1, 0), want, epsilon = 1e-12);
        assert_relative_eq!(ball.radius(2, 0), want, epsilon = 1e-12);
        assert_eq!(ball.count(1, 0), 8);
        assert_eq!(ball.count(2, 0), 8);
        assert_eq!(ball.radius(0, 0), 0.0, "known rows keep radius zero");
    }

    #[test]
    fn an_unobserved_tie_centers_on_a_coin_flip_at_full_radius() {
        let n = 3;
        let prior = tied_fall_prior(n, 0.01);
        let mut counts = WindowedCounts::new(n, 3, 10);
        counts.end_episode();
        let params = RadiusParams {
            n_arms: 1,
            t_total: 10,
            eta1: 0.05,
            eta2: 0.1,
        };
        let ball = build_ball(&counts, &prior, &params).unwrap();
        assert_relative_eq!(ball.center().prob(0, 1, 0), 0.5);
        assert_relative_eq!(ball.center().prob(2, 2, 0), 0.5);
        assert_eq!(ball.radius(1, 0), 2.0, "no trials clips at the L1 diameter");
        assert_eq!(ball.count(1, 0), 1);
    }

    #[test]
    fn merged_counts_equal_an_entrywise_recount() {
        let n = 3;
        let mut left = WindowedCounts::new(n, 2, 8);
        let mut right = WindowedCounts::new(n, 2, 8);
        let mut rng = streams::stream(31, &[4]);
        for _ in 0..3 {
            for _ in 0..40 {
                let (s, a, s2) = (
                    rng.gen_range(0..n),
                    rng.gen_range(0..ACTIONS),
                    rng.gen_range(0..n),
                );
                if rng.gen_bool(0.5) {
                    left.record(s, a, s2);
                } else {
                    right.record(s, a, s2);
                }
            }
            left.end_episode();
            right.end_episode();
        }
        let merged = WindowedCounts::merged(&[&left, &right]);
        for s in 0..n {
            for a in 0..ACTIONS {
                for s2 in 0..n {
                    assert_eq!(
                        merged.window_row(s, a)[s2],
                        left.window_row(s, a)[s2] + right.window_row(s, a)[s2]
                    );
                    assert_eq!(
                        merged.hist_row(s, a)[s2],
                        left.hist_row(s, a)[s2] + right.hist_row(s, a)[s2]
                    );
                }
            }
        }
        assert_eq!(merged.completed_episodes(), 3);
    }

    #[test]
    #[should_panic(expected = "lockstep")]
    fn pooling_out_of_step_tables_panics() {
        let mut left = WindowedCounts::new(2, 2, 8);
        let right = WindowedCounts::new(2, 2, 8);
        left.end_episode();
        let _ = WindowedCounts::merged(&[&left, &right]);
    }

    #[test]
    fn tie_declarations_are_validated() {
        let n = 3;
        let rows = || {
            vec![
                RowPrior::Known {
                    row: vec![1.0, 0.0, 0.0],
                },
                RowPrior::Drifting { support: full(n) },
                RowPrior::Drifting {
                    support: mask(n, &[0, 1]),
                },
                RowPrior::Stationary {
                    support: mask(n, &[1, 2]),
                },
                RowPrior::Drifting {
                    support: mask(n, &[1, 2]),
                },
                RowPrior::Known {
                    row: vec![0.0, 0.0, 1.0],
                },
            ]
        };
        let base = || PriorKnowledge::new(n, rows(), 0.01).unwrap();
        let err = |ties: Vec<ParameterTie>| match base().with_ties(ties) {
            Err(LearnerError::BadModel(msg)) => msg,
            other => panic!("expected a model error, got {other:?}"),
        };
        let member = |s, a, hi| TieMember { s, a, hi };
        assert!(err(vec![ParameterTie { members: vec![] }]).contains("no member rows"));
        assert!(err(vec![ParameterTie {
            members: vec![member(0, 0, 0)]
        }])
        .contains("known row"));
        assert!(
            err(vec![ParameterTie {
                members: vec![member(0, 1, 0)]
            }])
            .contains("exactly two support states"),
            "full-support rows cannot carry a scalar tie"
        );
        assert!(
            err(vec![ParameterTie {
                members: vec![member(2, 0, 0)]
            }])
            .contains("exactly two support states"),
            "hi must sit inside the member's support"
        );
        assert!(err(vec![ParameterTie {
            members: vec![member(2, 0, 1), member(1, 1, 1)],
        }])
        .contains("mixes stationary and drifting"));
        assert!(err(vec![
            ParameterTie {
                members: vec![member(2, 0, 1)]
            },
            ParameterTie {
                members: vec![member(2, 0, 2)]
            },
        ])
        .contains("more than one tie"));
        // a well-formed declaration passes
        let ok = base().with_ties(vec![ParameterTie {
            members: vec![member(2, 0, 1)],
        }]);
        assert!(ok.is_ok());
    }

    #[test]
    fn arms_sharing_a_group_get_one_pooled_ball() {
        let n = 2;
        let prior = PriorKnowledge::new(
            n,
            vec![
                RowPrior::Known {
                    row: vec![1.0, 0.0],
                },
                RowPrior::Drifting { support: full(n) },
                RowPrior::Known {
                    row: vec![1.0, 0.0],
                },
                RowPrior::Known {
                    row: vec![0.0, 1.0],
                },
            ],
            0.01,
        )
        .unwrap();
        let rewards = RewardTable::from_fn(StateSpace::new(n), |s, _| s as f64).unwrap();
        let arm = |group| ArmModel {
            prior: prior.clone(),
            rewards: rewards.clone(),
            optimism: OptimismStrategy::Monotone(Monotonicity::Increasing),
            index: IndexStrategy::BinarySearch,
            window: 4,
            share_group: group,
        };
        let drive = |groups: [Option<usize>; 2]| {
            let mut learner = SlidingWindowLearner::new(
                LearnerConfig::new(0.95, 10, 1),
                vec![arm(groups[0]), arm(groups[1])],
            )
            .unwrap();
            learner.begin_episode().unwrap();
            learner.select_actions(&[0, 0]);
            for _ in 0..3 {
                learner.record_transition(0, 0, 1, 0).unwrap();
            }
            learner.record_transition(0, 0, 1, 1).unwrap();
            for _ in 0..5 {
                learner.record_transition(1, 0, 1, 1).unwrap();
            }
            learner.end_episode().unwrap();
            learner.begin_episode().unwrap();
            learner
        };
        let pooled = drive([Some(0), Some(0)]);
        for arm_id in 0..2 {
            let ball = pooled.ball(arm_id);
            assert_relative_eq!(ball.center().prob(0, 0, 1), 3.0 / 9.0, epsilon = 1e-12);
            assert_eq!(ball.count(0, 1), 9);
        }
        assert_relative_eq!(
            pooled.ball(0).radius(0, 1),
            pooled.ball(1).radius(0, 1),
            epsilon = 1e-15
        );
        // the same data kept private gives each arm only its own counts
        let solo = drive([None, None]);
        assert_relative_eq!(
            solo.ball(0).center().prob(0, 0, 1),
            3.0 / 4.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(solo.ball(1).center().prob(1, 0, 1), 1.0, epsilon = 1e-12);
        assert_eq!(solo.ball(0).count(0, 1), 4);
        assert_eq!(solo.ball(1).count(0, 1), 5);
        assert!(solo.ball(0).radius(0, 1) > pooled.ball(0).radius(0, 1));
    }

    #[test]
    fn ball_membership_is_rowwise_l1() {
        let center =
            TransitionKernel::from_rows(2, vec![0.5, 0.5, 0.2, 0.8, 1.0, 0.0, 0.3, 0.7]).unwrap();
        let ball = ConfidenceBall::from_parts(
            center.clone(),
            vec![0.2, 0.2, 0.0, 0.2],
            vec![true; 8],
            vec![1; 4],
        )
        .unwrap();
        assert!(ball.contains(&center));
        let nudged =
            TransitionKernel::from_rows(2, vec![0.4, 0.6, 0.2, 0.8, 1.0, 0.0, 0.3, 0.7]).unwrap();
        assert!(ball.contains(&nudged));
        let too_far =
            TransitionKernel::from_rows(2, vec![0.35, 0.65, 0.2, 0.8, 1.0, 0.0, 0.3, 0.7]).unwrap();
        assert!(!ball.contains(&too_far));
        // zero-radius row tolerates no movement at all
        let frozen_row_moved =
            TransitionKernel::from_rows(2, vec![0.5, 0.5, 0.2, 0.8, 0.9, 0.1, 0.3, 0.7]).unwrap();
        assert!(!ball.contains(&frozen_row_moved));
    }

    #[test]
    fn optimistic_transport_moves_half_the_radius_uphill() {
        // V(1) > V(0), radius 0.2: each row sends 0.1 of mass up
        let rows: Vec<f64> = (0..8).map(|_| 0.5).collect();
        let ball = simple_ball(2, rows, 0.2);
        let rewards = RewardTable::from_values(2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let (kernel, vf) = optimistic_kernel(&ball, &rewards, 0.0, 0.9, 1e-9).unwrap();
        for s in 0..2 {
            for a in 0..ACTIONS {
                assert_eq!(kernel.row(s, a), &[0.4, 0.6], "row ({s},{a})");
            }
        }
        assert!(vf.v(1) > vf.v(0));
        let again = optimistic_kernel(&ball, &rewards, 0.0, 0.9, 1e-9)
            .unwrap()
            .0;
        assert_eq!(
            kernel.bit_key(),
            again.bit_key(),
            "planning must be deterministic"
        );
    }

    #[test]
    fn zero_radius_ball_returns_the_center_untouched() {
        let rows = vec![
            0.7, 0.2, 0.1, 0.3, 0.3, 0.4, //
            0.1, 0.8, 0.1, 0.5, 0.25, 0.25, //
            0.2, 0.2, 0.6, 0.1, 0.1, 0.8,
        ];
        let ball = simple_ball(3, rows.clone(), 0.0);
        let rewards = RewardTable::from_values(3, vec![0.0, 0.1, 0.5, 0.4, 1.0, 0.9]).unwrap();
        let (kernel, vf) = optimistic_kernel(&ball, &rewards, 0.15, 0.9, 1e-8).unwrap();
        assert_eq!(kernel.bit_key(), ball.center().bit_key());
        let plain = value_iteration(ball.center(), &rewards, 0.15, 0.9, 1e-8).unwrap();
        for s in 0..3 {
            assert_relative_eq!(vf.v(s), plain.v(s), epsilon = 1e-8);
        }
    }

    /// Ladder arm: active climbs with probability q, passive decays with
    /// probability p, rewards grow with the state. Interior rows drift,
    /// boundary rows are pinned.
    fn ladder_ball(n: usize, p: f64, q: f64, radius: f64) -> (ConfidenceBall, RewardTable) {
        let mut rows = vec![0.0; n * ACTIONS * n];
        let mut supports = vec![false; n * ACTIONS * n];
        let mut radii = vec![0.0; n * ACTIONS];
        for s in 0..n {
            let down = s.saturating_sub(1);
            let up = (s + 1).min(n - 1);
            let passive = (s * ACTIONS) * n;
            rows[passive + down] += p;
            rows[passive + s] += 1.0 - p;
            supports[passive + down] = true;
            supports[passive + s] = true;
            let active = (s * ACTIONS + 1) * n;
            rows[active + up] += q;
            rows[active + s] += 1.0 - q;
            supports[active + up] = true;
            supports[active + s] = true;
            radii[s * ACTIONS] = if s == 0 { 0.0 } else { radius };
            radii[s * ACTIONS + 1] = if s == n - 1 { 0.0 } else { radius };
        }
        let center = TransitionKernel::from_rows(n, rows).unwrap();
        let ball =
            ConfidenceBall::from_parts(center, radii, supports, vec![1; n * ACTIONS]).unwrap();
        let rewards =
            RewardTable::from_fn(crate::mdp::StateSpace::new(n), |s, _| s as f64).unwrap();
        (ball, rewards)
    }

    #[test]
    fn monotone_transport_agrees_with_general_evi() {
        let (ball, rewards) = ladder_ball(4, 0.35, 0.55, 0.3);
        let (evi_kernel, evi_vf) = optimistic_kernel(&ball, &rewards, 0.3, 0.9, 1e-8).unwrap();
        let (mono_kernel, mono_vf) =
            monotone_optimistic_kernel(&ball, &rewards, 0.3, 0.9, Monotonicity::Increasing, 1e-8)
                .unwrap();
        assert_eq!(evi_kernel.bit_key(), mono_kernel.bit_key());
        for s in 0..4 {
            assert_relative_eq!(evi_vf.v(s), mono_vf.v(s), epsilon = 1e-7);
        }

        // freshness chain: values fall with age, so the order is reversed
        let n = 5;
        let sigma2 = 0.9;
        let mut rows = vec![0.0; n * ACTIONS * n];
        let mut supports = vec![false; n * ACTIONS * n];
        let mut radii = vec![0.0; n * ACTIONS];
        for i in 0..n {
            let older = (i + 1).min(n - 1);
            let passive = (i * ACTIONS) * n;
            rows[passive + older] = 1.0;
            supports[passive + older] = true;
            let active = (i * ACTIONS + 1) * n;
            rows[active] = 0.4;
            supports[active] = true;
            if older > 0 {
                rows[active + older] += 0.6;
                supports[active + older] = true;
            }
            radii[i * ACTIONS + 1] = 0.25;
        }
        let center = TransitionKernel::from_rows(n, rows).unwrap();
        let ball =
            ConfidenceBall::from_parts(center, radii, supports, vec![1; n * ACTIONS]).unwrap();
        let rewards = RewardTable::from_fn(crate::mdp::StateSpace::new(n), |i, _| {
            crate::whittle::aoi_reward(sigma2, i + 1)
        })
        .unwrap();
        let (evi_kernel, evi_vf) = optimistic_kernel(&ball, &rewards, 0.1, 0.95, 1e-8).unwrap();
        let (mono_kernel, mono_vf) =
            monotone_optimistic_kernel(&ball, &rewards, 0.1, 0.95, Monotonicity::Decreasing, 1e-8)
                .unwrap();
        assert_eq!(evi_kernel.bit_key(), mono_kernel.bit_key());
        for i in 0..n {
            assert_relative_eq!(evi_vf.v(i), mono_vf.v(i), epsilon = 1e-7);
        }
        // optimism raised the delivery probability by half the radius
        assert_relative_eq!(mono_kernel.prob(0, 2, 1), 0.4 + 0.125, epsilon = 1e-12);
    }

    #[test]
    fn declared_shape_is_verified_against_the_solved_values() {
        let (ball, rewards) = ladder_ball(4, 0.35, 0.55, 0.3);
        let err =
            monotone_optimistic_kernel(&ball, &rewards, 0.0, 0.9, Monotonicity::Decreasing, 1e-8)
                .unwrap_err();
        assert!(matches!(
            err,
            LearnerError::NotMonotone {
                expected: "nonincreasing",
                ..
            }
        ));
    }

    #[test]
    fn optimism_dominates_the_truth_on_random_balls() {
        let mut rng = streams::stream(41, &[3]);
        for trial in 0..10u64 {
            let n = 3;
            let mut truth = vec![0.0; n * ACTIONS * n];
            for row in 0..n * ACTIONS {
                let mut mass: Vec<f64> = (0..n).map(|_| -(rng.gen::<f64>().ln())).collect();
                let total: f64 = mass.iter().sum();
                for m in &mut mass {
                    *m /= total;
                }
                truth[row * n..(row + 1) * n].copy_from_slice(&mass);
            }
            let truth = TransitionKernel::from_rows(n, truth).unwrap();
            // nudge the center away from the truth by less than each radius
            let mut center = truth
                .bit_key()
                .iter()
                .map(|b| f64::from_bits(*b))
                .collect::<Vec<_>>();
            let mut radii = vec![0.0; n * ACTIONS];
            for (row, r) in radii.iter_mut().enumerate() {
                let shift: f64 = rng.gen_range(0.0..0.1);
                let hi = center[row * n..(row + 1) * n]
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                let lo = (hi + 1) % n;
                let moved = shift.min(center[row * n + hi]);
                center[row * n + hi] -= moved;
                center[row * n + lo] += moved;
                *r = 2.0 * moved + rng.gen_range(0.0..0.2);
            }
            let center = TransitionKernel::from_rows(n, center).unwrap();
            let ball = ConfidenceBall::from_parts(
                center,
                radii,
                vec![true; n * ACTIONS * n],
                vec![1; n * ACTIONS],
            )
            .unwrap();
            assert!(ball.contains(&truth), "trial {trial}: truth left the ball");
            let reward_values: Vec<f64> = (0..n * ACTIONS).map(|_| rng.gen()).collect();
            let rewards = RewardTable::from_values(n, reward_values).unwrap();
            let (_, opt) = optimistic_kernel(&ball, &rewards, 0.2, 0.9, 1e-8).unwrap();
            let real = value_iteration(&truth, &rewards, 0.2, 0.9, 1e-8).unwrap();
            for s in 0..n {
                assert!(
                    opt.v(s) >= real.v(s) - 1e-6,
                    "trial {trial}: optimism failed at state {s}: {} < {}",
                    opt.v(s),
                    real.v(s)
                );
            }
        }
    }

    #[test]
    fn select_window_matches_the_tuning_rule() {
        assert_eq!(select_window(10_000, 0.6).unwrap(), 40);
        // the harness maps a drift budget of 0.1 at T=50 to this exponent
        let k = (1.0f64 / 0.1).ln() / 50f64.ln();
        assert_eq!(select_window(50, k).unwrap(), 5);
        assert_eq!(
            select_window(200, (1.0f64 / 0.1).ln() / 200f64.ln()).unwrap(),
            5
        );
        // k >= 3/2 saturates at the full horizon
        assert_eq!(select_window(50, 1.5).unwrap(), 50);
        assert_eq!(select_window(50, 7.0).unwrap(), 50);
        assert_eq!(select_window(1, 0.2).unwrap(), 1);
        assert!(matches!(
            select_window(50, 0.0),
            Err(LearnerError::WindowExponent(_))
        ));
        assert!(matches!(
            select_window(50, -1.0),
            Err(LearnerError::WindowExponent(_))
        ));
        assert!(matches!(
            select_window(50, f64::NAN),
            Err(LearnerError::WindowExponent(_))
        ));
        assert!(matches!(
            select_window(0, 0.5),
            Err(LearnerError::BadModel(_))
        ));
    }

    #[test]
    fn mth_highest_is_the_order_statistic() {
        assert_eq!(mth_highest(&[3.0, 1.0, 2.0], 1), 3.0);
        assert_eq!(mth_highest(&[3.0, 1.0, 2.0], 2), 2.0);
        assert_eq!(mth_highest(&[3.0, 1.0, 2.0], 3), 1.0);
        assert_eq!(mth_highest(&[1.0, 1.0, 0.0], 2), 1.0);
    }

    fn known_arm(rows: Vec<f64>, rewards: Vec<f64>, window: usize) -> ArmModel {
        let n = rewards.len() / ACTIONS;
        let kernel = TransitionKernel::from_rows(n, rows).unwrap();
        let priors = (0..n * ACTIONS)
            .map(|i| RowPrior::Known {
                row: kernel.row(i / ACTIONS, i % ACTIONS).to_vec(),
            })
            .collect();
        ArmModel {
            prior: PriorKnowledge::new(n, priors, 0.0).unwrap(),
            rewards: RewardTable::from_values(n, rewards).unwrap(),
            optimism: OptimismStrategy::Evi,
            index: IndexStrategy::BinarySearch,
            window,
            share_group: None,
        }
    }

    #[test]
    fn prior_violations_are_hard_errors() {
        let n = 3;
        let rows = vec![
            RowPrior::Stationary {
                support: mask(n, &[0, 1]),
            },
            RowPrior::Drifting {
                support: mask(n, &[0, 1]),
            },
            RowPrior::Known {
                row: vec![0.0, 1.0, 0.0],
            },
            RowPrior::Drifting { support: full(n) },
            RowPrior::Stationary { support: full(n) },
            RowPrior::Stationary { support: full(n) },
        ];
        let arm = ArmModel {
            prior: PriorKnowledge::new(n, rows, 0.0).unwrap(),
            rewards: RewardTable::from_fn(crate::mdp::StateSpace::new(n), |s, _| s as f64).unwrap(),
            optimism: OptimismStrategy::Evi,
            index: IndexStrategy::BinarySearch,
            window: 2,
            share_group: None,
        };
        let mut learner =
            SlidingWindowLearner::new(LearnerConfig::new(0.9, 10, 1), vec![arm]).unwrap();
        let err = learner.record_transition(0, 0, 1, 2).unwrap_err();
        assert!(matches!(
            err,
            LearnerError::PriorViolation {
                arm: 0,
                s: 0,
                a: 1,
                s_next: 2
            }
        ));
        learner.record_transition(0, 0, 1, 1).unwrap();
        assert_eq!(learner.counts(0).completed_episodes(), 0);
    }

    #[test]
    fn the_charge_becomes_the_mth_highest_index_at_the_last_slot() {
        // three fully known two-state arms with staggered reward scales, so
        // their index tables are distinct and deterministic
        let rows = vec![
            0.9, 0.1, 0.2, 0.8, // state 0: passive stays, active climbs
            0.9, 0.1, 0.2, 0.8,
        ];
        let arms: Vec<ArmModel> = (0..3)
            .map(|i| {
                let scale = 1.0 + i as f64;
                known_arm(rows.clone(), vec![0.0, 0.0, scale, scale], 4)
            })
            .collect();
        let mut learner =
            SlidingWindowLearner::new(LearnerConfig::new(0.9, 10, 2), arms.clone()).unwrap();
        learner.begin_episode().unwrap();
        let tables: Vec<Vec<f64>> = (0..3).map(|i| learner.index_table(i).to_vec()).collect();
        let acts = learner.select_actions(&[0, 0, 0]);
        // richest two arms win the two slots
        assert_eq!(acts, vec![0, 1, 1]);
        for (arm, &a) in acts.iter().enumerate() {
            learner.record_transition(arm, 0, a, 0).unwrap();
        }
        let final_states = [1, 0, 1];
        learner.select_actions(&final_states);
        learner.end_episode().unwrap();
        let current: Vec<f64> = (0..3).map(|i| tables[i][final_states[i]]).collect();
        assert_eq!(learner.lambda(), mth_highest(&current, 2));
        assert_eq!(learner.completed_episodes(), 1);

        // a fresh learner fed the same calls lands on bit-identical state
        let mut replay = SlidingWindowLearner::new(LearnerConfig::new(0.9, 10, 2), arms).unwrap();
        replay.begin_episode().unwrap();
        let acts2 = replay.select_actions(&[0, 0, 0]);
        assert_eq!(acts2, acts);
        for (arm, &a) in acts2.iter().enumerate() {
            replay.record_transition(arm, 0, a, 0).unwrap();
        }
        replay.select_actions(&final_states);
        replay.end_episode().unwrap();
        assert_eq!(replay.lambda().to_bits(), learner.lambda().to_bits());
    }

    #[test]
    fn run_episode_threads_states_through_the_sampler() {
        let rows = vec![
            1.0, 0.0, 0.0, 1.0, // passive stays at 0, active jumps to 1
            0.0, 1.0, 0.0, 1.0, // both actions stay at 1
        ];
        let arm = known_arm(rows, vec![0.0, 0.0, 1.0, 1.0], 4);
        let mut learner =
            SlidingWindowLearner::new(LearnerConfig::new(0.9, 10, 1), vec![arm]).unwrap();
        // single arm, M=1: always activated, so the chain is deterministic
        let trace = run_episode(
            &mut learner,
            &[0],
            3,
            |_, s, a| {
                if a == 1 || s == 1 {
                    1
                } else {
                    0
                }
            },
        )
        .unwrap();
        assert_eq!(trace.states, vec![vec![0], vec![1], vec![1], vec![1]]);
        assert_eq!(trace.actions, vec![vec![1], vec![1], vec![1]]);
        assert_eq!(trace.lambda_used, 0.0);
        // the post-update charge is the single arm's index at state 1
        assert_relative_eq!(trace.lambda_next, trace.index_tables[0][1], epsilon = 1e-12);
    }
}
