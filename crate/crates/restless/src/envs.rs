//! Ground-truth environments: arm families, kernel drift, and priors.
//!
//! Three families ship with the benchmark:
//!
//! * One-dimensional ladder: K states with reward r(s,a) = s. Active moves up
//!   one rung with probability q, passive falls one rung with probability p,
//!   both clamped at the ends. Half the arms have a drifting p and a fixed
//!   but unknown q; the other half are fully known with p = 0.5, q = 1.
//! * Freshness (age-of-information) chain: state i is age i+1, capped. The
//!   age always grows by one unless an activation delivers, which resets it
//!   to age 1 with the channel probability q. Reward is the mutual-information
//!   value −log₂(1−(σ²)ᵃᵍᵉ)/2, decreasing in age. Passive rows are known
//!   exactly (age just grows); active rows drift for half the arms and are
//!   fixed but unknown (q = 1) for the rest.
//! * Synthetic three-state family with full-support rows, used to measure
//!   confidence-ball coverage where no structural zeros help the learner.
//!
//! Drift follows a clamped random walk: the parameter moves by +ε with
//! probability 0.7 and −ε otherwise. One parameter step moves two row entries
//! by ε each, so the per-episode L1 drift bound handed to the learner is 2ε.
//! Kernel sequences for all T episodes are pre-sampled at build time so every
//! policy in a comparison faces bit-identical ground truth.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learner::{
    ArmModel, IndexStrategy, LearnerError, Monotonicity, OptimismStrategy, ParameterTie,
    PriorKnowledge, RowPrior, TieMember,
};
use crate::mdp::{RewardTable, StateSpace, TransitionKernel, ACTIONS};
use crate::streams;
use crate::whittle::aoi_reward;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("{0}")]
    BadSpec(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
}

/// Clamped ±ε random walk on one kernel parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftProcess {
    pub epsilon: f64,
    pub up_prob: f64,
    pub bounds: (f64, f64),
    pub current: f64,
}

impl DriftProcess {
    pub fn new(
        current: f64,
        epsilon: f64,
        up_prob: f64,
        bounds: (f64, f64),
    ) -> Result<Self, EnvError> {
        if !(bounds.0 <= current && current <= bounds.1) {
            return Err(EnvError::BadSpec(format!(
                "drift start {current} outside bounds [{}, {}]",
                bounds.0, bounds.1
            )));
        }
        if !(0.0..=1.0).contains(&up_prob) {
            return Err(EnvError::BadSpec(format!(
                "up probability {up_prob} outside [0, 1]"
            )));
        }
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(EnvError::BadSpec(format!(
                "drift step {epsilon} must be finite and >= 0"
            )));
        }
        Ok(Self {
            epsilon,
            up_prob,
            bounds,
            current,
        })
    }
}

/// One drift step: +ε with probability up_prob, −ε otherwise, clamped.
pub fn advance_drift(proc: &DriftProcess, rng: &mut impl Rng) -> DriftProcess {
    let up = rng.gen::<f64>() < proc.up_prob;
    let moved = if up {
        proc.current + proc.epsilon
    } else {
        proc.current - proc.epsilon
    };
    DriftProcess {
        current: moved.clamp(proc.bounds.0, proc.bounds.1),
        ..*proc
    }
}

/// Ladder kernel: active climbs with probability q, passive falls with
/// probability p, leftover mass stays put; boundary moves self-merge.
pub fn one_dim_kernel(k: usize, p: f64, q: f64) -> TransitionKernel {
    assert!(k >= 2, "ladder needs at least two states");
    assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&q));
    let mut rows = vec![0.0; k * ACTIONS * k];
    for s in 0..k {
        let down = s.saturating_sub(1);
        let up = (s + 1).min(k - 1);
        let passive = (s * ACTIONS) * k;
        rows[passive + down] += p;
        rows[passive + s] += 1.0 - p;
        let active = (s * ACTIONS + 1) * k;
        rows[active + up] += q;
        rows[active + s] += 1.0 - q;
    }
    TransitionKernel::from_rows(k, rows).expect("ladder rows are stochastic by construction")
}

/// Freshness kernel on ages 1..=cap (state i is age i+1): passive ages
/// deterministically, active resets to age 1 with probability q.
pub fn aoi_kernel(cap: usize, q: f64) -> TransitionKernel {
    assert!(cap >= 2, "freshness chain needs at least two ages");
    assert!((0.0..=1.0).contains(&q));
    let mut rows = vec![0.0; cap * ACTIONS * cap];
    for i in 0..cap {
        let older = (i + 1).min(cap - 1);
        rows[(i * ACTIONS) * cap + older] = 1.0;
        let active = (i * ACTIONS + 1) * cap;
        rows[active] += q;
        rows[active + older] += 1.0 - q;
    }
    TransitionKernel::from_rows(cap, rows).expect("freshness rows are stochastic by construction")
}

fn default_one_dim_states() -> usize {
    10
}

fn default_half() -> f64 {
    0.5
}

fn default_one() -> f64 {
    1.0
}

fn default_eps() -> f64 {
    0.05
}

fn default_aoi_cap() -> usize {
    50
}

fn default_sigma2() -> f64 {
    0.9
}

/// Environment family plus its class parameters. `epsilon` is the per-step
/// drift of the moving parameter; the L1 bound declared to the learner is
/// twice that.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    OneDim {
        #[serde(default = "default_one_dim_states")]
        states: usize,
        /// Drifting class: starting value of the passive fall probability.
        #[serde(default = "default_half")]
        p_start: f64,
        /// Drifting class: fixed but unknown climb probability.
        #[serde(default = "default_half")]
        q_fixed: f64,
        /// Known class: fall probability, disclosed to the learner.
        #[serde(default = "default_half")]
        known_p: f64,
        /// Known class: climb probability, disclosed to the learner.
        #[serde(default = "default_one")]
        known_q: f64,
        #[serde(default = "default_eps")]
        epsilon: f64,
    },
    Aoi {
        /// Age cap (the chain self-saturates here).
        #[serde(default = "default_aoi_cap")]
        cap: usize,
        #[serde(default = "default_sigma2")]
        sigma2: f64,
        /// Drifting class: starting delivery probability.
        #[serde(default = "default_aoi_q_start")]
        q_start: f64,
        /// Stationary class: fixed but unknown delivery probability.
        #[serde(default = "default_one")]
        stationary_q: f64,
        #[serde(default = "default_eps")]
        epsilon: f64,
    },
    Synthetic {
        #[serde(default = "default_eps")]
        epsilon: f64,
    },
}

fn default_aoi_q_start() -> f64 {
    0.1
}

impl EnvSpec {
    pub fn n_states(&self) -> usize {
        match self {
            EnvSpec::OneDim { states, .. } => *states,
            EnvSpec::Aoi { cap, .. } => *cap,
            EnvSpec::Synthetic { .. } => 3,
        }
    }

    /// Per-step movement of the drifting parameter.
    pub fn epsilon_param(&self) -> f64 {
        match self {
            EnvSpec::OneDim { epsilon, .. }
            | EnvSpec::Aoi { epsilon, .. }
            | EnvSpec::Synthetic { epsilon } => *epsilon,
        }
    }

    /// Row-level L1 drift bound per episode: one parameter step moves two
    /// row entries by ε each. Generation-time kernel checks assert against
    /// this bound.
    pub fn epsilon_l1(&self) -> f64 {
        2.0 * self.epsilon_param()
    }

    /// The drift rate declared to the learner, i.e. what a domain expert
    /// would quote when configuring the policy. The ladder and freshness
    /// families each drift through one scalar parameter, so the expert
    /// quotes the per-episode step of that scalar; the synthetic family
    /// drifts a full-support row and quotes the row-level L1 bound.
    pub fn declared_epsilon(&self) -> f64 {
        match self {
            EnvSpec::OneDim { .. } | EnvSpec::Aoi { .. } => self.epsilon_param(),
            EnvSpec::Synthetic { .. } => self.epsilon_l1(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let eps = self.epsilon_param();
        if !eps.is_finite() || eps < 0.0 {
            return Err(EnvError::BadSpec(format!(
                "drift step {eps} must be finite and >= 0"
            )));
        }
        match self {
            EnvSpec::OneDim {
                states,
                p_start,
                q_fixed,
                known_p,
                known_q,
                ..
            } => {
                if *states < 2 {
                    return Err(EnvError::BadSpec(format!(
                        "ladder needs >= 2 states, got {states}"
                    )));
                }
                for (name, v) in [
                    ("p_start", p_start),
                    ("q_fixed", q_fixed),
                    ("known_p", known_p),
                    ("known_q", known_q),
                ] {
                    if !(0.0..=1.0).contains(v) {
                        return Err(EnvError::BadSpec(format!("{name}={v} outside [0, 1]")));
                    }
                }
            }
            EnvSpec::Aoi {
                cap,
                sigma2,
                q_start,
                stationary_q,
                ..
            } => {
                if *cap < 2 {
                    return Err(EnvError::BadSpec(format!("age cap {cap} must be >= 2")));
                }
                if !(*sigma2 > 0.0 && *sigma2 < 1.0) {
                    return Err(EnvError::BadSpec(format!("sigma2={sigma2} outside (0, 1)")));
                }
                for (name, v) in [("q_start", q_start), ("stationary_q", stationary_q)] {
                    if !(0.0..=1.0).contains(v) {
                        return Err(EnvError::BadSpec(format!("{name}={v} outside [0, 1]")));
                    }
                }
            }
            EnvSpec::Synthetic { .. } => {
                if eps > 0.25 {
                    // the drifting parameter lives in [0.2, 0.7]; bigger steps
                    // would spend most of the walk pinned at the clamps
                    return Err(EnvError::BadSpec(format!(
                        "synthetic drift step {eps} too large for the parameter interval"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Pre-sampled ground truth: per-class kernel sequences (arms of a class
/// share one sequence), rewards, priors, and start states. Immutable after
/// build, so runs can share it freely.
#[derive(Debug, Clone)]
pub struct EnvironmentTruth {
    spec: EnvSpec,
    class_kernels: Vec<Vec<TransitionKernel>>,
    class_rewards: Vec<RewardTable>,
    class_priors: Vec<PriorKnowledge>,
    arm_class: Vec<usize>,
    start_states: Vec<usize>,
    t_total: usize,
}

impl EnvironmentTruth {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn n_arms(&self) -> usize {
        self.arm_class.len()
    }

    pub fn n_states(&self) -> usize {
        self.spec.n_states()
    }

    pub fn t_total(&self) -> usize {
        self.t_total
    }

    pub fn class_of(&self, arm: usize) -> usize {
        self.arm_class[arm]
    }

    /// True kernel of one arm in one episode (0-based).
    pub fn kernel(&self, arm: usize, episode: usize) -> &TransitionKernel {
        &self.class_kernels[self.arm_class[arm]][episode]
    }

    pub fn rewards(&self, arm: usize) -> &RewardTable {
        &self.class_rewards[self.arm_class[arm]]
    }

    pub fn prior(&self, arm: usize) -> &PriorKnowledge {
        &self.class_priors[self.arm_class[arm]]
    }

    pub fn start_state(&self, arm: usize) -> usize {
        self.start_states[arm]
    }

    /// Learner-side view of one arm: its prior, rewards, and the planning
    /// strategies this family admits.
    pub fn arm_model(&self, arm: usize, window: usize) -> ArmModel {
        let (optimism, index) = match &self.spec {
            EnvSpec::OneDim { .. } => (
                OptimismStrategy::Monotone(Monotonicity::Increasing),
                IndexStrategy::BinarySearch,
            ),
            EnvSpec::Aoi { sigma2, .. } => (
                OptimismStrategy::Monotone(Monotonicity::Decreasing),
                IndexStrategy::AoiClosedForm { sigma2: *sigma2 },
            ),
            EnvSpec::Synthetic { .. } => (OptimismStrategy::Evi, IndexStrategy::BinarySearch),
        };
        ArmModel {
            prior: self.prior(arm).clone(),
            rewards: self.rewards(arm).clone(),
            optimism,
            index,
            window,
            share_group: Some(self.class_of(arm)),
        }
    }

    /// FNV-1a fold over every kernel bit, start state, and class label; equal
    /// ground truth hashes equal, so policy comparisons can assert they saw
    /// the same world.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |x: u64| {
            h = (h ^ x).wrapping_mul(0x0000_0100_0000_01b3);
        };
        for kernels in &self.class_kernels {
            for kernel in kernels {
                for bits in kernel.bit_key() {
                    eat(bits);
                }
            }
        }
        for &c in &self.arm_class {
            eat(c as u64);
        }
        for &s in &self.start_states {
            eat(s as u64);
        }
        h
    }
}

/// Support mask helper: `n` states with the listed entries reachable.
fn support(n: usize, allowed: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; n];
    for &i in allowed {
        mask[i] = true;
    }
    mask
}

/// Sample the next state from one kernel row.
pub fn sample_next_state(
    kernel: &TransitionKernel,
    s: usize,
    a: usize,
    rng: &mut impl Rng,
) -> usize {
    let row = kernel.row(s, a);
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last_positive = s;
    for (s_next, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last_positive = s_next;
            cum += p;
            if u < cum {
                return s_next;
            }
        }
    }
    // rounding can leave cum marginally below 1; land on the last reachable state
    last_positive
}

/// Builds the full pre-sampled ground truth. Arms 0..round(mix·N) form the
/// drifting class, the rest the stationary/known class; arms of a class share
/// one kernel sequence. Drift is drawn from the seed's environment stream, so
/// the same seed always produces bit-identical truth.
pub fn build_environment(
    spec: &EnvSpec,
    n_arms: usize,
    mix: f64,
    t_total: usize,
    seed: u64,
) -> Result<EnvironmentTruth, EnvError> {
    spec.validate()?;
    if n_arms == 0 {
        return Err(EnvError::BadSpec("need at least one arm".into()));
    }
    if !(0.0..=1.0).contains(&mix) {
        return Err(EnvError::BadSpec(format!("mix={mix} outside [0, 1]")));
    }
    if t_total == 0 {
        return Err(EnvError::BadSpec("episode budget must be positive".into()));
    }
    let n = spec.n_states();
    let n_drifting = ((mix * n_arms as f64).round() as usize).min(n_arms);
    let eps = spec.epsilon_param();
    let eps_l1 = spec.epsilon_l1();

    // class 0 drifts, class 1 is stationary (or fully known); each class
    // samples its parameter path once and every arm of the class reuses it
    let mut drift_rng = streams::stream(seed, &[streams::PURPOSE_ENV, 0]);
    let (class_kernels, class_rewards, class_priors): (
        Vec<Vec<TransitionKernel>>,
        Vec<RewardTable>,
        Vec<PriorKnowledge>,
    ) = match spec {
        EnvSpec::OneDim {
            states,
            p_start,
            q_fixed,
            known_p,
            known_q,
            ..
        } => {
            let k = *states;
            let mut drifting = Vec::with_capacity(t_total);
            let mut proc = DriftProcess::new(*p_start, eps, 0.7, (0.0, 1.0))?;
            for t in 0..t_total {
                if t > 0 {
                    proc = advance_drift(&proc, &mut drift_rng);
                }
                drifting.push(one_dim_kernel(k, proc.current, *q_fixed));
            }
            let known = vec![one_dim_kernel(k, *known_p, *known_q); t_total];
            let rewards =
                RewardTable::from_fn(StateSpace::new(k), |s, _| s as f64).expect("finite rewards");
            // drifting class: passive rows drift with p, active rows are
            // fixed but unknown; supports mirror the ladder's structure.
            // Every informative passive row is the same Bernoulli in p and
            // every informative active row the same Bernoulli in q, so the
            // rows are declared tied and their counts pool. The boundary
            // rows (falling off 0, climbing past the top) are single-outcome
            // and carry no information about either parameter. The prior
            // quotes the scalar step as the drift rate (declared_epsilon);
            // the row-level L1 bound, twice the step, is only asserted
            // against the generated kernels below.
            let mut drift_rows = Vec::with_capacity(k * ACTIONS);
            for s in 0..k {
                drift_rows.push(RowPrior::Drifting {
                    support: support(k, &[s.saturating_sub(1), s]),
                });
                drift_rows.push(RowPrior::Stationary {
                    support: support(k, &[s, (s + 1).min(k - 1)]),
                });
            }
            let fall = ParameterTie {
                members: (1..k).map(|s| TieMember { s, a: 0, hi: s - 1 }).collect(),
            };
            let climb = ParameterTie {
                members: (0..k - 1)
                    .map(|s| TieMember { s, a: 1, hi: s + 1 })
                    .collect(),
            };
            let drift_prior =
                PriorKnowledge::new(k, drift_rows, eps)?.with_ties(vec![fall, climb])?;
            let known_kernel = &known[0];
            let mut known_rows = Vec::with_capacity(k * ACTIONS);
            for s in 0..k {
                for a in 0..ACTIONS {
                    known_rows.push(RowPrior::Known {
                        row: known_kernel.row(s, a).to_vec(),
                    });
                }
            }
            let known_prior = PriorKnowledge::new(k, known_rows, 0.0)?;
            (
                vec![drifting, known],
                vec![rewards.clone(), rewards],
                vec![drift_prior, known_prior],
            )
        }
        EnvSpec::Aoi {
            cap,
            sigma2,
            q_start,
            stationary_q,
            ..
        } => {
            let k = *cap;
            let mut drifting = Vec::with_capacity(t_total);
            let mut proc = DriftProcess::new(*q_start, eps, 0.7, (0.0, 1.0))?;
            for t in 0..t_total {
                if t > 0 {
                    proc = advance_drift(&proc, &mut drift_rng);
                }
                drifting.push(aoi_kernel(k, proc.current));
            }
            let stationary = vec![aoi_kernel(k, *stationary_q); t_total];
            let rewards =
                RewardTable::from_fn(StateSpace::new(k), |i, _| aoi_reward(*sigma2, i + 1))
                    .expect("finite rewards");
            // aging is known physics; only the delivery rows are learned,
            // and they are one Bernoulli in the success probability across
            // all ages, so they pool into a single tied estimate
            let prior_for = |kind: fn(Vec<bool>) -> RowPrior| -> Result<PriorKnowledge, EnvError> {
                let mut rows = Vec::with_capacity(k * ACTIONS);
                for i in 0..k {
                    let older = (i + 1).min(k - 1);
                    let mut aged = vec![0.0; k];
                    aged[older] = 1.0;
                    rows.push(RowPrior::Known { row: aged });
                    rows.push(kind(support(k, &[0, older])));
                }
                let deliver = ParameterTie {
                    members: (0..k).map(|s| TieMember { s, a: 1, hi: 0 }).collect(),
                };
                Ok(PriorKnowledge::new(k, rows, eps)?.with_ties(vec![deliver])?)
            };
            let drift_prior = prior_for(|s| RowPrior::Drifting { support: s })?;
            let mut stat_prior = prior_for(|s| RowPrior::Stationary { support: s })?;
            stat_prior.epsilon = 0.0;
            (
                vec![drifting, stationary],
                vec![rewards.clone(), rewards],
                vec![drift_prior, stat_prior],
            )
        }
        EnvSpec::Synthetic { .. } => {
            let k = 3;
            // passive rows are fixed and full-support; active rows move mass
            // u(t) one step around the cycle, with u drifting in [0.2, 0.7]
            let synthetic_kernel = |u: f64| -> TransitionKernel {
                let mut rows = vec![0.0; k * ACTIONS * k];
                for s in 0..k {
                    let passive = (s * ACTIONS) * k;
                    rows[passive + s] = 0.5;
                    rows[passive + (s + 1) % k] = 0.3;
                    rows[passive + (s + 2) % k] = 0.2;
                    let active = (s * ACTIONS + 1) * k;
                    rows[active + s] = 0.9 - u;
                    rows[active + (s + 1) % k] = u;
                    rows[active + (s + 2) % k] = 0.1;
                }
                TransitionKernel::from_rows(k, rows).expect("synthetic rows are stochastic")
            };
            let u_start = 0.45;
            let mut drifting = Vec::with_capacity(t_total);
            let mut proc = DriftProcess::new(u_start, eps, 0.7, (0.2, 0.7))?;
            for t in 0..t_total {
                if t > 0 {
                    proc = advance_drift(&proc, &mut drift_rng);
                }
                drifting.push(synthetic_kernel(proc.current));
            }
            let stationary = vec![synthetic_kernel(u_start); t_total];
            let rewards =
                RewardTable::from_fn(StateSpace::new(k), |s, _| s as f64).expect("finite rewards");
            let prior_for = |active: fn(Vec<bool>) -> RowPrior,
                             eps_prior: f64|
             -> Result<PriorKnowledge, EnvError> {
                let mut rows = Vec::with_capacity(k * ACTIONS);
                for _ in 0..k {
                    rows.push(RowPrior::Stationary {
                        support: vec![true; k],
                    });
                    rows.push(active(vec![true; k]));
                }
                Ok(PriorKnowledge::new(k, rows, eps_prior)?)
            };
            let drift_prior = prior_for(|s| RowPrior::Drifting { support: s }, eps_l1)?;
            let stat_prior = prior_for(|s| RowPrior::Stationary { support: s }, 0.0)?;
            (
                vec![drifting, stationary],
                vec![rewards.clone(), rewards],
                vec![drift_prior, stat_prior],
            )
        }
    };

    // generation-time guarantees: every kernel respects its class's declared
    // support exactly, and consecutive kernels stay within the drift bound
    for (class, kernels) in class_kernels.iter().enumerate() {
        let prior = &class_priors[class];
        for (t, kernel) in kernels.iter().enumerate() {
            for s in 0..n {
                for a in 0..ACTIONS {
                    let sup = prior.support(s, a);
                    for (s2, &p) in kernel.row(s, a).iter().enumerate() {
                        assert!(
                            sup[s2] || p == 0.0,
                            "class {class} episode {t}: mass {p} outside support at ({s},{a})->{s2}"
                        );
                    }
                }
            }
            if t > 0 {
                let step = kernel.max_row_l1_distance(&kernels[t - 1]);
                assert!(
                    step <= eps_l1 + 1e-12,
                    "class {class} episode {t}: drift {step} exceeds the declared bound {eps_l1}"
                );
            }
        }
    }

    let arm_class: Vec<usize> = (0..n_arms).map(|a| usize::from(a >= n_drifting)).collect();
    let start_states = vec![0; n_arms];
    Ok(EnvironmentTruth {
        spec: spec.clone(),
        class_kernels,
        class_rewards,
        class_priors,
        arm_class,
        start_states,
        t_total,
    })
}
