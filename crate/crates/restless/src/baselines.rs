//! Comparison policies sharing one activation contract.
//!
//! Every policy here answers the same question each decision slot: given the
//! arms' current states, which ≤ M of them get the activation budget? The
//! contenders are
//!
//!   * the sliding-window optimistic index policy (wrapped [`SlidingWindowPolicy`]),
//!   * its full-history ablation ([`ucwhittle_policy`]), which treats every
//!     estimable row as fixed, zeroes the drift allowance, and lets the window
//!     cover the whole run, so stale pre-drift data keeps its full weight,
//!   * tabular Q-learning over activation advantages ([`WiqlPolicy`]) with
//!     learning rate 1/(1+visits) and exploration probability c/(c+slots),
//!   * a uniformly random M-subset per slot ([`RandomPolicy`]).
//!
//! Policies own their decision randomness (a counter-based stream passed in
//! at construction), so a run is reproducible from its seed alone.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::learner::{
    ArmModel, LearnerConfig, LearnerError, PriorKnowledge, RowPrior, SlidingWindowLearner,
};

/// Uniform activation contract the harness drives.
///
/// Implementations must be deterministic given their construction seed; the
/// harness replays runs and expects bit-identical traces.
pub trait Policy: Send {
    /// Called once before the first slot of each episode.
    fn begin_episode(&mut self, episode: usize) -> Result<(), LearnerError>;

    /// One 0/1 action per arm, at most M ones.
    fn select(&mut self, states: &[usize], slot: usize) -> Vec<usize>;

    /// One observed transition with its unpenalized reward.
    fn observe(
        &mut self,
        arm: usize,
        s: usize,
        a: usize,
        s_next: usize,
        reward: f64,
    ) -> Result<(), LearnerError>;

    /// Called once after the last slot of each episode.
    fn end_episode(&mut self) -> Result<(), LearnerError>;
}

/// Marks the first `m` slots of a Fisher-Yates shuffle, which is a uniform
/// m-subset of 0..n.
fn uniform_subset(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    let take = m.min(n);
    for i in 0..take {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    let mut actions = vec![0; n];
    for &arm in pool.iter().take(take) {
        actions[arm] = 1;
    }
    actions
}

/// The main learner behind the shared policy contract.
pub struct SlidingWindowPolicy {
    learner: SlidingWindowLearner,
}

impl SlidingWindowPolicy {
    pub fn new(learner: SlidingWindowLearner) -> Self {
        Self { learner }
    }

    /// Read access for diagnostics and tests.
    pub fn learner(&self) -> &SlidingWindowLearner {
        &self.learner
    }
}

impl Policy for SlidingWindowPolicy {
    fn begin_episode(&mut self, _episode: usize) -> Result<(), LearnerError> {
        self.learner.begin_episode()
    }

    fn select(&mut self, states: &[usize], _slot: usize) -> Vec<usize> {
        self.learner.select_actions(states)
    }

    fn observe(
        &mut self,
        arm: usize,
        s: usize,
        a: usize,
        s_next: usize,
        _reward: f64,
    ) -> Result<(), LearnerError> {
        self.learner.record_transition(arm, s, a, s_next)
    }

    fn end_episode(&mut self) -> Result<(), LearnerError> {
        self.learner.end_episode()
    }
}

/// The static-setting ablation: the same optimistic index machinery, but
/// every estimable row is treated as fixed and learned on its own from all
/// history.
///
/// Concretely each drifting row becomes a stationary row with the same
/// support, the drift allowance ε is zeroed, windows stretch to cover the
/// whole run, both row families share the fixed-row failure mass η₁, and
/// the structural shortcuts disappear: no scalar-parameter ties, no count
/// pooling across same-kernel arms, every transition row estimated cell by
/// cell. Rows known exactly stay known. On a truly static environment with
/// unstructured kernels the ablation is the learner; under drift it keeps
/// averaging over data the kernel has moved away from, and on parametric
/// families it pays for ignoring the structure.
pub fn ucwhittle_policy(
    config: &LearnerConfig,
    arms: &[ArmModel],
) -> Result<SlidingWindowPolicy, LearnerError> {
    let mut flat = config.clone();
    flat.eta2 = flat.eta1;
    let flat_arms = arms
        .iter()
        .map(|arm| {
            let n = arm.prior.n_states();
            let mut rows = Vec::with_capacity(2 * n);
            for s in 0..n {
                for a in 0..2 {
                    rows.push(match arm.prior.row(s, a) {
                        RowPrior::Drifting { support } | RowPrior::Stationary { support } => {
                            RowPrior::Stationary {
                                support: support.clone(),
                            }
                        }
                        RowPrior::Known { row } => RowPrior::Known { row: row.clone() },
                    });
                }
            }
            Ok(ArmModel {
                prior: PriorKnowledge::new(n, rows, 0.0)?,
                rewards: arm.rewards.clone(),
                optimism: arm.optimism,
                index: arm.index.clone(),
                window: flat.t_total,
                // the naive contender learns every row of every arm on its
                // own: no parameter ties, no cross-arm pooling
                share_group: None,
            })
        })
        .collect::<Result<Vec<_>, LearnerError>>()?;
    Ok(SlidingWindowPolicy::new(SlidingWindowLearner::new(
        flat, flat_arms,
    )?))
}

/// Constants of the Q-learning baseline, all overridable.
#[derive(Debug, Clone)]
pub struct WiqlConfig {
    pub n_arms: usize,
    pub n_states: usize,
    pub m_budget: usize,
    /// Discount used in the Q update target.
    pub gamma: f64,
    /// c in the exploration schedule ε = c/(c + slots so far); the
    /// transcribed schedule uses c = N. Non-positive disables exploration.
    pub explore_offset: f64,
    /// k in the learning rate 1/(k + prior visits of (s,a)); the transcribed
    /// rate uses k = 1.
    pub rate_offset: f64,
}

impl WiqlConfig {
    pub fn new(n_arms: usize, n_states: usize, m_budget: usize, gamma: f64) -> Self {
        Self {
            n_arms,
            n_states,
            m_budget,
            gamma,
            explore_offset: n_arms as f64,
            rate_offset: 1.0,
        }
    }
}

/// Per-arm tabular Q-learning on the unpenalized reward.
///
/// Each slot it explores a uniformly random M-subset with probability
/// ε = c/(c + total slots seen), otherwise activates the M arms with the
/// largest advantage Q(s,1) − Q(s,0) at their current states, ties to the
/// lower arm id. Observations update the played (s,a) toward
/// r + γ·max_a′ Q(s′,a′) with rate 1/(k + prior visits). Q starts at zero,
/// so early selections lean on the heavy initial exploration.
pub struct WiqlPolicy {
    config: WiqlConfig,
    // indexed [arm][state][action]
    q: Vec<Vec<[f64; 2]>>,
    visits: Vec<Vec<[u64; 2]>>,
    slots_seen: u64,
    rng: ChaCha8Rng,
}

impl WiqlPolicy {
    pub fn new(config: WiqlConfig, rng: ChaCha8Rng) -> Self {
        assert!(config.n_arms > 0 && config.n_states > 0, "empty problem");
        assert!(
            config.m_budget >= 1 && config.m_budget <= config.n_arms,
            "budget must satisfy 1 <= M <= N"
        );
        assert!(
            (0.0..1.0).contains(&config.gamma),
            "discount must lie in [0, 1)"
        );
        let q = vec![vec![[0.0; 2]; config.n_states]; config.n_arms];
        let visits = vec![vec![[0; 2]; config.n_states]; config.n_arms];
        Self {
            config,
            q,
            visits,
            slots_seen: 0,
            rng,
        }
    }

    pub fn q_value(&self, arm: usize, s: usize, a: usize) -> f64 {
        self.q[arm][s][a]
    }

    pub fn visit_count(&self, arm: usize, s: usize, a: usize) -> u64 {
        self.visits[arm][s][a]
    }
}

impl Policy for WiqlPolicy {
    fn begin_episode(&mut self, _episode: usize) -> Result<(), LearnerError> {
        Ok(())
    }

    fn select(&mut self, states: &[usize], _slot: usize) -> Vec<usize> {
        assert_eq!(states.len(), self.config.n_arms, "one state per arm");
        let eps = if self.config.explore_offset > 0.0 {
            self.config.explore_offset / (self.config.explore_offset + self.slots_seen as f64)
        } else {
            0.0
        };
        self.slots_seen += 1;
        if self.rng.gen::<f64>() < eps {
            return uniform_subset(self.config.n_arms, self.config.m_budget, &mut self.rng);
        }
        let advantage: Vec<f64> = states
            .iter()
            .enumerate()
            .map(|(i, &s)| self.q[i][s][1] - self.q[i][s][0])
            .collect();
        let mut ranked: Vec<usize> = (0..self.config.n_arms).collect();
        ranked.sort_unstable_by(|&i, &j| advantage[j].total_cmp(&advantage[i]).then(i.cmp(&j)));
        let mut actions = vec![0; self.config.n_arms];
        for &i in ranked.iter().take(self.config.m_budget) {
            actions[i] = 1;
        }
        actions
    }

    fn observe(
        &mut self,
        arm: usize,
        s: usize,
        a: usize,
        s_next: usize,
        reward: f64,
    ) -> Result<(), LearnerError> {
        let alpha = 1.0 / (self.config.rate_offset + self.visits[arm][s][a] as f64);
        self.visits[arm][s][a] += 1;
        let ahead = self.q[arm][s_next][0].max(self.q[arm][s_next][1]);
        let target = reward + self.config.gamma * ahead;
        self.q[arm][s][a] += alpha * (target - self.q[arm][s][a]);
        Ok(())
    }

    fn end_episode(&mut self) -> Result<(), LearnerError> {
        Ok(())
    }
}

/// Activates a uniformly random M-subset every slot. No learning state.
pub struct RandomPolicy {
    n_arms: usize,
    m_budget: usize,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(n_arms: usize, m_budget: usize, rng: ChaCha8Rng) -> Self {
        assert!(
            m_budget >= 1 && m_budget <= n_arms,
            "budget must satisfy 1 <= M <= N"
        );
        Self {
            n_arms,
            m_budget,
            rng,
        }
    }
}

impl Policy for RandomPolicy {
    fn begin_episode(&mut self, _episode: usize) -> Result<(), LearnerError> {
        Ok(())
    }

    fn select(&mut self, states: &[usize], _slot: usize) -> Vec<usize> {
        assert_eq!(states.len(), self.n_arms, "one state per arm");
        uniform_subset(self.n_arms, self.m_budget, &mut self.rng)
    }

    fn observe(
        &mut self,
        _arm: usize,
        _s: usize,
        _a: usize,
        _s_next: usize,
        _reward: f64,
    ) -> Result<(), LearnerError> {
        Ok(())
    }

    fn end_episode(&mut self) -> Result<(), LearnerError> {
        Ok(())
    }
}
