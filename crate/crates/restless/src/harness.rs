//! Seeded regret benchmarks over drifting bandit environments.
//!
//! One experiment = one environment family, N arms, M activations, T episodes
//! of H slots, a set of policies, and `runs` independent repetitions. Run r
//! draws its own ground truth from seed + r, then every policy replays the
//! same pre-sampled kernel sequence; only action-dependent randomness differs.
//! The benchmark per episode is a Whittle index policy computed from the true
//! episode kernels, rolled out on its own transition streams, so per-episode
//! regret
//!
//!   Reg^(t) = oracle reward(t) − policy reward(t)
//!
//! can dip below zero on single runs; claims live in means over runs. Every
//! (purpose, run, policy, arm, episode) tuple derives an independent
//! counter-based generator, which makes results reproducible bit for bit and
//! lets runs execute on any number of workers without perturbing each other.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::baselines::{
    ucwhittle_policy, Policy, RandomPolicy, SlidingWindowPolicy, WiqlConfig, WiqlPolicy,
};
use crate::envs::{build_environment, sample_next_state, EnvError, EnvSpec, EnvironmentTruth};
use crate::learner::{select_window, ArmModel, LearnerConfig, LearnerError, SlidingWindowLearner};
use crate::streams::{self, PURPOSE_DECISION, PURPOSE_TRANSITION};
use crate::whittle::{aoi_closed_form_index, whittle_index_table, IndexSearchOptions};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    /// Episode 0 marks a failure while constructing the policy itself.
    #[error("run {run}, policy {policy}, episode {episode}: {source}")]
    Execution {
        run: usize,
        policy: &'static str,
        episode: usize,
        #[source]
        source: LearnerError,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Malformed { path: PathBuf, message: String },
    #[error("regret curve has {0} episodes, need at least 10")]
    CurveTooShort(usize),
    #[error("log-log fit needs at least 5 positive points in the second half, found {0}")]
    TooFewPoints(usize),
}

fn io_err(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which contender to field. The discriminant doubles as the stream label, so
/// adding or removing a policy from a config never shifts another policy's
/// randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyChoice {
    Oracle,
    Ours,
    Ucwhittle,
    Wiql,
    Random,
}

impl PolicyChoice {
    pub fn id(self) -> u64 {
        match self {
            PolicyChoice::Oracle => 0,
            PolicyChoice::Ours => 1,
            PolicyChoice::Ucwhittle => 2,
            PolicyChoice::Wiql => 3,
            PolicyChoice::Random => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyChoice::Oracle => "oracle",
            PolicyChoice::Ours => "ours",
            PolicyChoice::Ucwhittle => "ucwhittle",
            PolicyChoice::Wiql => "wiql",
            PolicyChoice::Random => "random",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "oracle" => Some(PolicyChoice::Oracle),
            "ours" => Some(PolicyChoice::Ours),
            "ucwhittle" => Some(PolicyChoice::Ucwhittle),
            "wiql" => Some(PolicyChoice::Wiql),
            "random" => Some(PolicyChoice::Random),
            _ => None,
        }
    }
}

fn default_mix() -> f64 {
    0.5
}
fn default_eta() -> f64 {
    0.05
}
fn default_runs() -> usize {
    50
}
fn default_workers() -> usize {
    1
}
fn default_search_tol() -> f64 {
    1e-3
}
fn default_evi_tol() -> f64 {
    1e-6
}
fn default_policies() -> Vec<PolicyChoice> {
    vec![
        PolicyChoice::Ours,
        PolicyChoice::Ucwhittle,
        PolicyChoice::Wiql,
        PolicyChoice::Random,
    ]
}

/// One experiment, loadable from a TOML file. Unset fields take the
/// documented defaults; `window` unset sizes the history window from the
/// configured drift rate.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub n_arms: usize,
    pub m_budget: usize,
    /// Slots per episode (H).
    pub horizon: usize,
    /// Episodes per run (T).
    pub episodes: usize,
    pub gamma: f64,
    /// Fraction of arms in the drifting class; the rest form the disclosed
    /// or stationary class of the family.
    #[serde(default = "default_mix")]
    pub mix: f64,
    #[serde(default = "default_eta")]
    pub eta1: f64,
    #[serde(default = "default_eta")]
    pub eta2: f64,
    /// Episodes of history for drifting rows. Unset: w = T^min(2k/3, 1) with
    /// k solving (per-episode L1 drift) = T^-k, the tuning the regret bound
    /// wants; drift-free configs fall back to the full run.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyChoice>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Directory for summary.csv and curves.csv; the CLI defaults it to ".".
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_search_tol")]
    pub search_tol: f64,
    #[serde(default = "default_evi_tol")]
    pub evi_tol: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.env.validate()?;
        if self.m_budget < 1 || self.m_budget > self.n_arms {
            return Err(HarnessError::BadConfig(format!(
                "budget must satisfy 1 <= M <= N, got M={} N={}",
                self.m_budget, self.n_arms
            )));
        }
        if self.horizon < 1 || self.episodes < 1 {
            return Err(HarnessError::BadConfig(
                "horizon and episodes must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(HarnessError::BadConfig(format!(
                "gamma {} outside [0, 1)",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(HarnessError::BadConfig(format!(
                "mix {} outside [0, 1]",
                self.mix
            )));
        }
        for (name, eta) in [("eta1", self.eta1), ("eta2", self.eta2)] {
            if !(eta > 0.0 && eta < 1.0) {
                return Err(HarnessError::BadConfig(format!(
                    "{name}={eta} outside (0, 1)"
                )));
            }
        }
        if self.runs < 1 {
            return Err(HarnessError::BadConfig("need at least one run".into()));
        }
        if self.workers < 1 {
            return Err(HarnessError::BadConfig("need at least one worker".into()));
        }
        if self.search_tol <= 0.0
            || self.evi_tol <= 0.0
            || !self.search_tol.is_finite()
            || !self.evi_tol.is_finite()
        {
            return Err(HarnessError::BadConfig(
                "tolerances must be positive".into(),
            ));
        }
        if self.policies.is_empty() {
            return Err(HarnessError::BadConfig("policy list is empty".into()));
        }
        for (i, p) in self.policies.iter().enumerate() {
            if self.policies[..i].contains(p) {
                return Err(HarnessError::BadConfig(format!(
                    "policy {} listed twice; duplicates would replay the same streams",
                    p.name()
                )));
            }
        }
        self.effective_window()?;
        Ok(())
    }

    /// k with (declared drift rate) = T^-k, or None for drift-free configs.
    pub fn drift_exponent(&self) -> Option<f64> {
        let eps = self.env.declared_epsilon();
        if eps <= 0.0 || self.episodes < 2 {
            None
        } else {
            Some((1.0 / eps).ln() / (self.episodes as f64).ln())
        }
    }

    /// The window actually used for drifting rows: the override if present,
    /// otherwise sized from the drift rate, otherwise the whole run.
    pub fn effective_window(&self) -> Result<usize, HarnessError> {
        if let Some(w) = self.window {
            if w < 1 || w > self.episodes {
                return Err(HarnessError::BadConfig(format!(
                    "window {w} outside 1..={}",
                    self.episodes
                )));
            }
            return Ok(w);
        }
        match self.drift_exponent() {
            None => Ok(self.episodes),
            Some(k) => select_window(self.episodes, k)
                .map_err(|e| HarnessError::BadConfig(format!("auto window failed: {e}"))),
        }
    }

    pub fn learner_config(&self) -> LearnerConfig {
        let mut lc = LearnerConfig::new(self.gamma, self.episodes, self.m_budget);
        lc.eta1 = self.eta1;
        lc.eta2 = self.eta2;
        lc.search = self.search_options();
        lc.evi_tol = self.evi_tol;
        lc
    }

    pub fn search_options(&self) -> IndexSearchOptions {
        IndexSearchOptions {
            search_tol: self.search_tol,
            ..IndexSearchOptions::default()
        }
    }
}

/// Parses a TOML experiment file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    toml::from_str(&text).map_err(|e| HarnessError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// One (run, policy, episode) cell of the experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegretRecord {
    pub run: usize,
    pub policy: PolicyChoice,
    /// 1-based, matching the CSV output.
    pub episode: usize,
    pub oracle_reward: f64,
    pub policy_reward: f64,
    pub regret: f64,
    pub cum_regret: f64,
}

/// Whittle index policy on the true episode kernels.
///
/// All arms of a class share one kernel sequence, so tables are computed once
/// per (class, episode) and memoized on the kernel bits; the stationary class
/// costs one solve for the whole run. Freshness environments read the true
/// delivery probability off the active row and use the closed-form index.
pub struct OraclePolicy<'a> {
    truth: &'a EnvironmentTruth,
    gamma: f64,
    m_budget: usize,
    search: IndexSearchOptions,
    /// Present classes, as (class id, representative arm).
    classes: Vec<(usize, usize)>,
    tables: Vec<Vec<f64>>,
    memo: HashMap<Vec<u64>, Vec<f64>>,
}

impl<'a> OraclePolicy<'a> {
    pub fn new(
        truth: &'a EnvironmentTruth,
        gamma: f64,
        m_budget: usize,
        search: IndexSearchOptions,
    ) -> Self {
        let mut classes: Vec<(usize, usize)> = Vec::new();
        for arm in 0..truth.n_arms() {
            let class = truth.class_of(arm);
            if !classes.iter().any(|&(c, _)| c == class) {
                classes.push((class, arm));
            }
        }
        let n_tables = classes.iter().map(|&(c, _)| c + 1).max().unwrap_or(0);
        Self {
            truth,
            gamma,
            m_budget,
            search,
            classes,
            tables: vec![Vec::new(); n_tables],
            memo: HashMap::new(),
        }
    }
}

impl Policy for OraclePolicy<'_> {
    fn begin_episode(&mut self, episode: usize) -> Result<(), LearnerError> {
        for &(class, arm) in &self.classes {
            let kernel = self.truth.kernel(arm, episode);
            if let EnvSpec::Aoi { sigma2, .. } = self.truth.spec() {
                // delivery success resets to the freshest age, so the active
                // row's mass on state 0 is the success probability
                let q = kernel.prob(0, 0, 1);
                let table = (0..kernel.n_states())
                    .map(|i| aoi_closed_form_index(q, *sigma2, i + 1))
                    .collect();
                self.tables[class] = table;
                continue;
            }
            let mut key = vec![class as u64];
            key.extend(kernel.bit_key());
            if let Some(hit) = self.memo.get(&key) {
                self.tables[class] = hit.clone();
                continue;
            }
            let table =
                whittle_index_table(kernel, self.truth.rewards(arm), self.gamma, &self.search)?;
            let values = table.indices().to_vec();
            self.memo.insert(key, values.clone());
            self.tables[class] = values;
        }
        Ok(())
    }

    fn select(&mut self, states: &[usize], _slot: usize) -> Vec<usize> {
        assert_eq!(states.len(), self.truth.n_arms(), "one state per arm");
        let score = |arm: usize| -> f64 { self.tables[self.truth.class_of(arm)][states[arm]] };
        let mut ranked: Vec<usize> = (0..states.len()).collect();
        ranked.sort_unstable_by(|&i, &j| score(j).total_cmp(&score(i)).then(i.cmp(&j)));
        let mut actions = vec![0; states.len()];
        for &i in ranked.iter().take(self.m_budget) {
            actions[i] = 1;
        }
        actions
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

/// Plays one episode and returns Σ_h γ^(h−1) Σ_n r_n, the discounted reward
/// summed over all arms, active or not. Budget compliance is asserted at
/// every slot. `rngs` carries one transition stream per arm.
pub fn drive_episode(
    policy: &mut dyn Policy,
    truth: &EnvironmentTruth,
    episode: usize,
    horizon: usize,
    gamma: f64,
    m_budget: usize,
    rngs: &mut [ChaCha8Rng],
) -> Result<f64, LearnerError> {
    let n = truth.n_arms();
    assert_eq!(rngs.len(), n, "one transition stream per arm");
    policy.begin_episode(episode)?;
    let mut states: Vec<usize> = (0..n).map(|arm| truth.start_state(arm)).collect();
    let mut total = 0.0;
    let mut discount = 1.0;
    for slot in 0..horizon {
        let actions = policy.select(&states, slot);
        assert_eq!(actions.len(), n, "one action per arm");
        assert!(actions.iter().all(|&a| a <= 1), "actions must be 0 or 1");
        assert!(
            actions.iter().sum::<usize>() <= m_budget,
            "policy exceeded the activation budget"
        );
        let mut slot_reward = 0.0;
        for arm in 0..n {
            let (s, a) = (states[arm], actions[arm]);
            let reward = truth.rewards(arm).at(s, a);
            slot_reward += reward;
            let next = sample_next_state(truth.kernel(arm, episode), s, a, &mut rngs[arm]);
            policy.observe(arm, s, a, next, reward)?;
            states[arm] = next;
        }
        total += discount * slot_reward;
        discount *= gamma;
    }
    policy.end_episode()?;
    Ok(total)
}

fn rollout(
    config: &ExperimentConfig,
    truth: &EnvironmentTruth,
    policy: &mut dyn Policy,
    choice: PolicyChoice,
    seed_run: u64,
    run: usize,
) -> Result<Vec<f64>, HarnessError> {
    let mut rewards = Vec::with_capacity(config.episodes);
    for episode in 0..config.episodes {
        let mut rngs: Vec<ChaCha8Rng> = (0..config.n_arms)
            .map(|arm| {
                streams::stream(
                    seed_run,
                    &[PURPOSE_TRANSITION, choice.id(), arm as u64, episode as u64],
                )
            })
            .collect();
        let reward = drive_episode(
            policy,
            truth,
            episode,
            config.horizon,
            config.gamma,
            config.m_budget,
            &mut rngs,
        )
        .map_err(|source| HarnessError::Execution {
            run,
            policy: choice.name(),
            episode: episode + 1,
            source,
        })?;
        rewards.push(reward);
    }
    Ok(rewards)
}

fn build_failure(run: usize, choice: PolicyChoice, source: LearnerError) -> HarnessError {
    HarnessError::Execution {
        run,
        policy: choice.name(),
        episode: 0,
        source,
    }
}

fn execute_run(config: &ExperimentConfig, run: usize) -> Result<Vec<RegretRecord>, HarnessError> {
    let seed_run = config.seed.wrapping_add(run as u64);
    let truth = build_environment(
        &config.env,
        config.n_arms,
        config.mix,
        config.episodes,
        seed_run,
    )?;

    // the benchmark every policy is charged against, on policy-0 streams
    let oracle_rewards = {
        let mut oracle = OraclePolicy::new(
            &truth,
            config.gamma,
            config.m_budget,
            config.search_options(),
        );
        rollout(
            config,
            &truth,
            &mut oracle,
            PolicyChoice::Oracle,
            seed_run,
            run,
        )?
    };

    let mut records = Vec::with_capacity(config.policies.len() * config.episodes);
    for &choice in &config.policies {
        let rewards = match choice {
            PolicyChoice::Oracle => {
                // same streams as the benchmark rollout, so regret is exactly 0
                let mut p = OraclePolicy::new(
                    &truth,
                    config.gamma,
                    config.m_budget,
                    config.search_options(),
                );
                rollout(config, &truth, &mut p, choice, seed_run, run)?
            }
            PolicyChoice::Ours => {
                let window = config
                    .effective_window()
                    .expect("validated before the run started");
                let arms: Vec<ArmModel> = (0..config.n_arms)
                    .map(|a| truth.arm_model(a, window))
                    .collect();
                let learner = SlidingWindowLearner::new(config.learner_config(), arms)
                    .map_err(|e| build_failure(run, choice, e))?;
                let mut p = SlidingWindowPolicy::new(learner);
                rollout(config, &truth, &mut p, choice, seed_run, run)?
            }
            PolicyChoice::Ucwhittle => {
                let arms: Vec<ArmModel> = (0..config.n_arms)
                    .map(|a| truth.arm_model(a, config.episodes))
                    .collect();
                let mut p = ucwhittle_policy(&config.learner_config(), &arms)
                    .map_err(|e| build_failure(run, choice, e))?;
                rollout(config, &truth, &mut p, choice, seed_run, run)?
            }
            PolicyChoice::Wiql => {
                let wc = WiqlConfig::new(
                    config.n_arms,
                    truth.n_states(),
                    config.m_budget,
                    config.gamma,
                );
                let rng = streams::stream(seed_run, &[PURPOSE_DECISION, choice.id()]);
                let mut p = WiqlPolicy::new(wc, rng);
                rollout(config, &truth, &mut p, choice, seed_run, run)?
            }
            PolicyChoice::Random => {
                let rng = streams::stream(seed_run, &[PURPOSE_DECISION, choice.id()]);
                let mut p = RandomPolicy::new(config.n_arms, config.m_budget, rng);
                rollout(config, &truth, &mut p, choice, seed_run, run)?
            }
        };

        let mut cum = 0.0;
        for (ep, (&oracle_reward, &policy_reward)) in
            oracle_rewards.iter().zip(&rewards).enumerate()
        {
            let regret = oracle_reward - policy_reward;
            cum += regret;
            records.push(RegretRecord {
                run,
                policy: choice,
                episode: ep + 1,
                oracle_reward,
                policy_reward,
                regret,
                cum_regret: cum,
            });
        }
    }
    Ok(records)
}

/// What [`run_experiment`] collected. On failure, `records` keeps every run
/// below the first failing run index, so partial results can still be
/// written before aborting.
pub struct ExperimentOutcome {
    pub records: Vec<RegretRecord>,
    pub failure: Option<HarnessError>,
}

/// Executes all runs on the configured number of workers.
///
/// Runs are independent: each draws its environment from seed + run and its
/// policies replay dedicated streams. Workers pull run indices from a shared
/// counter; the reduction reassembles results in run order, so the output is
/// identical whatever the worker count or completion order.
pub fn run_experiment(config: &ExperimentConfig) -> ExperimentOutcome {
    if let Err(e) = config.validate() {
        return ExperimentOutcome {
            records: Vec::new(),
            failure: Some(e),
        };
    }
    type RunSlot = Option<Result<Vec<RegretRecord>, HarnessError>>;
    let workers = config.workers.min(config.runs);
    let mut per_run: Vec<RunSlot> = (0..config.runs).map(|_| None).collect();

    if workers <= 1 {
        for (run, slot) in per_run.iter_mut().enumerate() {
            let result = execute_run(config, run);
            let failed = result.is_err();
            *slot = Some(result);
            if failed {
                break;
            }
        }
    } else {
        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let cells: Mutex<Vec<RunSlot>> = Mutex::new((0..config.runs).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    let run = next.fetch_add(1, Ordering::Relaxed);
                    if run >= config.runs {
                        break;
                    }
                    let result = execute_run(config, run);
                    if result.is_err() {
                        stop.store(true, Ordering::Relaxed);
                    }
                    cells.lock().expect("a worker panicked")[run] = Some(result);
                });
            }
        });
        per_run = cells.into_inner().expect("a worker panicked");
    }

    // keep the contiguous healthy prefix; the lowest failing run wins, and
    // anything at or above it is dropped so the output never depends on how
    // far other workers got
    let mut records = Vec::new();
    let mut failure = None;
    for slot in per_run {
        match slot {
            Some(Ok(rs)) if failure.is_none() => records.extend(rs),
            Some(Err(e)) if failure.is_none() => failure = Some(e),
            _ => {}
        }
    }
    ExperimentOutcome { records, failure }
}

/// Mean and sample standard deviation (n−1), std 0 for a single value.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n > 0, "mean of nothing");
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy)]
pub struct PolicySummary {
    pub policy: PolicyChoice,
    pub mean_regret: f64,
    pub std_regret: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub policy: PolicyChoice,
    pub episode: usize,
    pub mean_cum_regret: f64,
    pub std_cum_regret: f64,
}

/// Per-(policy, episode) mean and std of cumulative regret across complete
/// runs, plus the final-episode summary per policy. Records must come from
/// [`run_experiment`] with the same config (complete runs, run-major order).
pub fn aggregate(
    records: &[RegretRecord],
    config: &ExperimentConfig,
) -> (Vec<PolicySummary>, Vec<CurvePoint>) {
    let t = config.episodes;
    let per_run = config.policies.len() * t;
    if per_run == 0 || records.len() < per_run {
        return (Vec::new(), Vec::new());
    }
    assert_eq!(records.len() % per_run, 0, "records must cover whole runs");
    let runs = records.len() / per_run;

    let mut summaries = Vec::with_capacity(config.policies.len());
    let mut curves = Vec::with_capacity(per_run);
    let mut values = Vec::with_capacity(runs);
    for (pi, &policy) in config.policies.iter().enumerate() {
        for ep in 1..=t {
            values.clear();
            for run in 0..runs {
                let record = &records[run * per_run + pi * t + (ep - 1)];
                debug_assert_eq!(record.policy, policy);
                debug_assert_eq!(record.episode, ep);
                values.push(record.cum_regret);
            }
            let (mean, std) = mean_std(&values);
            curves.push(CurvePoint {
                policy,
                episode: ep,
                mean_cum_regret: mean,
                std_cum_regret: std,
            });
        }
        let last = curves.last().expect("t >= 1");
        summaries.push(PolicySummary {
            policy,
            mean_regret: last.mean_cum_regret,
            std_regret: last.std_cum_regret,
        });
    }
    (summaries, curves)
}

/// Six significant digits, plain notation until it stops being readable.
fn format_sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0.00000".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if exp >= 6 {
        format!("{x:.5e}")
    } else {
        let decimals = (5 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    }
}

/// Writes summary.csv (one row per policy: final mean regret) and curves.csv
/// (one row per policy and episode) into `dir`, creating it if needed.
/// Returns the two paths. Identical records and config produce identical
/// bytes.
pub fn emit_results(
    records: &[RegretRecord],
    config: &ExperimentConfig,
    dir: &Path,
) -> Result<(PathBuf, PathBuf), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let (summaries, curves) = aggregate(records, config);

    let mut summary = String::from("policy,N,M,H,T,mean_regret,std_regret\n");
    for row in &summaries {
        summary.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.policy.name(),
            config.n_arms,
            config.m_budget,
            config.horizon,
            config.episodes,
            format_sig6(row.mean_regret),
            format_sig6(row.std_regret),
        ));
    }
    let summary_path = dir.join("summary.csv");
    fs::write(&summary_path, summary).map_err(|e| io_err(&summary_path, e))?;

    let mut curve_text = String::from("policy,episode,mean_cum_regret,std_cum_regret\n");
    for p in &curves {
        curve_text.push_str(&format!(
            "{},{},{},{}\n",
            p.policy.name(),
            p.episode,
            format_sig6(p.mean_cum_regret),
            format_sig6(p.std_cum_regret),
        ));
    }
    let curves_path = dir.join("curves.csv");
    fs::write(&curves_path, curve_text).map_err(|e| io_err(&curves_path, e))?;

    Ok((summary_path, curves_path))
}

/// Fits log Reg(t) = a + r log t by least squares over the second half of the
/// curve and returns r̂. `curve[i]` is cumulative regret at episode i+1.
/// Nonpositive entries are excluded; fewer than 5 usable points is an error.
pub fn sublinearity_check(curve: &[f64]) -> Result<f64, HarnessError> {
    if curve.len() < 10 {
        return Err(HarnessError::CurveTooShort(curve.len()));
    }
    let start = curve.len() / 2;
    let points: Vec<(f64, f64)> = curve
        .iter()
        .enumerate()
        .skip(start)
        .filter(|&(_, &v)| v > 0.0)
        .map(|(i, &v)| (((i + 1) as f64).ln(), v.ln()))
        .collect();
    if points.len() < 5 {
        return Err(HarnessError::TooFewPoints(points.len()));
    }
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    Ok((n * sxy - sx * sy) / (n * sxx - sx * sx))
}

/// Reads a curves.csv back into (policy, cumulative regret curve) pairs in
/// first-appearance order.
pub fn read_curves(path: &Path) -> Result<Vec<(String, Vec<f64>)>, HarnessError> {
    let malformed = |message: String| HarnessError::Malformed {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("policy,episode,mean_cum_regret,std_cum_regret") => {}
        Some(other) => return Err(malformed(format!("unexpected header {other:?}"))),
        None => return Err(malformed("empty file".into())),
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_policy: HashMap<String, Vec<(usize, f64)>> = HashMap::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(malformed(format!("line {}: expected 4 fields", i + 2)));
        }
        let episode: usize = fields[1]
            .parse()
            .map_err(|_| malformed(format!("line {}: bad episode {:?}", i + 2, fields[1])))?;
        let mean: f64 = fields[2]
            .parse()
            .map_err(|_| malformed(format!("line {}: bad value {:?}", i + 2, fields[2])))?;
        let name = fields[0].to_string();
        if !by_policy.contains_key(&name) {
            order.push(name.clone());
        }
        by_policy.entry(name).or_default().push((episode, mean));
    }
    let mut out = Vec::with_capacity(order.len());
    for name in order {
        let mut rows = by_policy.remove(&name).expect("listed in order");
        rows.sort_unstable_by_key(|&(ep, _)| ep);
        for (want, &(got, _)) in rows.iter().enumerate().map(|(i, r)| (i + 1, r)) {
            if got != want {
                return Err(malformed(format!(
                    "policy {name}: episodes not contiguous at {got}, expected {want}"
                )));
            }
        }
        out.push((name, rows.into_iter().map(|(_, v)| v).collect()));
    }
    Ok(out)
}
