//! Whittle-index policies for restless bandits whose transition kernels are
//! unknown and drift over time, plus the baselines and benchmark harness used
//! to compare them.

pub mod baselines;
pub mod envs;
pub mod harness;
pub mod learner;
pub mod mdp;
pub mod streams;
pub mod whittle;

pub use baselines::{
    ucwhittle_policy, Policy, RandomPolicy, SlidingWindowPolicy, WiqlConfig, WiqlPolicy,
};
pub use envs::{
    advance_drift, aoi_kernel, build_environment, one_dim_kernel, sample_next_state, DriftProcess,
    EnvError, EnvSpec, EnvironmentTruth,
};
pub use harness::{
    aggregate, drive_episode, emit_results, load_config, read_curves, run_experiment,
    sublinearity_check, CurvePoint, ExperimentConfig, ExperimentOutcome, HarnessError,
    OraclePolicy, PolicyChoice, PolicySummary, RegretRecord,
};
pub use learner::{
    build_ball, confidence_radii, empirical_kernel, monotone_optimistic_kernel, mth_highest,
    optimistic_kernel, run_episode, select_window, ArmModel, ConfidenceBall, EpisodeTrace,
    IndexStrategy, LearnerConfig, LearnerError, Monotonicity, OptimismStrategy, PriorKnowledge,
    RadiusParams, RowPrior, SlidingWindowLearner, WindowedCounts,
};
pub use mdp::{
    bellman_backup, policy_evaluation, value_iteration, value_iteration_with, MdpError,
    RewardTable, StateSpace, TransitionKernel, ValueFunctions, ValueIterationOptions,
};
pub use whittle::{
    activate_set, aoi_closed_form_index, aoi_reward, default_lambda_max, indexability_probe,
    whittle_index, whittle_index_table, whittle_index_with, IndexSearchOptions, IndexabilityReport,
    WhittleError, WhittleIndexTable,
};
