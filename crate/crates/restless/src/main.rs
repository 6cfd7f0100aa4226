//! Command-line front end for the regret benchmarks.
//!
//! `run` executes a TOML experiment config and writes summary.csv plus
//! curves.csv, `check` validates a config and prints the resolved plan, and
//! `fit` estimates the log-log growth exponent of emitted regret curves.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use restless::harness::{
    self, load_config, run_experiment, sublinearity_check, ExperimentConfig, HarnessError,
    PolicyChoice,
};

#[derive(Parser)]
#[command(
    name = "restless",
    version,
    about = "Regret benchmarks for restless bandits with drifting dynamics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment and write summary.csv and curves.csv
    Run {
        /// Experiment config (TOML)
        config: PathBuf,
        /// Override the number of independent runs
        #[arg(long)]
        runs: Option<usize>,
        /// Override the base seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the worker count
        #[arg(long)]
        workers: Option<usize>,
        /// Keep only the named policies (repeatable)
        #[arg(long = "policy")]
        policies: Vec<String>,
    },
    /// Validate a config and print the resolved experiment plan
    Check {
        /// Experiment config (TOML)
        config: PathBuf,
    },
    /// Fit the log-log slope of each cumulative regret curve
    Fit {
        /// A curves.csv produced by `run`
        curves: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut cause = std::error::Error::source(&e);
            while let Some(c) = cause {
                eprintln!("  caused by: {c}");
                cause = c.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Run {
            config,
            runs,
            seed,
            out,
            workers,
            policies,
        } => {
            let mut config = load_config(&config)?;
            if let Some(runs) = runs {
                config.runs = runs;
            }
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(out) = out {
                config.out = Some(out);
            }
            if let Some(workers) = workers {
                config.workers = workers;
            }
            if !policies.is_empty() {
                config.policies = parse_policies(&policies)?;
            }
            config.validate()?;
            run(&config)
        }
        Command::Check { config } => {
            let config = load_config(&config)?;
            config.validate()?;
            print_plan(&config);
            Ok(ExitCode::SUCCESS)
        }
        Command::Fit { curves } => fit(&curves),
    }
}

fn parse_policies(names: &[String]) -> Result<Vec<PolicyChoice>, HarnessError> {
    let mut choices = Vec::new();
    for name in names {
        let choice = PolicyChoice::from_name(name).ok_or_else(|| {
            HarnessError::BadConfig(format!(
                "unknown policy {name:?}; expected oracle, ours, ucwhittle, wiql, or random"
            ))
        })?;
        if !choices.contains(&choice) {
            choices.push(choice);
        }
    }
    Ok(choices)
}

fn run(config: &ExperimentConfig) -> Result<ExitCode, HarnessError> {
    let outcome = run_experiment(config);
    let dir = config.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let (summary_path, curves_path) = harness::emit_results(&outcome.records, config, &dir)?;

    let (summaries, _) = harness::aggregate(&outcome.records, config);
    if !summaries.is_empty() {
        println!("policy      mean Reg(T)        std");
        for s in &summaries {
            println!(
                "{:<10} {:>12.3} {:>10.3}",
                s.policy.name(),
                s.mean_regret,
                s.std_regret
            );
        }
    }
    println!(
        "wrote {} and {}",
        summary_path.display(),
        curves_path.display()
    );

    match outcome.failure {
        None => Ok(ExitCode::SUCCESS),
        Some(e) => {
            eprintln!("error: {e}");
            eprintln!("partial results for completed runs were written");
            Ok(ExitCode::FAILURE)
        }
    }
}

fn print_plan(config: &ExperimentConfig) {
    let family = match config.env {
        restless::EnvSpec::OneDim { .. } => "one_dim",
        restless::EnvSpec::Aoi { .. } => "aoi",
        restless::EnvSpec::Synthetic { .. } => "synthetic",
    };
    println!("environment    {family}");
    println!("arms           N={} M={}", config.n_arms, config.m_budget);
    println!(
        "schedule       H={} T={} gamma={}",
        config.horizon, config.episodes, config.gamma
    );
    println!(
        "drift          epsilon_L1={} per episode",
        config.env.epsilon_l1()
    );
    match config.drift_exponent() {
        Some(k) => println!(
            "window         {} episodes (k={k:.4})",
            config.effective_window().expect("validated")
        ),
        None => println!(
            "window         {} episodes (drift-free)",
            config.effective_window().expect("validated")
        ),
    }
    println!("confidence     eta1={} eta2={}", config.eta1, config.eta2);
    let names: Vec<&str> = config.policies.iter().map(|p| p.name()).collect();
    println!("policies       {}", names.join(", "));
    println!(
        "runs           {} from seed {} on {} workers",
        config.runs, config.seed, config.workers
    );
    println!("config ok");
}

fn fit(curves: &Path) -> Result<ExitCode, HarnessError> {
    let parsed = harness::read_curves(curves)?;
    if parsed.is_empty() {
        return Err(HarnessError::Malformed {
            path: curves.to_path_buf(),
            message: "no data rows".into(),
        });
    }
    let mut fitted = 0;
    for (name, curve) in &parsed {
        match sublinearity_check(curve) {
            Ok(slope) => {
                println!(
                    "{name}: r_hat = {slope:.4} over episodes {}..{}",
                    curve.len() / 2 + 1,
                    curve.len()
                );
                fitted += 1;
            }
            Err(e) => println!("{name}: fit unavailable ({e})"),
        }
    }
    if fitted > 0 {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: no curve could be fitted");
        Ok(ExitCode::FAILURE)
    }
}
