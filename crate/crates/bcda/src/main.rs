//! Experiment CLI: train and compare the broad-critic and DDPG agents on
//! the built-in control tasks.

use bcda::agents::{AgentConfig, AgentKind, IlScheme};
use bcda::harness::{self, ExperimentConfig};
use bcda::{Error, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "bcda", about = "Broad-critic deep-actor reinforcement learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent on one task across seeded trials and write curves.
    Run(RunArgs),
    /// Train both agents under identical settings and print a comparison.
    Compare(CompareArgs),
    /// Execute the built-in property checks.
    Selftest,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML config file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    agent: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "il-scheme")]
    il_scheme: Option<String>,
    #[arg(long = "out")]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct CompareArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "out")]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Selftest => cmd_selftest(),
    };
    if let Err(err) = outcome {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<(ExperimentConfig, Option<Vec<u8>>)> {
    match path {
        Some(p) => {
            let raw = std::fs::read(p)?;
            let cfg = ExperimentConfig::from_toml_file(p)?;
            Ok((cfg, Some(raw)))
        }
        None => Ok((ExperimentConfig::default(), None)),
    }
}

fn apply_run_overrides(cfg: &mut ExperimentConfig, args: &RunArgs) -> Result<()> {
    if let Some(task) = &args.task {
        cfg.task = task.parse()?;
    }
    if let Some(agent) = &args.agent {
        cfg.agent = agent.parse::<AgentKind>()?;
        if args.config.is_none() {
            cfg.agent_cfg = AgentConfig::default_for(cfg.agent);
        }
    }
    if let Some(trials) = args.trials {
        cfg.trials = trials;
    }
    if let Some(steps) = args.steps {
        cfg.total_steps = steps;
    }
    if let Some(seed) = args.seed {
        cfg.seed_base = seed;
    }
    if let Some(scheme) = &args.il_scheme {
        cfg.agent_cfg.il_scheme = scheme.parse::<IlScheme>()?;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    Ok(())
}

fn echo_config(cfg: &ExperimentConfig, raw: &Option<Vec<u8>>) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    match raw {
        Some(bytes) => std::fs::write(cfg.output_dir.join("config_echo.toml"), bytes)?,
        None => std::fs::write(cfg.output_dir.join("config_echo.toml"), cfg.to_toml())?,
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let (mut cfg, raw) = load_config(&args.config)?;
    apply_run_overrides(&mut cfg, &args)?;
    cfg.validate()?;
    echo_config(&cfg, &raw)?;
    println!(
        "running {} on {}: {} trials x {} steps (eval every {})",
        cfg.agent.name(),
        cfg.task.name(),
        cfg.trials,
        cfg.total_steps,
        cfg.eval_interval
    );
    let summary = harness::run_experiment(&cfg)?;
    for (i, (max, time)) in summary
        .per_trial_max_avg_reward
        .iter()
        .zip(&summary.per_trial_train_time_s)
        .enumerate()
    {
        println!("trial {i}: max avg reward {max:.4}, training time {time:.1}s");
    }
    println!("mean training time: {:.1}s", summary.mean_train_time_s);
    println!("artifacts written to {}", cfg.output_dir.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let (mut base, raw) = load_config(&args.config)?;
    if let Some(task) = &args.task {
        base.task = task.parse()?;
    }
    if let Some(trials) = args.trials {
        base.trials = trials;
    }
    if let Some(steps) = args.steps {
        base.total_steps = steps;
    }
    if let Some(seed) = args.seed {
        base.seed_base = seed;
    }
    if let Some(out) = &args.out {
        base.output_dir = out.clone();
    }
    base.validate()?;
    std::fs::create_dir_all(&base.output_dir)?;
    echo_config(&base, &raw)?;

    let mut rows = Vec::new();
    for kind in [AgentKind::Bcda, AgentKind::Ddpg] {
        let mut cfg = base.clone();
        cfg.agent = kind;
        if args.config.is_none() {
            cfg.agent_cfg = AgentConfig::default_for(kind);
        }
        cfg.output_dir = base.output_dir.join(kind.name());
        println!(
            "running {} on {} ({} trials x {} steps)...",
            kind.name(),
            cfg.task.name(),
            cfg.trials,
            cfg.total_steps
        );
        let summary = harness::run_experiment(&cfg)?;
        let best = summary
            .per_trial_max_avg_reward
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        rows.push((kind, best, summary.mean_train_time_s));
    }

    println!();
    println!("task: {}", base.task.name());
    println!("{:<8} {:>20} {:>22}", "agent", "max avg reward", "mean train time (s)");
    for (kind, best, time) in &rows {
        println!("{:<8} {:>20.4} {:>22.2}", kind.name(), best, time);
    }
    let (ddpg_t, bcda_t) = (rows[1].2, rows[0].2);
    if ddpg_t > 0.0 {
        println!(
            "efficiency improvement of bcda relative to ddpg: {:.2}%",
            (1.0 - bcda_t / ddpg_t) * 100.0
        );
    }
    Ok(())
}

fn cmd_selftest() -> Result<()> {
    if harness::selftest::run() {
        Ok(())
    } else {
        Err(Error::NumericalFailure("selftest failures".into()))
    }
}
