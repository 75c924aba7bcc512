//! Experiment runner: multi-seed trials with periodic noise-free evaluation,
//! moving-average curves, wall-clock accounting, and CSV/SVG artifacts.

pub mod selftest;

use crate::agents::{Agent, AgentConfig, AgentKind};
use crate::envs::Task;
use crate::error::{Error, Result};
use crate::replay::Transition;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

const STREAM_TRIAL_ENV: u64 = 0x10;
const STREAM_EVAL_BASE: u64 = 0x1000;

/// Full experiment description. Serialized as flat key-value TOML; the
/// embedded agent hyperparameters are flattened into the same namespace.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: Task,
    pub agent: AgentKind,
    pub trials: usize,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub ma_window: usize,
    pub seed_base: u64,
    /// Upper bound on concurrently running trials (each trial is
    /// single-threaded and fully independent).
    pub max_parallel_trials: usize,
    pub output_dir: PathBuf,
    #[serde(flatten)]
    pub agent_cfg: AgentConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Invpen,
            agent: AgentKind::Bcda,
            trials: 5,
            total_steps: 100_000,
            eval_interval: 500,
            eval_episodes: 5,
            ma_window: 10,
            seed_base: 0,
            max_parallel_trials: 0, // 0 = use available parallelism
            output_dir: PathBuf::from("out"),
            agent_cfg: AgentConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.eval_interval == 0 || self.total_steps % self.eval_interval != 0 {
            return Err(Error::Config(format!(
                "eval_interval ({}) must divide total_steps ({})",
                self.eval_interval, self.total_steps
            )));
        }
        if self.eval_episodes == 0 || self.ma_window == 0 {
            return Err(Error::Config("eval_episodes and ma_window must be >= 1".into()));
        }
        self.agent_cfg.validate()
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_default()
    }
}

/// One evaluation point within a trial.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub trial: usize,
    pub timestep: usize,
    pub avg_reward: f64,
    /// Cumulative training seconds up to this point, evaluation excluded.
    pub wall_clock_s: f64,
}

/// Per-trial outcome of an experiment.
pub struct TrialResult {
    pub records: Vec<EvalRecord>,
    pub train_time_s: f64,
}

/// Aggregated experiment outcome.
pub struct ExperimentSummary {
    pub per_trial_max_avg_reward: Vec<f64>,
    pub per_trial_train_time_s: Vec<f64>,
    pub mean_train_time_s: f64,
    pub trials: Vec<TrialResult>,
}

/// Runs evaluation episodes with exploration off; the agent's training
/// state (buffer, optimizers, step count) is left untouched.
pub fn evaluate(
    agent: &mut dyn Agent,
    task: Task,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut env = task.build();
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut obs = env.reset(rng);
        loop {
            let action = agent.select_action(&obs, false);
            let step = env.step(&action);
            total += step.reward;
            if step.terminated || step.truncated {
                break;
            }
            obs = step.next_obs;
        }
    }
    total / episodes as f64
}

/// Runs one seeded trial: the training loop with periodic frozen
/// evaluations. Returns the evaluation records and the trained agent.
pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<(TrialResult, Box<dyn Agent>)> {
    cfg.validate()?;
    let seed = cfg.seed_base.wrapping_add(trial as u64);
    let mut env = cfg.task.build();
    let spec = env.spec();
    let mut agent = cfg.agent.build(&spec, cfg.agent_cfg.clone(), seed)?;

    let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
    env_rng.set_stream(STREAM_TRIAL_ENV);

    let mut records = Vec::with_capacity(cfg.total_steps / cfg.eval_interval.max(1));
    let mut obs = env.reset(&mut env_rng);
    let mut train_time = 0.0f64;
    let mut clock = Instant::now();
    for step in 1..=cfg.total_steps {
        let action = agent.select_action(&obs, true);
        let result = env.step(&action);
        agent.record(Transition {
            state: obs,
            action,
            reward: result.reward,
            next_state: result.next_obs.clone(),
            done: result.terminated,
            target: None,
        })?;
        obs = if result.terminated || result.truncated {
            env.reset(&mut env_rng)
        } else {
            result.next_obs
        };
        agent.update()?;

        if step % cfg.eval_interval == 0 {
            train_time += clock.elapsed().as_secs_f64();
            let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
            eval_rng.set_stream(STREAM_EVAL_BASE + step as u64);
            let avg = evaluate(agent.as_mut(), cfg.task, cfg.eval_episodes, &mut eval_rng);
            records.push(EvalRecord {
                trial,
                timestep: step,
                avg_reward: avg,
                wall_clock_s: train_time,
            });
            clock = Instant::now();
        }
    }
    train_time += clock.elapsed().as_secs_f64();
    Ok((
        TrialResult {
            records,
            train_time_s: train_time,
        },
        agent,
    ))
}

/// Runs all trials (concurrently when allowed), writes artifacts, and
/// returns the summary.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;

    let workers = if cfg.max_parallel_trials == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cfg.max_parallel_trials
    }
    .min(cfg.trials)
    .max(1);

    let mut slots: Vec<Option<Result<(TrialResult, Box<dyn Agent>)>>> =
        (0..cfg.trials).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slot_refs = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let trial = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if trial >= cfg.trials {
                    break;
                }
                let outcome = run_trial(cfg, trial);
                let mut guard = slot_refs.lock().unwrap();
                guard[trial] = Some(outcome);
            });
        }
    });

    let mut trials = Vec::with_capacity(cfg.trials);
    for (i, slot) in slots.into_iter().enumerate() {
        let (result, agent) = slot.expect("worker filled every slot")?;
        let ckpt = cfg.output_dir.join(format!(
            "checkpoint_{}_{}_trial{}.bin",
            cfg.agent.name(),
            cfg.task.name(),
            i
        ));
        agent.save(&ckpt)?;
        trials.push(result);
    }

    write_curves_csv(cfg, &trials)?;
    write_summary_csv(cfg, &trials)?;
    write_timing_csv(cfg, &trials)?;
    emit_curves(cfg, &trials)?;

    let per_trial_max: Vec<f64> = trials
        .iter()
        .map(|t| {
            t.records
                .iter()
                .map(|r| r.avg_reward)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let times: Vec<f64> = trials.iter().map(|t| t.train_time_s).collect();
    let mean_time = times.iter().sum::<f64>() / times.len() as f64;
    Ok(ExperimentSummary {
        per_trial_max_avg_reward: per_trial_max,
        per_trial_train_time_s: times,
        mean_train_time_s: mean_time,
        trials,
    })
}

/// Trailing moving average with an expanding head: element `i` averages the
/// last `window` values up to and including `i`.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "window must be >= 1");
    let mut out = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for i in 0..series.len() {
        acc += series[i];
        if i >= window {
            acc -= series[i - window];
        }
        let n = (i + 1).min(window);
        out.push(acc / n as f64);
    }
    out
}

fn write_curves_csv(cfg: &ExperimentConfig, trials: &[TrialResult]) -> Result<()> {
    let mut f = std::fs::File::create(cfg.output_dir.join("curves.csv"))?;
    writeln!(f, "trial,timestep,avg_reward,ma_reward")?;
    for t in trials {
        let series: Vec<f64> = t.records.iter().map(|r| r.avg_reward).collect();
        let ma = moving_average(&series, cfg.ma_window);
        for (r, m) in t.records.iter().zip(ma) {
            writeln!(f, "{},{},{},{}", r.trial, r.timestep, r.avg_reward, m)?;
        }
    }
    Ok(())
}

fn write_summary_csv(cfg: &ExperimentConfig, trials: &[TrialResult]) -> Result<()> {
    let mut f = std::fs::File::create(cfg.output_dir.join("summary.csv"))?;
    writeln!(f, "agent,task,trial,max_avg_reward,train_time_s")?;
    for (i, t) in trials.iter().enumerate() {
        let max = t
            .records
            .iter()
            .map(|r| r.avg_reward)
            .fold(f64::NEG_INFINITY, f64::max);
        let max = if max.is_finite() { max } else { f64::NAN };
        writeln!(
            f,
            "{},{},{},{},{}",
            cfg.agent.name(),
            cfg.task.name(),
            i,
            max,
            t.train_time_s
        )?;
    }
    Ok(())
}

fn write_timing_csv(cfg: &ExperimentConfig, trials: &[TrialResult]) -> Result<()> {
    let mut f = std::fs::File::create(cfg.output_dir.join("timing.csv"))?;
    writeln!(f, "trial,timestep,wall_clock_s")?;
    for t in trials {
        for r in &t.records {
            writeln!(f, "{},{},{}", r.trial, r.timestep, r.wall_clock_s)?;
        }
    }
    Ok(())
}

/// Cross-trial mean of the moving-averaged curves with a half-standard-
/// deviation band, written as CSV and a self-contained SVG.
pub fn emit_curves(cfg: &ExperimentConfig, trials: &[TrialResult]) -> Result<()> {
    if trials.is_empty() || trials[0].records.is_empty() {
        // Degenerate but valid: emit headers only.
        let mut f = std::fs::File::create(cfg.output_dir.join("curve_band.csv"))?;
        writeln!(f, "timestep,mean_ma_reward,band_low,band_high")?;
        return Ok(());
    }
    let grid: Vec<usize> = trials[0].records.iter().map(|r| r.timestep).collect();
    for t in trials.iter().skip(1) {
        let other: Vec<usize> = t.records.iter().map(|r| r.timestep).collect();
        if other != grid {
            return Err(Error::MisalignedTrials(format!(
                "expected timestep grid of {} points, found {}",
                grid.len(),
                other.len()
            )));
        }
    }
    let smoothed: Vec<Vec<f64>> = trials
        .iter()
        .map(|t| {
            let series: Vec<f64> = t.records.iter().map(|r| r.avg_reward).collect();
            moving_average(&series, cfg.ma_window)
        })
        .collect();
    let n = trials.len() as f64;
    let mut mean = Vec::with_capacity(grid.len());
    let mut band = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let m = smoothed.iter().map(|s| s[k]).sum::<f64>() / n;
        let var = smoothed.iter().map(|s| (s[k] - m) * (s[k] - m)).sum::<f64>() / n;
        mean.push(m);
        band.push(0.5 * var.sqrt());
    }

    let mut f = std::fs::File::create(cfg.output_dir.join("curve_band.csv"))?;
    writeln!(f, "timestep,mean_ma_reward,band_low,band_high")?;
    for k in 0..grid.len() {
        writeln!(
            f,
            "{},{},{},{}",
            grid[k],
            mean[k],
            mean[k] - band[k],
            mean[k] + band[k]
        )?;
    }

    write_svg(
        &cfg.output_dir.join("curves.svg"),
        &grid,
        &mean,
        &band,
        &format!("{} on {}", cfg.agent.name(), cfg.task.name()),
    )
}

fn write_svg(path: &Path, grid: &[usize], mean: &[f64], band: &[f64], title: &str) -> Result<()> {
    const W: f64 = 800.0;
    const H: f64 = 500.0;
    const MARGIN: f64 = 50.0;
    let x_max = *grid.last().unwrap() as f64;
    let x_min = grid[0] as f64;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for k in 0..grid.len() {
        y_min = y_min.min(mean[k] - band[k]);
        y_max = y_max.max(mean[k] + band[k]);
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_max = y_min + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x_min) / (x_max - x_min).max(1e-12) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y_min) / (y_max - y_min) * (H - 2.0 * MARGIN);

    let mut upper = String::new();
    let mut lower = String::new();
    let mut line = String::new();
    for k in 0..grid.len() {
        let x = sx(grid[k] as f64);
        upper.push_str(&format!("{:.2},{:.2} ", x, sy(mean[k] + band[k])));
        line.push_str(&format!("{:.2},{:.2} ", x, sy(mean[k])));
    }
    for k in (0..grid.len()).rev() {
        let x = sx(grid[k] as f64);
        lower.push_str(&format!("{:.2},{:.2} ", x, sy(mean[k] - band[k])));
    }

    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )?;
    writeln!(f, r#"<rect width="{W}" height="{H}" fill="white"/>"#)?;
    writeln!(
        f,
        r##"<polygon points="{upper}{lower}" fill="#4a90d9" fill-opacity="0.25" stroke="none"/>"##
    )?;
    writeln!(
        f,
        r##"<polyline points="{line}" fill="none" stroke="#1f5fa8" stroke-width="2"/>"##
    )?;
    writeln!(
        f,
        r#"<line x1="{m}" y1="{yb}" x2="{xe}" y2="{yb}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{yb}" stroke="black"/>"#,
        m = MARGIN,
        yb = H - MARGIN,
        xe = W - MARGIN
    )?;
    writeln!(
        f,
        r#"<text x="{}" y="25" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>"#,
        W / 2.0
    )?;
    writeln!(
        f,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">timestep</text>"#,
        W / 2.0,
        H - 12.0
    )?;
    writeln!(
        f,
        r#"<text x="15" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 15 {})">average reward</text>"#,
        H / 2.0,
        H / 2.0
    )?;
    for (k, label) in [(0usize, x_min), (grid.len() - 1, x_max)] {
        writeln!(
            f,
            r#"<text x="{:.2}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            sx(grid[k] as f64),
            H - MARGIN + 18.0,
            label as usize
        )?;
    }
    for y in [y_min, y_max] {
        writeln!(
            f,
            r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{:.1}</text>"#,
            MARGIN - 6.0,
            sy(y) + 4.0,
            y
        )?;
    }
    writeln!(f, "</svg>")?;
    Ok(())
}
