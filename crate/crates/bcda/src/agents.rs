//! The broad-critic deep-actor agent and the DDPG baseline behind one
//! interface: exploration, bootstrap targets, critic and actor updates, and
//! soft target-network maintenance.

use crate::actor::Mlp;
use crate::bls::BlsNet;
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::numerics::SpdFactor;
use crate::replay::{Batch, TrainingBuffer, Transition};
use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// Node-growth ablation schemes: fixed budgets of feature/enhancement nodes
/// that incremental learning may add over a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IlScheme {
    S1,
    S2,
    S3,
    S4,
}

impl IlScheme {
    /// Total (feature, enhancement) node budget.
    pub fn budget(self) -> (usize, usize) {
        match self {
            IlScheme::S1 => (0, 0),
            IlScheme::S2 => (5, 100),
            IlScheme::S3 => (5, 300),
            IlScheme::S4 => (10, 300),
        }
    }

    /// Enhancement nodes added per growth chunk (one feature node per chunk;
    /// the ratio keeps the budget exhausting evenly).
    pub fn chunk_enhancement(self) -> usize {
        let (f, e) = self.budget();
        if f == 0 {
            0
        } else {
            e / f
        }
    }
}

impl std::str::FromStr for IlScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s1" => Ok(IlScheme::S1),
            "s2" => Ok(IlScheme::S2),
            "s3" => Ok(IlScheme::S3),
            "s4" => Ok(IlScheme::S4),
            other => Err(Error::Config(format!("unknown IL scheme '{other}'"))),
        }
    }
}

/// Hyperparameters shared by both agents.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    /// Discount factor.
    pub gamma: f64,
    /// Target-network retention: `target <- rho target + (1-rho) main`.
    pub rho: f64,
    pub batch_size: usize,
    /// Steps of uniform random actions before any learning.
    pub warmup: usize,
    pub actor_lr: f64,
    /// Gradient step size for the baseline's deep critic.
    pub critic_lr: f64,
    /// Ridge regularization of the broad critic.
    pub lambda: f64,
    /// Scale applied to random enhancement weights at generation.
    pub shrinkage: f64,
    pub n_feature: usize,
    pub m_enhance: usize,
    pub il_scheme: IlScheme,
    /// Growth triggers when critic RMSE exceeds this multiple of the running
    /// standard deviation of the bootstrap targets.
    pub il_rmse_threshold: f64,
    /// Exploration noise scale as a fraction of the action half-range.
    pub noise_sigma: f64,
    pub buffer_capacity: usize,
    pub updates_per_step: usize,
    /// Accumulate the critic's normal equations across batches with
    /// exponential forgetting instead of refitting on each batch alone.
    pub rls_accumulation: bool,
    /// Forgetting factor for the accumulation mode.
    pub rls_forgetting: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.99,
            rho: 0.995,
            batch_size: 512,
            warmup: 1000,
            actor_lr: 0.005,
            critic_lr: 0.005,
            lambda: (2.0_f64).powi(-30),
            shrinkage: 0.8,
            n_feature: 10,
            m_enhance: 500,
            il_scheme: IlScheme::S1,
            il_rmse_threshold: 0.05,
            noise_sigma: 0.1,
            buffer_capacity: 100_000,
            updates_per_step: 1,
            rls_accumulation: false,
            rls_forgetting: 0.999,
        }
    }
}

impl AgentConfig {
    /// Per-agent defaults. The broad-critic agent trains its actor at the
    /// published 0.005; the baseline uses the canonical DDPG rates (actor
    /// 1e-4, critic 1e-3), which its reference formulation prescribes.
    pub fn default_for(kind: AgentKind) -> Self {
        match kind {
            AgentKind::Bcda => AgentConfig::default(),
            AgentKind::Ddpg => AgentConfig {
                actor_lr: 1e-4,
                critic_lr: 1e-3,
                ..AgentConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0,1), got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must be in [0,1], got {}", self.rho)));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return Err(Error::Config(
                "batch_size must be >= 1 and <= buffer_capacity".into(),
            ));
        }
        if self.actor_lr <= 0.0 || self.critic_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lambda <= 0.0 {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(Error::Config("shrinkage must be in (0,1]".into()));
        }
        if self.n_feature == 0 || self.m_enhance == 0 {
            return Err(Error::Config("node counts must be >= 1".into()));
        }
        if self.il_rmse_threshold < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("thresholds must be non-negative".into()));
        }
        if self.updates_per_step == 0 {
            return Err(Error::Config("updates_per_step must be >= 1".into()));
        }
        if self.rls_accumulation && self.il_scheme != IlScheme::S1 {
            return Err(Error::Config(
                "rls_accumulation is incompatible with node growth schemes".into(),
            ));
        }
        if !(0.0 < self.rls_forgetting && self.rls_forgetting <= 1.0) {
            return Err(Error::Config("rls_forgetting must be in (0,1]".into()));
        }
        Ok(())
    }
}

/// Statistics from one training update.
#[derive(Debug, Clone, Copy)]
pub struct UpdateReport {
    /// RMSE of the critic against the bootstrap targets after its update.
    pub critic_rmse: f64,
    /// Nodes added by incremental learning during this update.
    pub grew_nodes: usize,
    /// Mean squared Bellman error on the update batch.
    pub msbe: f64,
}

/// Common agent surface used by the experiment harness.
pub trait Agent: Send {
    fn select_action(&mut self, obs: &[f64], explore: bool) -> Vec<f64>;
    fn record(&mut self, transition: Transition) -> Result<()>;
    /// Runs a training update if warmup has passed and enough data is
    /// buffered; returns `None` when the update was skipped.
    fn update(&mut self) -> Result<Option<UpdateReport>>;
    fn step_count(&self) -> usize;
    fn save(&self, path: &Path) -> Result<()>;
    fn kind(&self) -> &'static str;
}

/// Names for constructing agents from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Bcda,
    Ddpg,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Bcda => "bcda",
            AgentKind::Ddpg => "ddpg",
        }
    }

    pub fn build(self, spec: &EnvSpec, cfg: AgentConfig, seed: u64) -> Result<Box<dyn Agent>> {
        Ok(match self {
            AgentKind::Bcda => Box::new(BcdaAgent::new(spec, cfg, seed)?),
            AgentKind::Ddpg => Box::new(DdpgAgent::new(spec, cfg, seed)?),
        })
    }
}

impl std::str::FromStr for AgentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bcda" => Ok(AgentKind::Bcda),
            "ddpg" => Ok(AgentKind::Ddpg),
            other => Err(Error::Config(format!("unknown agent '{other}'"))),
        }
    }
}

// Seed-stream constants so each random consumer gets an independent stream
// derived from one trial seed.
const STREAM_NET: u64 = 0x1;
const STREAM_ACTION: u64 = 0x2;
const STREAM_BUFFER: u64 = 0x3;
const STREAM_GROWTH: u64 = 0x4;

fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct ActionSpace {
    low: Vec<f64>,
    high: Vec<f64>,
}

impl ActionSpace {
    fn from_spec(spec: &EnvSpec) -> Self {
        ActionSpace {
            low: spec.action_low.clone(),
            high: spec.action_high.clone(),
        }
    }

    fn uniform(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(lo, hi)| rng.random_range(*lo..*hi))
            .collect()
    }

    fn perturb(&self, mut action: Vec<f64>, sigma_frac: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        for (i, a) in action.iter_mut().enumerate() {
            let sigma = sigma_frac * (self.high[i] - self.low[i]) / 2.0;
            if sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                *a += sigma * z;
            }
            *a = a.clamp(self.low[i], self.high[i]);
        }
        action
    }
}

fn stack_state_action(states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate![Axis(1), states.view(), actions.view()]
}

/// Running mean/variance of bootstrap targets (Welford), driving the growth
/// trigger threshold.
#[derive(Default)]
struct RunningStd {
    count: f64,
    mean: f64,
    m2: f64,
}

impl RunningStd {
    fn push_all(&mut self, values: &Array1<f64>) {
        for v in values {
            self.count += 1.0;
            let d = v - self.mean;
            self.mean += d / self.count;
            self.m2 += d * (v - self.mean);
        }
    }

    fn std(&self) -> f64 {
        if self.count < 2.0 {
            0.0
        } else {
            (self.m2 / self.count).sqrt()
        }
    }
}

// Accumulated normal equations for the recursive critic-fit mode.
struct RlsState {
    gram: Array2<f64>,
    rhs: Array2<f64>,
}

/// Broad-critic deep-actor agent.
pub struct BcdaAgent {
    bcn: BlsNet,
    t_bcn: BlsNet,
    dan: Mlp,
    t_dan: Mlp,
    buffer: TrainingBuffer,
    cfg: AgentConfig,
    space: ActionSpace,
    action_rng: ChaCha8Rng,
    growth_rng: ChaCha8Rng,
    step_count: usize,
    feature_budget: usize,
    enhance_budget: usize,
    target_std: RunningStd,
    rls: Option<RlsState>,
    config_echo: String,
}

impl BcdaAgent {
    pub fn new(spec: &EnvSpec, cfg: AgentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut net_rng = derive_rng(seed, STREAM_NET);
        let q_input = spec.obs_dim + spec.action_dim;
        let bcn = BlsNet::init(
            q_input,
            1,
            cfg.n_feature,
            cfg.m_enhance,
            cfg.shrinkage,
            cfg.lambda,
            &mut net_rng,
        )?;
        let t_bcn = bcn.clone_untrained_cache();
        let bounds: Vec<f64> = spec
            .action_low
            .iter()
            .zip(&spec.action_high)
            .map(|(lo, hi)| ((hi - lo) / 2.0).abs())
            .collect();
        let dan = Mlp::actor(spec.obs_dim, spec.action_dim, &bounds, &mut net_rng)?;
        let t_dan = dan.clone_for_target();
        let buffer = TrainingBuffer::new(
            cfg.buffer_capacity,
            spec.obs_dim,
            spec.action_dim,
            derive_rng(seed, STREAM_BUFFER),
        )?;
        let (feature_budget, enhance_budget) = cfg.il_scheme.budget();
        let config_echo = toml::to_string(&cfg).unwrap_or_default();
        Ok(BcdaAgent {
            bcn,
            t_bcn,
            dan,
            t_dan,
            buffer,
            space: ActionSpace::from_spec(spec),
            action_rng: derive_rng(seed, STREAM_ACTION),
            growth_rng: derive_rng(seed, STREAM_GROWTH),
            step_count: 0,
            feature_budget,
            enhance_budget,
            target_std: RunningStd::default(),
            rls: None,
            cfg,
            config_echo,
        })
    }

    pub fn critic(&self) -> &BlsNet {
        &self.bcn
    }
    pub fn target_critic(&self) -> &BlsNet {
        &self.t_bcn
    }
    pub fn policy(&self) -> &Mlp {
        &self.dan
    }
    pub fn target_policy(&self) -> &Mlp {
        &self.t_dan
    }
    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }
    pub fn remaining_budget(&self) -> (usize, usize) {
        (self.feature_budget, self.enhance_budget)
    }

    /// Bootstrap targets `y = r + gamma (1 - d) Q'(s', mu'(s'))`, with the
    /// target networks supplying both the lookahead action and its value.
    pub fn compute_targets(&self, batch: &Batch) -> Result<Array1<f64>> {
        let next_actions = self.t_dan.forward(&batch.next_states.view())?;
        let next_q_input = stack_state_action(&batch.next_states, &next_actions);
        let next_q = self.t_bcn.forward(&next_q_input.view())?;
        let mut targets = Array1::zeros(batch.len());
        for i in 0..batch.len() {
            targets[i] =
                batch.rewards[i] + self.cfg.gamma * (1.0 - batch.dones[i]) * next_q[[i, 0]];
        }
        Ok(targets)
    }

    /// Mean squared Bellman error of the current critic on a batch, with
    /// targets recomputed from the current target networks.
    pub fn msbe(&self, batch: &Batch) -> Result<f64> {
        let targets = self.compute_targets(batch)?;
        let q_input = stack_state_action(&batch.states, &batch.actions);
        let q = self.bcn.forward(&q_input.view())?;
        let mse = targets
            .iter()
            .enumerate()
            .map(|(i, y)| {
                let d = q[[i, 0]] - y;
                d * d
            })
            .sum::<f64>()
            / batch.len().max(1) as f64;
        Ok(mse)
    }

    fn fit_critic(&mut self, x: &Array2<f64>, y_col: &Array2<f64>) -> Result<f64> {
        if self.cfg.rls_accumulation {
            let a = self.bcn.build_design_matrix(&x.view())?;
            let p = a.ncols();
            let f = self.cfg.rls_forgetting;
            let state = match &mut self.rls {
                Some(state) if state.gram.nrows() == p => state,
                _ => {
                    self.rls = Some(RlsState {
                        gram: Array2::zeros((p, p)),
                        rhs: Array2::zeros((p, 1)),
                    });
                    self.rls.as_mut().unwrap()
                }
            };
            state.gram.mapv_inplace(|v| v * f);
            state.gram.scaled_add(1.0, &a.t().dot(&a));
            state.rhs.mapv_inplace(|v| v * f);
            state.rhs.scaled_add(1.0, &a.t().dot(y_col));
            let mut g = state.gram.clone();
            for i in 0..p {
                g[[i, i]] += self.cfg.lambda;
            }
            let w = SpdFactor::new(g)?.solve(&state.rhs.view())?;
            self.bcn.set_output_weights(w)?;
            let pred = a.dot(self.bcn.output_weights());
            let mse = pred
                .iter()
                .zip(y_col.iter())
                .map(|(p, y)| (p - y) * (p - y))
                .sum::<f64>()
                / y_col.len() as f64;
            Ok(mse.sqrt())
        } else {
            Ok(self.bcn.fit_output_weights(&x.view(), &y_col.view())?.rmse)
        }
    }

    // One growth chunk: a feature node (when budgeted) plus the scheme's
    // enhancement share, wired to all features through a follow-up
    // enhancement append. Returns nodes added.
    fn grow_chunk(&mut self, x: &Array2<f64>, y_col: &Array2<f64>) -> Result<(usize, f64)> {
        let mut added = 0;
        let mut rmse = f64::NAN;
        if self.feature_budget > 0 {
            let report =
                self.bcn
                    .add_feature_nodes_with(1, 0, &x.view(), &y_col.view(), &mut self.growth_rng)?;
            self.feature_budget -= 1;
            added += 1;
            rmse = report.rmse;
        }
        let chunk = self.cfg.il_scheme.chunk_enhancement().min(self.enhance_budget);
        if chunk > 0 {
            let report =
                self.bcn
                    .add_enhancement_nodes(chunk, &x.view(), &y_col.view(), &mut self.growth_rng)?;
            self.enhance_budget -= chunk;
            added += chunk;
            rmse = report.rmse;
        }
        Ok((added, rmse))
    }

    fn update_once(&mut self) -> Result<UpdateReport> {
        let batch = self.buffer.sample(self.cfg.batch_size)?;
        let targets = self.compute_targets(&batch)?;
        self.buffer.cache_targets(&batch.indices, &targets);
        self.target_std.push_all(&targets);

        let x = stack_state_action(&batch.states, &batch.actions);
        let y_col = targets.view().insert_axis(Axis(1)).to_owned();
        let mut critic_rmse = self.fit_critic(&x, &y_col)?;

        // Incremental learning: widen while accuracy is unsatisfactory and
        // the scheme budget lasts.
        let mut grew_nodes = 0;
        let threshold = self.cfg.il_rmse_threshold * self.target_std.std();
        let prev_nodes = (self.bcn.n_feature(), self.bcn.m_enhance());
        while critic_rmse > threshold && (self.feature_budget > 0 || self.enhance_budget > 0) {
            let (added, rmse) = self.grow_chunk(&x, &y_col)?;
            if added == 0 {
                break;
            }
            grew_nodes += added;
            critic_rmse = rmse;
        }
        if grew_nodes > 0 {
            self.t_bcn
                .sync_growth_from(&self.bcn, prev_nodes.0, prev_nodes.1)?;
        }

        // Deterministic policy gradient through the broad critic.
        let policy_actions = self.dan.forward(&batch.states.view())?;
        let q_input = stack_state_action(&batch.states, &policy_actions);
        let input_grads = self.bcn.input_gradient_rows(&q_input.view())?;
        let obs_dim = batch.states.ncols();
        let dq_da = input_grads.slice(s![.., obs_dim..]).to_owned();
        let grads = self.dan.backward_chain(&batch.states.view(), &dq_da.view())?;
        self.dan.adam_step(&grads, self.cfg.actor_lr)?;

        // Soft target updates.
        self.t_bcn.polyak_output_weights(&self.bcn, self.cfg.rho)?;
        self.t_dan.polyak_from(&self.dan, self.cfg.rho)?;

        let q_now = self.bcn.forward(&x.view())?;
        let msbe = targets
            .iter()
            .enumerate()
            .map(|(i, y)| {
                let d = q_now[[i, 0]] - y;
                d * d
            })
            .sum::<f64>()
            / batch.len() as f64;

        Ok(UpdateReport {
            critic_rmse,
            grew_nodes,
            msbe,
        })
    }
}

impl Agent for BcdaAgent {
    fn select_action(&mut self, obs: &[f64], explore: bool) -> Vec<f64> {
        select_action_common(
            &self.dan,
            &self.space,
            &self.cfg,
            self.step_count,
            obs,
            explore,
            &mut self.action_rng,
        )
    }

    fn record(&mut self, transition: Transition) -> Result<()> {
        self.buffer.push(transition)?;
        self.step_count += 1;
        Ok(())
    }

    fn update(&mut self) -> Result<Option<UpdateReport>> {
        if self.step_count <= self.cfg.warmup || self.buffer.len() <= self.cfg.batch_size {
            return Ok(None);
        }
        let mut report = None;
        for _ in 0..self.cfg.updates_per_step {
            report = Some(self.update_once()?);
        }
        Ok(report)
    }

    fn step_count(&self) -> usize {
        self.step_count
    }

    fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        crate::io::write_magic(&mut file, b"BCDA")?;
        crate::io::write_u64(&mut file, 1)?;
        crate::io::write_string(&mut file, &self.config_echo)?;
        crate::io::write_u64(&mut file, self.step_count as u64)?;
        self.bcn.write_to(&mut file)?;
        self.t_bcn.write_to(&mut file)?;
        self.dan.write_to(&mut file)?;
        self.t_dan.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    fn kind(&self) -> &'static str {
        "bcda"
    }
}

/// Deep deterministic policy gradient baseline: both critic and actor are
/// feedforward networks trained by gradient descent.
pub struct DdpgAgent {
    critic: Mlp,
    t_critic: Mlp,
    actor: Mlp,
    t_actor: Mlp,
    buffer: TrainingBuffer,
    cfg: AgentConfig,
    space: ActionSpace,
    action_rng: ChaCha8Rng,
    step_count: usize,
    config_echo: String,
}

impl DdpgAgent {
    pub fn new(spec: &EnvSpec, cfg: AgentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut net_rng = derive_rng(seed, STREAM_NET);
        let q_input = spec.obs_dim + spec.action_dim;
        let critic = Mlp::scalar_critic(q_input, &mut net_rng)?;
        let t_critic = critic.clone_for_target();
        let bounds: Vec<f64> = spec
            .action_low
            .iter()
            .zip(&spec.action_high)
            .map(|(lo, hi)| ((hi - lo) / 2.0).abs())
            .collect();
        let actor = Mlp::actor(spec.obs_dim, spec.action_dim, &bounds, &mut net_rng)?;
        let t_actor = actor.clone_for_target();
        let buffer = TrainingBuffer::new(
            cfg.buffer_capacity,
            spec.obs_dim,
            spec.action_dim,
            derive_rng(seed, STREAM_BUFFER),
        )?;
        let config_echo = toml::to_string(&cfg).unwrap_or_default();
        Ok(DdpgAgent {
            critic,
            t_critic,
            actor,
            t_actor,
            buffer,
            space: ActionSpace::from_spec(spec),
            action_rng: derive_rng(seed, STREAM_ACTION),
            step_count: 0,
            cfg,
            config_echo,
        })
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }
    pub fn policy(&self) -> &Mlp {
        &self.actor
    }
    pub fn target_policy(&self) -> &Mlp {
        &self.t_actor
    }

    pub fn compute_targets(&self, batch: &Batch) -> Result<Array1<f64>> {
        let next_actions = self.t_actor.forward(&batch.next_states.view())?;
        let next_q_input = stack_state_action(&batch.next_states, &next_actions);
        let next_q = self.t_critic.forward(&next_q_input.view())?;
        let mut targets = Array1::zeros(batch.len());
        for i in 0..batch.len() {
            targets[i] =
                batch.rewards[i] + self.cfg.gamma * (1.0 - batch.dones[i]) * next_q[[i, 0]];
        }
        Ok(targets)
    }

    fn update_once(&mut self) -> Result<UpdateReport> {
        let batch = self.buffer.sample(self.cfg.batch_size)?;
        let targets = self.compute_targets(&batch)?;
        self.buffer.cache_targets(&batch.indices, &targets);
        let n = batch.len() as f64;

        // Critic: one gradient step on the mean squared Bellman error.
        let q_input = stack_state_action(&batch.states, &batch.actions);
        let q = self.critic.forward(&q_input.view())?;
        let mut upstream = Array2::zeros((batch.len(), 1));
        let mut msbe = 0.0;
        for i in 0..batch.len() {
            let diff = q[[i, 0]] - targets[i];
            msbe += diff * diff;
            upstream[[i, 0]] = 2.0 * diff / n;
        }
        msbe /= n;
        let (critic_grads, _) = self.critic.backward(&q_input.view(), &upstream.view())?;
        self.critic.adam_step(&critic_grads, self.cfg.critic_lr)?;

        // Actor: ascend the critic through its action input.
        let policy_actions = self.actor.forward(&batch.states.view())?;
        let policy_q_input = stack_state_action(&batch.states, &policy_actions);
        let ones = Array2::ones((batch.len(), 1));
        let (_, input_grads) = self.critic.backward(&policy_q_input.view(), &ones.view())?;
        let obs_dim = batch.states.ncols();
        let dq_da = input_grads.slice(s![.., obs_dim..]).to_owned();
        let grads = self.actor.backward_chain(&batch.states.view(), &dq_da.view())?;
        self.actor.adam_step(&grads, self.cfg.actor_lr)?;

        self.t_critic.polyak_from(&self.critic, self.cfg.rho)?;
        self.t_actor.polyak_from(&self.actor, self.cfg.rho)?;

        Ok(UpdateReport {
            critic_rmse: msbe.sqrt(),
            grew_nodes: 0,
            msbe,
        })
    }
}

impl Agent for DdpgAgent {
    fn select_action(&mut self, obs: &[f64], explore: bool) -> Vec<f64> {
        select_action_common(
            &self.actor,
            &self.space,
            &self.cfg,
            self.step_count,
            obs,
            explore,
            &mut self.action_rng,
        )
    }

    fn record(&mut self, transition: Transition) -> Result<()> {
        self.buffer.push(transition)?;
        self.step_count += 1;
        Ok(())
    }

    fn update(&mut self) -> Result<Option<UpdateReport>> {
        if self.step_count <= self.cfg.warmup || self.buffer.len() <= self.cfg.batch_size {
            return Ok(None);
        }
        let mut report = None;
        for _ in 0..self.cfg.updates_per_step {
            report = Some(self.update_once()?);
        }
        Ok(report)
    }

    fn step_count(&self) -> usize {
        self.step_count
    }

    fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        crate::io::write_magic(&mut file, b"DDPG")?;
        crate::io::write_u64(&mut file, 1)?;
        crate::io::write_string(&mut file, &self.config_echo)?;
        crate::io::write_u64(&mut file, self.step_count as u64)?;
        self.critic.write_to(&mut file)?;
        self.t_critic.write_to(&mut file)?;
        self.actor.write_to(&mut file)?;
        self.t_actor.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    fn kind(&self) -> &'static str {
        "ddpg"
    }
}

fn select_action_common(
    policy: &Mlp,
    space: &ActionSpace,
    cfg: &AgentConfig,
    step_count: usize,
    obs: &[f64],
    explore: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    if explore && step_count <= cfg.warmup {
        return space.uniform(rng);
    }
    let obs = Array1::from_vec(obs.to_vec());
    let action = policy
        .forward_one(&obs.view())
        .map(|a| a.to_vec())
        .unwrap_or_else(|_| vec![0.0; space.low.len()]);
    if explore {
        space.perturb(action, cfg.noise_sigma, rng)
    } else {
        action
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Environment, InvertedPendulum, Reacher, Task};

    fn small_cfg() -> AgentConfig {
        AgentConfig {
            batch_size: 16,
            warmup: 20,
            n_feature: 4,
            m_enhance: 12,
            buffer_capacity: 1000,
            ..AgentConfig::default()
        }
    }

    fn fill_buffer(agent: &mut dyn Agent, env: &mut dyn Environment, steps: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut obs = env.reset(&mut rng);
        for _ in 0..steps {
            let action = agent.select_action(&obs, true);
            let step = env.step(&action);
            agent
                .record(Transition {
                    state: obs.clone(),
                    action,
                    reward: step.reward,
                    next_state: step.next_obs.clone(),
                    done: step.terminated,
                    target: None,
                })
                .unwrap();
            obs = if step.terminated || step.truncated {
                env.reset(&mut rng)
            } else {
                step.next_obs
            };
        }
    }

    #[test]
    fn no_update_during_warmup_or_small_buffer() {
        let mut env = InvertedPendulum::new();
        let mut agent = BcdaAgent::new(&env.spec(), small_cfg(), 7).unwrap();
        assert!(agent.update().unwrap().is_none());
        fill_buffer(&mut agent, &mut env, 10, 1);
        assert!(agent.update().unwrap().is_none(), "warmup not yet passed");
        fill_buffer(&mut agent, &mut env, 15, 2);
        assert!(agent.update().unwrap().is_some());
    }

    #[test]
    fn warmup_actions_are_uniform_within_bounds() {
        let env = Reacher::new();
        let mut agent = BcdaAgent::new(&env.spec(), small_cfg(), 3).unwrap();
        let obs = vec![0.0; 8];
        let mut sum = [0.0f64; 2];
        let n = 4000;
        for _ in 0..n {
            let a = agent.select_action(&obs, true);
            assert!(a.iter().all(|v| v.abs() <= 1.0));
            sum[0] += a[0];
            sum[1] += a[1];
        }
        // Mean of U(-1,1) over 4000 draws: std err ~ 0.0091, so |mean| < 0.05
        // is a ~5.5 sigma bound.
        assert!((sum[0] / n as f64).abs() < 0.05);
        assert!((sum[1] / n as f64).abs() < 0.05);
    }

    #[test]
    fn zero_noise_matches_deterministic_policy_after_warmup() {
        let env = InvertedPendulum::new();
        let mut cfg = small_cfg();
        cfg.noise_sigma = 0.0;
        cfg.warmup = 0;
        let mut agent = BcdaAgent::new(&env.spec(), cfg, 5).unwrap();
        // advance past warmup
        agent.step_count = 1;
        let obs = vec![0.01, -0.02, 0.0, 0.03];
        let explored = agent.select_action(&obs, true);
        let pure = agent.select_action(&obs, false);
        assert_eq!(explored, pure);
    }

    #[test]
    fn terminal_targets_equal_reward() {
        let env = InvertedPendulum::new();
        let mut agent = BcdaAgent::new(&env.spec(), small_cfg(), 11).unwrap();
        let batch = Batch {
            states: Array2::zeros((2, 4)),
            actions: Array2::from_shape_fn((2, 1), |_| 0.5),
            rewards: Array1::from_vec(vec![1.0, -2.5]),
            next_states: Array2::from_shape_fn((2, 4), |_| 0.2),
            dones: Array1::from_vec(vec![1.0, 1.0]),
            indices: vec![0, 1],
        };
        // Give the target critic non-zero weights so a bootstrap would show.
        let mut w = agent.t_bcn.output_weights().clone();
        w.fill(3.0);
        agent.t_bcn.set_output_weights(w).unwrap();
        let y = agent.compute_targets(&batch).unwrap();
        assert_eq!(y[0], 1.0);
        assert_eq!(y[1], -2.5);
    }

    #[test]
    fn gamma_zero_targets_equal_rewards() {
        let env = InvertedPendulum::new();
        let mut cfg = small_cfg();
        cfg.gamma = 0.0;
        let mut agent = BcdaAgent::new(&env.spec(), cfg, 11).unwrap();
        let mut w = agent.t_bcn.output_weights().clone();
        w.fill(3.0);
        agent.t_bcn.set_output_weights(w).unwrap();
        let batch = Batch {
            states: Array2::zeros((3, 4)),
            actions: Array2::zeros((3, 1)),
            rewards: Array1::from_vec(vec![0.5, 1.5, -1.0]),
            next_states: Array2::from_shape_fn((3, 4), |_| 0.1),
            dones: Array1::zeros(3),
            indices: vec![0, 1, 2],
        };
        let y = agent.compute_targets(&batch).unwrap();
        for i in 0..3 {
            assert_eq!(y[i], batch.rewards[i]);
        }
    }

    #[test]
    fn hand_built_lookahead_matches_manual_computation() {
        let env = InvertedPendulum::new();
        let mut agent = BcdaAgent::new(&env.spec(), small_cfg(), 13).unwrap();
        // Train target nets a little so they are non-trivial but fixed.
        let mut w = agent.t_bcn.output_weights().clone();
        for (i, v) in w.iter_mut().enumerate() {
            *v = 0.01 * (i as f64 + 1.0);
        }
        agent.t_bcn.set_output_weights(w).unwrap();
        let batch = Batch {
            states: Array2::from_shape_fn((2, 4), |(i, j)| 0.1 * (i + j) as f64),
            actions: Array2::from_shape_fn((2, 1), |_| 0.3),
            rewards: Array1::from_vec(vec![1.0, 2.0]),
            next_states: Array2::from_shape_fn((2, 4), |(i, j)| 0.05 * (i * 4 + j) as f64),
            dones: Array1::from_vec(vec![0.0, 1.0]),
            indices: vec![0, 1],
        };
        let y = agent.compute_targets(&batch).unwrap();
        // Manual: a' = t_dan(s'); q' = t_bcn([s'|a']); y = r + 0.99 (1-d) q'.
        let a_next = agent.t_dan.forward(&batch.next_states.view()).unwrap();
        let q_in = stack_state_action(&batch.next_states, &a_next);
        let q_next = agent.t_bcn.forward(&q_in.view()).unwrap();
        assert!((y[0] - (1.0 + 0.99 * q_next[[0, 0]])).abs() < 1e-12);
        assert_eq!(y[1], 2.0);
    }

    #[test]
    fn msbe_zero_when_critic_matches_targets() {
        let env = InvertedPendulum::new();
        let mut agent = BcdaAgent::new(&env.spec(), small_cfg(), 17).unwrap();
        let batch = Batch {
            states: Array2::from_shape_fn((4, 4), |(i, j)| 0.1 * (i as f64) - 0.05 * j as f64),
            actions: Array2::from_shape_fn((4, 1), |(i, _)| 0.2 * i as f64),
            rewards: Array1::zeros(4),
            next_states: Array2::zeros((4, 4)),
            dones: Array1::from_vec(vec![1.0; 4]),
            indices: vec![0, 1, 2, 3],
        };
        // Targets are exactly r = 0 (terminal); critic with zero weights
        // outputs exactly 0 everywhere.
        assert_eq!(agent.msbe(&batch).unwrap(), 0.0);
        // A constant offset c in the critic shifts msbe to c^2: rig the
        // critic so Q = c via the output bias path is unavailable, so use
        // targets r = c instead.
        let batch_offset = Batch {
            rewards: Array1::from_vec(vec![3.0; 4]),
            ..batch
        };
        let m = agent.msbe(&batch_offset).unwrap();
        assert!((m - 9.0).abs() < 1e-12);
    }

    #[test]
    fn msbe_matches_scalar_loop_oracle() {
        let mut env = InvertedPendulum::new();
        let mut agent = BcdaAgent::new(&env.spec(), small_cfg(), 19).unwrap();
        fill_buffer(&mut agent, &mut env, 40, 3);
        agent.update().unwrap().unwrap();
        let batch = agent.buffer.sample(16).unwrap();
        let msbe = agent.msbe(&batch).unwrap();
        // Oracle: evaluate each row independently.
        let targets = agent.compute_targets(&batch).unwrap();
        let mut acc = 0.0;
        for i in 0..batch.len() {
            let x = stack_state_action(
                &batch.states.slice(s![i..i + 1, ..]).to_owned(),
                &batch.actions.slice(s![i..i + 1, ..]).to_owned(),
            );
            let q = agent.bcn.forward(&x.view()).unwrap()[[0, 0]];
            acc += (q - targets[i]) * (q - targets[i]);
        }
        assert!((msbe - acc / 16.0).abs() < 1e-12);
    }

    #[test]
    fn scheme_one_never_grows() {
        let mut env = InvertedPendulum::new();
        let mut agent = BcdaAgent::new(&env.spec(), small_cfg(), 23).unwrap();
        fill_buffer(&mut agent, &mut env, 60, 5);
        for _ in 0..5 {
            let report = agent.update().unwrap().unwrap();
            assert_eq!(report.grew_nodes, 0);
        }
        assert_eq!(agent.bcn.n_feature(), 4);
    }

    #[test]
    fn scheme_budgets_are_respected_and_nets_stay_synchronized() {
        let mut env = InvertedPendulum::new();
        let mut cfg = small_cfg();
        cfg.il_scheme = IlScheme::S2;
        // Force growth every update.
        cfg.il_rmse_threshold = 0.0;
        let mut agent = BcdaAgent::new(&env.spec(), cfg, 29).unwrap();
        fill_buffer(&mut agent, &mut env, 60, 7);
        let mut total_grown = 0;
        for _ in 0..12 {
            if let Some(report) = agent.update().unwrap() {
                total_grown += report.grew_nodes;
            }
        }
        let (f_budget, e_budget) = IlScheme::S2.budget();
        assert_eq!(total_grown, f_budget + e_budget);
        assert_eq!(agent.bcn.n_feature(), 4 + f_budget);
        assert_eq!(agent.bcn.m_enhance(), 12 + e_budget);
        assert_eq!(agent.remaining_budget(), (0, 0));
        // Hidden-weight synchrony after growth.
        assert_eq!(
            agent.bcn.enhancement_weights().0,
            agent.t_bcn.enhancement_weights().0
        );
        assert_eq!(agent.bcn.feature_weights().0, agent.t_bcn.feature_weights().0);
        assert_eq!(
            agent.bcn.output_weights().nrows(),
            agent.t_bcn.output_weights().nrows()
        );
        // Threshold zero means growth stops only on budget exhaustion.
        let report = agent.update().unwrap().unwrap();
        assert_eq!(report.grew_nodes, 0);
    }

    #[test]
    fn polyak_contract_after_update() {
        let mut env = InvertedPendulum::new();
        let mut agent = BcdaAgent::new(&env.spec(), small_cfg(), 31).unwrap();
        fill_buffer(&mut agent, &mut env, 40, 9);
        let t_before = agent.t_dan.parameters().0[0].clone();
        agent.update().unwrap().unwrap();
        let main_after = agent.dan.parameters().0[0].clone();
        let t_after = agent.t_dan.parameters().0[0].clone();
        let rho = agent.cfg.rho;
        let expect = t_before.mapv(|v| v * rho) + main_after.mapv(|v| v * (1.0 - rho));
        let diff = &t_after - &expect;
        assert!(diff.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn full_update_is_seed_deterministic() {
        let run = |seed: u64| {
            let mut env = InvertedPendulum::new();
            let mut agent = BcdaAgent::new(&env.spec(), small_cfg(), seed).unwrap();
            fill_buffer(&mut agent, &mut env, 50, seed);
            let mut rmses = Vec::new();
            for _ in 0..4 {
                rmses.push(agent.update().unwrap().unwrap().critic_rmse);
            }
            (rmses, agent.bcn.output_weights().clone())
        };
        assert_eq!(run(41), run(41));
    }

    #[test]
    fn rls_mode_requires_scheme_one() {
        let env = InvertedPendulum::new();
        let mut cfg = small_cfg();
        cfg.rls_accumulation = true;
        cfg.il_scheme = IlScheme::S3;
        assert!(BcdaAgent::new(&env.spec(), cfg, 1).is_err());
    }

    #[test]
    fn rls_mode_updates_run() {
        let mut env = InvertedPendulum::new();
        let mut cfg = small_cfg();
        cfg.rls_accumulation = true;
        let mut agent = BcdaAgent::new(&env.spec(), cfg, 43).unwrap();
        fill_buffer(&mut agent, &mut env, 60, 11);
        let r1 = agent.update().unwrap().unwrap();
        let r2 = agent.update().unwrap().unwrap();
        assert!(r1.critic_rmse.is_finite() && r2.critic_rmse.is_finite());
    }

    #[test]
    fn ddpg_zero_bellman_gap_leaves_critic_params() {
        let env = InvertedPendulum::new();
        let mut cfg = small_cfg();
        cfg.gamma = 0.0;
        let mut agent = DdpgAgent::new(&env.spec(), cfg, 47).unwrap();
        // All-zero rewards, gamma 0, terminal: targets 0. Critic initialized
        // randomly does not output 0, so run the real check differently: a
        // batch whose targets equal the critic's own outputs gives zero
        // gradient and Adam must not move any parameter.
        let states = Array2::from_shape_fn((6, 4), |(i, j)| 0.05 * (i + j) as f64);
        let actions = Array2::from_shape_fn((6, 1), |(i, _)| 0.1 * i as f64);
        let q_input = stack_state_action(&states, &actions);
        let q = agent.critic.forward(&q_input.view()).unwrap();
        for i in 0..6 {
            agent
                .buffer
                .push(Transition {
                    state: states.row(i).to_vec(),
                    action: actions.row(i).to_vec(),
                    reward: q[[i, 0]],
                    next_state: vec![0.0; 4],
                    done: true,
                    target: None,
                })
                .unwrap();
        }
        agent.step_count = agent.cfg.warmup + 1;
        let before = agent.critic.parameters().0[0].clone();
        // batch_size 16 > 6 entries: pad by repeating pushes
        for _ in 0..3 {
            for i in 0..6 {
                agent
                    .buffer
                    .push(Transition {
                        state: states.row(i).to_vec(),
                        action: actions.row(i).to_vec(),
                        reward: q[[i, 0]],
                        next_state: vec![0.0; 4],
                        done: true,
                        target: None,
                    })
                    .unwrap();
            }
        }
        agent.update().unwrap().unwrap();
        let after = agent.critic.parameters().0[0].clone();
        let max_move = (&after - &before)
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(max_move < 1e-12, "critic moved by {max_move}");
    }

    #[test]
    fn ddpg_targets_follow_polyak_contract() {
        let mut env = InvertedPendulum::new();
        let mut agent = DdpgAgent::new(&env.spec(), small_cfg(), 53).unwrap();
        fill_buffer(&mut agent, &mut env, 40, 13);
        let tc_before = agent.t_critic.parameters().0[1].clone();
        let ta_before = agent.t_actor.parameters().0[1].clone();
        agent.update().unwrap().unwrap();
        let rho = agent.cfg.rho;
        let tc_expect = tc_before.mapv(|v| v * rho)
            + agent.critic.parameters().0[1].mapv(|v| v * (1.0 - rho));
        let ta_expect = ta_before.mapv(|v| v * rho)
            + agent.actor.parameters().0[1].mapv(|v| v * (1.0 - rho));
        assert!((&agent.t_critic.parameters().0[1] - &tc_expect)
            .iter()
            .all(|v| v.abs() < 1e-12));
        assert!((&agent.t_actor.parameters().0[1] - &ta_expect)
            .iter()
            .all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn agents_build_from_kind_for_both_tasks() {
        for task in [Task::Invpen, Task::Reacher] {
            let spec = task.build().spec();
            for kind in [AgentKind::Bcda, AgentKind::Ddpg] {
                let agent = kind.build(&spec, small_cfg(), 3).unwrap();
                assert_eq!(agent.step_count(), 0);
            }
        }
    }
}
