//! Deterministic in-house physics for the two benchmark control tasks,
//! behind one environment interface.
//!
//! Both integrators are semi-implicit Euler with dt = 0.02 s: velocities are
//! advanced first and positions follow with the updated velocities, which
//! keeps long force-free rollouts energy-stable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

const DT: f64 = 0.02;

/// Static description of an environment's observation and action spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_episode_steps: usize,
}

/// One transition out of `step`. Only `terminated` marks a true terminal
/// state; `truncated` is a time limit and must not stop bootstrapping.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub next_obs: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

/// Common surface for the control tasks.
pub trait Environment: Send {
    fn spec(&self) -> EnvSpec;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> StepResult;
}

/// Names for constructing environments from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Invpen,
    Reacher,
}

impl Task {
    pub fn build(self) -> Box<dyn Environment> {
        match self {
            Task::Invpen => Box::new(InvertedPendulum::new()),
            Task::Reacher => Box::new(Reacher::new()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Invpen => "invpen",
            Task::Reacher => "reacher",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "invpen" => Ok(Task::Invpen),
            "reacher" => Ok(Task::Reacher),
            other => Err(crate::Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

/// Cart-pole balance task: keep the pole upright by pushing the cart.
///
/// State is (cart position x, pole angle theta, cart velocity, pole angular
/// velocity); the observation lists them in that order. Reward is +1 per
/// executed step; the episode fails when |theta| > 0.2 rad or |x| > 2.4 m
/// and is truncated at 1000 steps.
pub struct InvertedPendulum {
    state: [f64; 4],
    steps: usize,
}

const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const POLE_HALF_LENGTH: f64 = 0.5;
const GRAVITY: f64 = 9.8;
const FORCE_LIMIT: f64 = 3.0;
const ANGLE_LIMIT: f64 = 0.2;
const TRACK_LIMIT: f64 = 2.4;
const INVPEN_HORIZON: usize = 1000;

impl InvertedPendulum {
    pub fn new() -> Self {
        InvertedPendulum {
            state: [0.0; 4],
            steps: 0,
        }
    }

    pub fn state(&self) -> [f64; 4] {
        self.state
    }

    /// Places the system in an exact state; test hook for fixed-point and
    /// energy checks.
    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
        self.steps = 0;
    }

    /// Total mechanical energy of the cart-pole (pole modelled as a uniform
    /// rod of half-length l), used by the integrator drift check.
    pub fn mechanical_energy(&self) -> f64 {
        let [_, th, xd, thd] = self.state;
        let kinetic = 0.5 * (CART_MASS + POLE_MASS) * xd * xd
            + POLE_MASS * POLE_HALF_LENGTH * xd * thd * th.cos()
            + (2.0 / 3.0) * POLE_MASS * POLE_HALF_LENGTH * POLE_HALF_LENGTH * thd * thd;
        let potential = POLE_MASS * GRAVITY * POLE_HALF_LENGTH * th.cos();
        kinetic + potential
    }
}

impl Default for InvertedPendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for InvertedPendulum {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            obs_dim: 4,
            action_dim: 1,
            action_low: vec![-FORCE_LIMIT],
            action_high: vec![FORCE_LIMIT],
            max_episode_steps: INVPEN_HORIZON,
        }
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        for v in &mut self.state {
            *v = rng.random_range(-0.01..0.01);
        }
        self.steps = 0;
        self.state.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        let force = action.first().copied().unwrap_or(0.0).clamp(-FORCE_LIMIT, FORCE_LIMIT);
        let [mut x, mut th, mut xd, mut thd] = self.state;
        let (sin, cos) = th.sin_cos();
        let total_mass = CART_MASS + POLE_MASS;
        let u = (force + POLE_MASS * POLE_HALF_LENGTH * thd * thd * sin) / total_mass;
        let th_acc = (GRAVITY * sin - u * cos)
            / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total_mass));
        let x_acc = u - POLE_MASS * POLE_HALF_LENGTH * th_acc * cos / total_mass;
        thd += th_acc * DT;
        xd += x_acc * DT;
        th += thd * DT;
        x += xd * DT;
        self.state = [x, th, xd, thd];
        self.steps += 1;
        StepResult {
            next_obs: self.state.to_vec(),
            reward: 1.0,
            terminated: th.abs() > ANGLE_LIMIT || x.abs() > TRACK_LIMIT,
            truncated: self.steps >= INVPEN_HORIZON,
        }
    }
}

/// Two-link planar reaching task: drive the fingertip to a random target.
///
/// Joints follow decoupled damped dynamics `theta_dd = (tau - b
/// theta_d) / I`; the reward is the negative fingertip-to-target distance
/// minus a control cost, so it is never positive. Episodes always run
/// exactly 50 steps.
pub struct Reacher {
    angles: [f64; 2],
    velocities: [f64; 2],
    target: [f64; 2],
    steps: usize,
}

const LINK_LENGTH: f64 = 0.1;
const JOINT_INERTIA: f64 = 0.01;
const JOINT_DAMPING: f64 = 0.01;
const TORQUE_LIMIT: f64 = 1.0;
const CONTROL_COST: f64 = 0.1;
const TARGET_RADIUS_MIN: f64 = 0.05;
const TARGET_RADIUS_MAX: f64 = 0.19;
const REACHER_HORIZON: usize = 50;

impl Reacher {
    pub fn new() -> Self {
        Reacher {
            angles: [0.0; 2],
            velocities: [0.0; 2],
            target: [0.1, 0.0],
            steps: 0,
        }
    }

    pub fn fingertip(&self) -> [f64; 2] {
        let [t1, t2] = self.angles;
        [
            LINK_LENGTH * t1.cos() + LINK_LENGTH * (t1 + t2).cos(),
            LINK_LENGTH * t1.sin() + LINK_LENGTH * (t1 + t2).sin(),
        ]
    }

    pub fn set_state(&mut self, angles: [f64; 2], velocities: [f64; 2], target: [f64; 2]) {
        self.angles = angles;
        self.velocities = velocities;
        self.target = target;
        self.steps = 0;
    }

    fn observation(&self) -> Vec<f64> {
        let tip = self.fingertip();
        vec![
            self.angles[0],
            self.angles[1],
            self.velocities[0],
            self.velocities[1],
            self.target[0],
            self.target[1],
            tip[0],
            tip[1],
        ]
    }
}

impl Default for Reacher {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for Reacher {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            obs_dim: 8,
            action_dim: 2,
            action_low: vec![-TORQUE_LIMIT; 2],
            action_high: vec![TORQUE_LIMIT; 2],
            max_episode_steps: REACHER_HORIZON,
        }
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.angles = [rng.random_range(-PI..PI), rng.random_range(-PI..PI)];
        self.velocities = [
            rng.random_range(-0.005..0.005),
            rng.random_range(-0.005..0.005),
        ];
        // Area-uniform draw on the annulus keeps the target density flat.
        let angle = rng.random_range(-PI..PI);
        let u: f64 = rng.random_range(0.0..1.0);
        let r2_min = TARGET_RADIUS_MIN * TARGET_RADIUS_MIN;
        let r2_max = TARGET_RADIUS_MAX * TARGET_RADIUS_MAX;
        let radius = (r2_min + u * (r2_max - r2_min)).sqrt();
        self.target = [radius * angle.cos(), radius * angle.sin()];
        self.steps = 0;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        let mut torque = [0.0; 2];
        for i in 0..2 {
            torque[i] = action.get(i).copied().unwrap_or(0.0).clamp(-TORQUE_LIMIT, TORQUE_LIMIT);
        }
        for i in 0..2 {
            let acc = (torque[i] - JOINT_DAMPING * self.velocities[i]) / JOINT_INERTIA;
            self.velocities[i] += acc * DT;
            self.angles[i] = wrap_angle(self.angles[i] + self.velocities[i] * DT);
        }
        self.steps += 1;
        let tip = self.fingertip();
        let dist = ((tip[0] - self.target[0]).powi(2) + (tip[1] - self.target[1]).powi(2)).sqrt();
        let effort = torque[0] * torque[0] + torque[1] * torque[1];
        StepResult {
            next_obs: self.observation(),
            reward: -dist - CONTROL_COST * effort,
            terminated: false,
            truncated: self.steps >= REACHER_HORIZON,
        }
    }
}

/// Wraps an angle into [-pi, pi].
fn wrap_angle(x: f64) -> f64 {
    let wrapped = (x + PI).rem_euclid(2.0 * PI) - PI;
    if wrapped == PI {
        -PI
    } else {
        wrapped
    }
}
