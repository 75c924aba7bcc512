//! Broad-critic deep-actor reinforcement learning for continuous control.
//!
//! The critic is a broad learning system: a single wide layer of random
//! feature and enhancement nodes whose output weights are fit in closed form
//! by ridge regression and grown incrementally through pseudoinverse block
//! updates. The actor is a conventional feedforward network trained by
//! deterministic policy gradient. A DDPG baseline, two deterministic
//! control environments, and an experiment harness round out the crate.

pub mod envs;
pub mod error;
pub mod harness;
pub mod io;
pub mod replay;
pub mod actor;
pub mod agents;
pub mod bls;
pub mod numerics;

pub use error::{Error, Result};
