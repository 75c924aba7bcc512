//! Bounded FIFO transition store with uniform random sampling.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One environment interaction. `done` reflects true termination only, never
/// a time limit. `target` optionally caches the bootstrap value computed for
/// this transition; it is informational and not read back during training.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub target: Option<f64>,
}

/// Column-stacked minibatch drawn from the buffer.
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub dones: Array1<f64>,
    /// Buffer slots the rows came from, for writing back cached targets.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Ring buffer over transitions; the oldest entry is evicted first once
/// capacity is reached. Sampling draws indices uniformly with replacement
/// from the buffer's own seeded generator.
pub struct TrainingBuffer {
    storage: Vec<Transition>,
    capacity: usize,
    head: usize,
    obs_dim: usize,
    action_dim: usize,
    rng: ChaCha8Rng,
}

impl TrainingBuffer {
    pub fn new(capacity: usize, obs_dim: usize, action_dim: usize, rng: ChaCha8Rng) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be >= 1".into()));
        }
        Ok(TrainingBuffer {
            storage: Vec::with_capacity(capacity.min(1 << 20)),
            capacity,
            head: 0,
            obs_dim,
            action_dim,
            rng,
        })
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.state.len() != self.obs_dim
            || t.next_state.len() != self.obs_dim
            || t.action.len() != self.action_dim
        {
            return Err(Error::dims(
                "buffer push",
                format!("obs {} / action {}", self.obs_dim, self.action_dim),
                format!(
                    "obs {} / next {} / action {}",
                    t.state.len(),
                    t.next_state.len(),
                    t.action.len()
                ),
            ));
        }
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
        Ok(())
    }

    /// Draws `batch_size` transitions uniformly with replacement.
    pub fn sample(&mut self, batch_size: usize) -> Result<Batch> {
        if self.storage.len() < batch_size {
            return Err(Error::InsufficientData {
                need: batch_size,
                have: self.storage.len(),
            });
        }
        let mut states = Array2::zeros((batch_size, self.obs_dim));
        let mut actions = Array2::zeros((batch_size, self.action_dim));
        let mut rewards = Array1::zeros(batch_size);
        let mut next_states = Array2::zeros((batch_size, self.obs_dim));
        let mut dones = Array1::zeros(batch_size);
        let mut indices = Vec::with_capacity(batch_size);
        for row in 0..batch_size {
            let idx = self.rng.random_range(0..self.storage.len());
            let t = &self.storage[idx];
            for (c, v) in t.state.iter().enumerate() {
                states[[row, c]] = *v;
            }
            for (c, v) in t.action.iter().enumerate() {
                actions[[row, c]] = *v;
            }
            rewards[row] = t.reward;
            for (c, v) in t.next_state.iter().enumerate() {
                next_states[[row, c]] = *v;
            }
            dones[row] = if t.done { 1.0 } else { 0.0 };
            indices.push(idx);
        }
        Ok(Batch {
            states,
            actions,
            rewards,
            next_states,
            dones,
            indices,
        })
    }

    /// Writes computed bootstrap targets back into the sampled slots.
    pub fn cache_targets(&mut self, indices: &[usize], targets: &Array1<f64>) {
        for (slot, value) in indices.iter().zip(targets.iter()) {
            if let Some(t) = self.storage.get_mut(*slot) {
                t.target = Some(*value);
            }
        }
    }

    pub fn get(&self, idx: usize) -> Option<&Transition> {
        self.storage.get(idx)
    }
}
