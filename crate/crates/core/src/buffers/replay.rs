use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::SeededRng;

pub const DEFAULT_REPLAY_CAPACITY: usize = 4096;

/// How DIPO action edits are stored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditMode {
    /// Edits go to a separate policy-target field; the stored action that
    /// the critic trains on stays as executed.
    #[default]
    Safe,
    /// Edits overwrite the stored action itself.
    Strict,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// True only on termination; horizon truncation still bootstraps.
    pub done: bool,
}

/// Sampled minibatch as row-aligned tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBatch {
    pub indices: Vec<usize>,
    pub obs: Tensor,
    pub actions: Tensor,
    pub rewards: Tensor,
    pub next_obs: Tensor,
    pub dones: Tensor,
    /// Behavior-cloning targets: edited actions in safe mode, otherwise
    /// equal to `actions`.
    pub policy_targets: Tensor,
}

impl ReplayBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Fixed-capacity ring buffer with columnar storage.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    action_dim: usize,
    mode: EditMode,
    obs: Vec<f64>,
    actions: Vec<f64>,
    targets: Vec<f64>,
    rewards: Vec<f64>,
    next_obs: Vec<f64>,
    dones: Vec<bool>,
    cursor: usize,
    size: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, action_dim: usize, mode: EditMode) -> Result<Self> {
        if capacity == 0 || obs_dim == 0 || action_dim == 0 {
            return Err(Error::InvalidArgument("replay capacity and dims must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            obs_dim,
            action_dim,
            mode,
            obs: vec![0.0; capacity * obs_dim],
            actions: vec![0.0; capacity * action_dim],
            targets: vec![0.0; capacity * action_dim],
            rewards: vec![0.0; capacity],
            next_obs: vec![0.0; capacity * obs_dim],
            dones: vec![false; capacity],
            cursor: 0,
            size: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn mode(&self) -> EditMode {
        self.mode
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.obs.len() != self.obs_dim || t.next_obs.len() != self.obs_dim || t.action.len() != self.action_dim {
            return Err(Error::InvalidArgument(format!(
                "transition dims obs {} / next {} / action {} vs buffer {} / {}",
                t.obs.len(),
                t.next_obs.len(),
                t.action.len(),
                self.obs_dim,
                self.action_dim
            )));
        }
        let i = self.cursor;
        let (od, ad) = (self.obs_dim, self.action_dim);
        self.obs[i * od..(i + 1) * od].copy_from_slice(&t.obs);
        self.next_obs[i * od..(i + 1) * od].copy_from_slice(&t.next_obs);
        self.actions[i * ad..(i + 1) * ad].copy_from_slice(&t.action);
        self.targets[i * ad..(i + 1) * ad].copy_from_slice(&t.action);
        self.rewards[i] = t.reward;
        self.dones[i] = t.done;
        self.cursor = (self.cursor + 1) % self.capacity;
        self.size = (self.size + 1).min(self.capacity);
        Ok(())
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.size {
            return Err(Error::InvalidArgument(format!(
                "replay index {} out of range (size {})",
                index, self.size
            )));
        }
        Ok(())
    }

    /// Slot `index` in storage order (not insertion order once wrapped).
    pub fn get(&self, index: usize) -> Result<Transition> {
        self.check_index(index)?;
        let (od, ad) = (self.obs_dim, self.action_dim);
        Ok(Transition {
            obs: self.obs[index * od..(index + 1) * od].to_vec(),
            action: self.actions[index * ad..(index + 1) * ad].to_vec(),
            reward: self.rewards[index],
            next_obs: self.next_obs[index * od..(index + 1) * od].to_vec(),
            done: self.dones[index],
        })
    }

    pub fn policy_target(&self, index: usize) -> Result<&[f64]> {
        self.check_index(index)?;
        let ad = self.action_dim;
        Ok(&self.targets[index * ad..(index + 1) * ad])
    }

    /// Uniform sampling with replacement.
    pub fn sample(&self, batch: usize, rng: &mut SeededRng) -> Result<ReplayBatch> {
        if self.size == 0 {
            return Err(Error::InvalidArgument("cannot sample from an empty replay buffer".into()));
        }
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.size)).collect();
        Ok(self.gather(&idx))
    }

    pub fn gather(&self, idx: &[usize]) -> ReplayBatch {
        let b = idx.len();
        let (od, ad) = (self.obs_dim, self.action_dim);
        let pick = |src: &[f64], w: usize| -> Tensor {
            let data = idx.iter().flat_map(|&i| src[i * w..(i + 1) * w].iter().copied()).collect();
            Tensor::matrix(b, w, data).expect("gather size")
        };
        ReplayBatch {
            indices: idx.to_vec(),
            obs: pick(&self.obs, od),
            actions: pick(&self.actions, ad),
            rewards: pick(&self.rewards, 1),
            next_obs: pick(&self.next_obs, od),
            dones: Tensor::column(idx.iter().map(|&i| if self.dones[i] { 1.0 } else { 0.0 }).collect()),
            policy_targets: pick(&self.targets, ad),
        }
    }

    /// Replaces the action used as a behavior-cloning target at `index`.
    /// Safe mode leaves the executed action untouched; strict mode
    /// overwrites it. Observations, rewards and done flags never change.
    pub fn overwrite_action(&mut self, index: usize, new_action: &[f64]) -> Result<()> {
        self.check_index(index)?;
        if new_action.len() != self.action_dim {
            return Err(Error::InvalidArgument(format!(
                "action length {} vs {}",
                new_action.len(),
                self.action_dim
            )));
        }
        if new_action.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidArgument("overwritten action must lie in [-1, 1]".into()));
        }
        let ad = self.action_dim;
        let range = index * ad..(index + 1) * ad;
        self.targets[range.clone()].copy_from_slice(new_action);
        if self.mode == EditMode::Strict {
            self.actions[range].copy_from_slice(new_action);
        }
        Ok(())
    }
}
