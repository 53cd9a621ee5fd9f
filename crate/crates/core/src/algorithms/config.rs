use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::buffers::{EditMode, DEFAULT_REPLAY_CAPACITY};
use crate::error::{Error, Result};
use crate::nets::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgoId {
    Ppo,
    Ddpg,
    Td3,
    Sac,
    Dipo,
    Qsm,
    Qvpo,
    Dacer,
    Genpo,
}

impl AlgoId {
    pub const ALL: [AlgoId; 9] = [
        AlgoId::Ppo,
        AlgoId::Ddpg,
        AlgoId::Td3,
        AlgoId::Sac,
        AlgoId::Dipo,
        AlgoId::Qsm,
        AlgoId::Qvpo,
        AlgoId::Dacer,
        AlgoId::Genpo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AlgoId::Ppo => "ppo",
            AlgoId::Ddpg => "ddpg",
            AlgoId::Td3 => "td3",
            AlgoId::Sac => "sac",
            AlgoId::Dipo => "dipo",
            AlgoId::Qsm => "qsm",
            AlgoId::Qvpo => "qvpo",
            AlgoId::Dacer => "dacer",
            AlgoId::Genpo => "genpo",
        }
    }

    pub fn is_on_policy(self) -> bool {
        matches!(self, AlgoId::Ppo | AlgoId::Genpo)
    }

    pub fn is_diffusion(self) -> bool {
        matches!(self, AlgoId::Dipo | AlgoId::Qsm | AlgoId::Qvpo | AlgoId::Dacer | AlgoId::Genpo)
    }

    /// Default number of denoising steps.
    pub fn default_k(self) -> usize {
        match self {
            AlgoId::Dipo => DIPO_DESK_K,
            AlgoId::Genpo => 5,
            _ => 20,
        }
    }
}

/// DIPO's reference 100 denoising steps, capped for desk runtime unless
/// `full_dipo_steps` is set.
pub const DIPO_FULL_K: usize = 100;
pub const DIPO_DESK_K: usize = 50;

impl fmt::Display for AlgoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlgoId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AlgoId::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm id '{}'", s)))
    }
}

/// Every hyperparameter of every learner. Unset fields take the values
/// of the shared hyperparameter tables (Cartpole column where they vary by
/// task).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgoConfig {
    pub algorithm: AlgoId,
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub grad_clip: f64,

    // off-policy
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub tau: f64,
    /// Uniform random actions per environment before learning starts.
    pub random_action_steps: usize,
    /// Gradient updates per update round.
    pub updates_per_step: usize,
    /// Vectorized environment steps between update rounds.
    pub update_every: usize,
    pub exploration_noise: f64,

    // on-policy
    /// Steps per environment per rollout.
    pub rollout_steps: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub gae_lambda: f64,
    pub desired_kl: f64,
    pub clip: f64,
    pub value_clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub init_log_std: f64,

    // TD3
    pub policy_delay: usize,
    pub target_noise: f64,
    pub target_noise_clip: f64,

    // SAC
    pub init_temperature: f64,
    pub target_entropy: Option<f64>,

    // diffusion
    pub k_steps: Option<usize>,
    pub full_dipo_steps: bool,
    pub beta_min: f64,
    pub beta_max: f64,
    pub embed_dim: usize,
    /// States per diffusion policy step; defaults to `batch_size`.
    pub policy_batch: Option<usize>,

    // DIPO
    pub action_lr: f64,
    pub action_grad_steps: usize,
    pub edit_mode: EditMode,

    // QSM
    pub qsm_scale: f64,

    // QVPO
    pub entropy_weight: f64,
    pub diffusion_samples: usize,
    pub batch_samples: usize,
    pub q_norm_rate: f64,

    // DACER
    pub entropy_lr: f64,
    pub init_alpha: f64,
    pub gmm_components: usize,
    /// Alpha updates happen every `total_steps / alpha_updates` env steps.
    pub alpha_updates: usize,

    // GenPO
    pub mixing: f64,
    pub compress: f64,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        AlgoConfig {
            algorithm: AlgoId::Sac,
            gamma: 0.99,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            grad_clip: 1.0,
            batch_size: 4096,
            replay_capacity: DEFAULT_REPLAY_CAPACITY,
            tau: 0.005,
            random_action_steps: 4,
            updates_per_step: 1,
            update_every: 1,
            exploration_noise: 0.1,
            rollout_steps: 16,
            epochs: 8,
            minibatches: 8,
            gae_lambda: 0.95,
            desired_kl: 0.008,
            clip: 0.2,
            value_clip: 0.2,
            entropy_coef: 0.0,
            value_coef: 2.0,
            init_log_std: 0.0,
            policy_delay: 2,
            target_noise: 0.2,
            target_noise_clip: 0.5,
            init_temperature: 1.0,
            target_entropy: None,
            k_steps: None,
            full_dipo_steps: false,
            beta_min: 1e-4,
            beta_max: 0.1,
            embed_dim: 16,
            policy_batch: None,
            action_lr: 3e-2,
            action_grad_steps: 20,
            edit_mode: EditMode::Safe,
            qsm_scale: 1.0,
            entropy_weight: 0.02,
            diffusion_samples: 64,
            batch_samples: 10,
            q_norm_rate: 0.001,
            entropy_lr: 0.03,
            init_alpha: 0.02,
            gmm_components: 3,
            alpha_updates: 10,
            mixing: 0.9,
            compress: 0.01,
        }
    }
}

impl AlgoConfig {
    pub fn for_algorithm(algorithm: AlgoId) -> Self {
        AlgoConfig {
            algorithm,
            ..Default::default()
        }
    }

    /// Denoising steps actually used.
    pub fn diffusion_steps(&self) -> usize {
        match (self.k_steps, self.algorithm) {
            (Some(k), _) => k,
            (None, AlgoId::Dipo) if self.full_dipo_steps => DIPO_FULL_K,
            (None, a) => a.default_k(),
        }
    }

    pub fn policy_batch(&self) -> usize {
        self.policy_batch.unwrap_or(self.batch_size)
    }

    pub fn target_entropy(&self, action_dim: usize) -> f64 {
        self.target_entropy.unwrap_or(-(action_dim as f64))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if self.diffusion_steps() == 0 {
            return bad("diffusion steps must be at least 1");
        }
        if self.action_lr <= 0.0 {
            return bad("action learning rate must be positive");
        }
        if !(self.mixing > 0.0 && self.mixing <= 1.0) {
            return bad("mixing coefficient must lie in (0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.actor_lr <= 0.0 || self.critic_lr <= 0.0 {
            return bad("learning rates must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        if self.policy_batch == Some(0) {
            return bad("policy batch must be positive");
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.updates_per_step == 0 || self.update_every == 0 {
            return bad("batch size, replay capacity and update cadence must be positive");
        }
        if self.rollout_steps == 0 || self.epochs == 0 || self.minibatches == 0 {
            return bad("rollout steps, epochs and minibatches must be positive");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("GAE lambda must lie in [0, 1]");
        }
        if self.diffusion_samples == 0 || self.batch_samples == 0 || self.batch_samples > self.diffusion_samples {
            return bad("need 1 <= batch_samples <= diffusion_samples");
        }
        if !(0.0..=1.0).contains(&self.entropy_weight) {
            return bad("entropy weight must lie in [0, 1]");
        }
        if self.embed_dim == 0 || self.embed_dim % 2 == 1 {
            return bad("embedding dimension must be even and positive");
        }
        if self.gmm_components == 0 || self.alpha_updates == 0 || self.policy_delay == 0 {
            return bad("gmm components, alpha updates and policy delay must be positive");
        }
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max < 1.0) {
            return bad("need 0 < beta_min <= beta_max < 1");
        }
        Ok(())
    }
}
