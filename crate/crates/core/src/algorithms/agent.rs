use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classic::{ddpg_update, sac_update, stat, td3_update, DdpgState, SacState, Stats, Td3State};
use super::dacer::{dacer_alpha_update, dacer_entropy_estimate, dacer_policy_grads, DacerEntropyState};
use super::dipo::{dipo_action_improve, dipo_policy_update};
use super::genpo::{genpo_sample, genpo_update, GenpoFlow, GenpoParams};
use super::ppo::{ppo_update, PpoParams, PpoStats};
use super::qsm::qsm_update;
use super::qvpo::{qvpo_update, QNormalizer, QvpoParams};
use super::td::{td_target, twin_critic_update};
use super::{AlgoConfig, AlgoId};
use crate::buffers::{EditMode, ReplayBatch, ReplayBuffer, RolloutBatch};
use crate::diffusion::{sample_action, ChainNoise, NoiseSchedule};
use crate::envs::{EnvId, EnvSpec};
use crate::error::{Error, Result};
use crate::nets::{
    Adam, Checkpoint, DeterministicActor, DiagGaussianPolicy, Mlp, Module, NoisePredictor, SquashedGaussianActor, TargetPair, TwinCritic,
};
use crate::tensor::Tensor;
use crate::{randn, SeededRng};

/// Behavior common to every learner.
pub trait Agent {
    fn algorithm(&self) -> AlgoId;

    /// Action used for evaluation episodes.
    fn act(&self, obs: &Tensor, rng: &mut SeededRng) -> Result<Tensor>;

    /// Tensors needed to act; these are what checkpoints store.
    fn policy_tensors(&self) -> Vec<&Tensor>;

    fn load_policy(&mut self, tensors: &[Tensor]) -> Result<()>;

    /// Fingerprint of every trainable tensor the agent owns.
    fn param_hash(&self) -> u64;
}

pub trait OffPolicyAgent: Agent {
    /// Action executed while collecting experience.
    fn explore(&mut self, obs: &Tensor, rng: &mut SeededRng) -> Result<Tensor>;

    /// One gradient update from replay. May edit stored actions.
    fn update(&mut self, buffer: &mut ReplayBuffer, rng: &mut SeededRng) -> Result<Stats>;

    /// Called after every vectorized step with the cumulative and total
    /// environment step counts.
    fn on_progress(&mut self, _env_steps: u64, _total_steps: u64, _rng: &mut SeededRng) -> Result<Option<Stats>> {
        Ok(None)
    }

    fn edit_mode(&self) -> EditMode {
        EditMode::Safe
    }
}

/// Policy output for one on-policy collection step.
#[derive(Clone, Debug)]
pub struct RolloutAction {
    /// Sent to the environment (inside the action box).
    pub env_actions: Tensor,
    /// Stored in the rollout; the likelihood refers to these.
    pub actions: Tensor,
    pub log_probs: Vec<f64>,
    pub aux: Option<Tensor>,
}

pub trait OnPolicyAgent: Agent {
    fn sample(&self, obs: &Tensor, rng: &mut SeededRng) -> Result<RolloutAction>;

    fn values(&self, obs: &Tensor) -> Result<Vec<f64>>;

    /// Width of the per-step auxiliary record (GenPO stores its action pair).
    fn aux_dim(&self) -> usize;

    fn policy_version(&self) -> u64;

    fn update(&mut self, rollout: &RolloutBatch, rng: &mut SeededRng) -> Result<Stats>;
}

pub enum AnyAgent {
    OffPolicy(Box<dyn OffPolicyAgent>),
    OnPolicy(Box<dyn OnPolicyAgent>),
}

impl AnyAgent {
    pub fn agent(&self) -> &dyn Agent {
        match self {
            AnyAgent::OffPolicy(a) => a.as_ref(),
            AnyAgent::OnPolicy(a) => a.as_ref(),
        }
    }

    pub fn agent_mut(&mut self) -> &mut dyn Agent {
        match self {
            AnyAgent::OffPolicy(a) => a.as_mut(),
            AnyAgent::OnPolicy(a) => a.as_mut(),
        }
    }
}

fn hash_all(modules: &[&dyn ModuleRef]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for m in modules {
        h ^= m.hash();
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

trait ModuleRef {
    fn hash(&self) -> u64;
}

impl<M: Module> ModuleRef for M {
    fn hash(&self) -> u64 {
        self.param_hash()
    }
}

fn load_into(dst: Vec<&mut Tensor>, src: &[Tensor]) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!("expected {} policy tensors, got {}", dst.len(), src.len())));
    }
    for (d, s) in dst.into_iter().zip(src) {
        if d.shape() != s.shape() {
            return Err(Error::Checkpoint(format!("tensor shape {:?} does not match {:?}", s.shape(), d.shape())));
        }
        *d = s.clone();
    }
    Ok(())
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

fn adam(lr: f64, cfg: &AlgoConfig) -> Adam {
    Adam::new(lr).with_grad_clip(cfg.grad_clip)
}

fn twin_critics(cfg: &AlgoConfig, spec: &EnvSpec, rng: &mut SeededRng) -> Result<TargetPair<TwinCritic>> {
    TargetPair::new(TwinCritic::new(spec.obs_dim, spec.action_dim, &cfg.hidden, cfg.activation, rng)?, cfg.tau)
}

fn gaussian_explore(a: Tensor, scale: f64, rng: &mut SeededRng) -> Result<Tensor> {
    if scale <= 0.0 {
        return Ok(a);
    }
    let z = randn(a.shape(), rng);
    a.zip_map(&z, |a, z| (a + scale * z).clamp(-1.0, 1.0))
}

fn clip_box(a: &Tensor) -> Tensor {
    a.map(|v| v.clamp(-1.0, 1.0))
}

fn ppo_stats(s: &PpoStats) -> Stats {
    let mut m = Stats::new();
    stat(&mut m, "policy_loss", s.policy_loss);
    stat(&mut m, "value_loss", s.value_loss);
    stat(&mut m, "entropy", s.entropy);
    stat(&mut m, "approx_kl", s.approx_kl);
    stat(&mut m, "clip_fraction", s.clip_fraction);
    stat(&mut m, "grad_norm", s.grad_norm);
    stat(&mut m, "actor_grad_norm", s.actor_grad_norm);
    stat(&mut m, "updates", s.updates as f64);
    stat(&mut m, "early_stopped", f64::from(u8::from(s.early_stopped)));
    m
}

pub struct PpoAgent {
    pub policy: DiagGaussianPolicy,
    pub value: Mlp,
    opt: Adam,
    params: PpoParams,
    version: u64,
}

impl PpoAgent {
    pub fn new(cfg: &AlgoConfig, spec: &EnvSpec, rng: &mut SeededRng) -> Result<Self> {
        Ok(PpoAgent {
            policy: DiagGaussianPolicy::new(spec.obs_dim, spec.action_dim, &cfg.hidden, cfg.activation, cfg.init_log_std, rng)?,
            value: Mlp::new(&sizes(spec.obs_dim, &cfg.hidden, 1), cfg.activation, rng)?,
            opt: adam(cfg.actor_lr, cfg),
            params: PpoParams::from(cfg),
            version: 0,
        })
    }
}

impl Agent for PpoAgent {
    fn algorithm(&self) -> AlgoId {
        AlgoId::Ppo
    }

    fn act(&self, obs: &Tensor, _rng: &mut SeededRng) -> Result<Tensor> {
        Ok(clip_box(&self.policy.mean_action(obs)?))
    }

    fn policy_tensors(&self) -> Vec<&Tensor> {
        self.policy.parameters()
    }

    fn load_policy(&mut self, tensors: &[Tensor]) -> Result<()> {
        load_into(self.policy.parameters_mut(), tensors)
    }

    fn param_hash(&self) -> u64 {
        hash_all(&[&self.policy, &self.value])
    }
}

impl OnPolicyAgent for PpoAgent {
    fn sample(&self, obs: &Tensor, rng: &mut SeededRng) -> Result<RolloutAction> {
        let (a, lp) = self.policy.sample(obs, rng)?;
        Ok(RolloutAction {
            env_actions: clip_box(&a),
            actions: a,
            log_probs: lp.into_data(),
            aux: None,
        })
    }

    fn values(&self, obs: &Tensor) -> Result<Vec<f64>> {
        Ok(self.value.forward(obs)?.into_data())
    }

    fn aux_dim(&self) -> usize {
        0
    }

    fn policy_version(&self) -> u64 {
        self.version
    }

    fn update(&mut self, rollout: &RolloutBatch, rng: &mut SeededRng) -> Result<Stats> {
        let s = ppo_update(rollout, &mut self.policy, &mut self.value, &mut self.opt, &self.params, &mut self.version, rng)?;
        Ok(ppo_stats(&s))
    }
}

pub struct GenpoAgent {
    pub np: NoisePredictor,
    pub sched: NoiseSchedule,
    pub value: Mlp,
    opt: Adam,
    params: GenpoParams,
    version: u64,
}

impl GenpoAgent {
    pub fn new(cfg: &AlgoConfig, spec: &EnvSpec, rng: &mut SeededRng) -> Result<Self> {
        let k = cfg.diffusion_steps();
        Ok(GenpoAgent {
            np: NoisePredictor::new(spec.obs_dim, spec.action_dim, &cfg.hidden, cfg.embed_dim, k, cfg.activation, rng)?,
            sched: NoiseSchedule::linear(k, cfg.beta_min, cfg.beta_max)?,
            value: Mlp::new(&sizes(spec.obs_dim, &cfg.hidden, 1), cfg.activation, rng)?,
            opt: adam(cfg.actor_lr, cfg),
            params: GenpoParams {
                ppo: PpoParams::from(cfg),
                mixing: cfg.mixing,
                compress: cfg.compress,
            },
            version: 0,
        })
    }

    fn flow(&self) -> Result<GenpoFlow<'_>> {
        GenpoFlow::new(&self.np, &self.sched, self.params.mixing)
    }
}

impl Agent for GenpoAgent {
    fn algorithm(&self) -> AlgoId {
        AlgoId::Genpo
    }

    fn act(&self, obs: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        Ok(genpo_sample(&self.flow()?, obs, rng)?.action)
    }

    fn policy_tensors(&self) -> Vec<&Tensor> {
        self.np.parameters()
    }

    fn load_policy(&mut self, tensors: &[Tensor]) -> Result<()> {
        load_into(self.np.parameters_mut(), tensors)
    }

    fn param_hash(&self) -> u64 {
        hash_all(&[&self.np, &self.value])
    }
}

impl OnPolicyAgent for GenpoAgent {
    fn sample(&self, obs: &Tensor, rng: &mut SeededRng) -> Result<RolloutAction> {
        let s = genpo_sample(&self.flow()?, obs, rng)?;
        Ok(RolloutAction {
            env_actions: s.action.clone(),
            actions: s.action,
            log_probs: s.log_prob.into_data(),
            aux: Some(s.pair),
        })
    }

    fn values(&self, obs: &Tensor) -> Result<Vec<f64>> {
        Ok(self.value.forward(obs)?.into_data())
    }

    fn aux_dim(&self) -> usize {
        2 * self.np.action_dim()
    }

    fn policy_version(&self) -> u64 {
        self.version
    }

    fn update(&mut self, rollout: &RolloutBatch, rng: &mut SeededRng) -> Result<Stats> {
        let s = genpo_update(
            rollout,
            &mut self.np,
            &self.sched,
            &mut self.value,
            &mut self.opt,
            &self.params,
            &mut self.version,
            rng,
        )?;
        Ok(ppo_stats(&s))
    }
}

pub struct DdpgAgent {
    pub state: DdpgState,
    gamma: f64,
    batch: usize,
    noise: f64,
}

impl DdpgAgent {
    pub fn new(cfg: &AlgoConfig, spec: &EnvSpec, rng: &mut SeededRng) -> Result<Self> {
        let actor = DeterministicActor::new(spec.obs_dim, spec.action_dim, &cfg.hidden, cfg.activation, rng)?;
        let critic = crate::nets::Critic::new(spec.obs_dim, spec.action_dim, &cfg.hidden, cfg.activation, rng)?;
        Ok(DdpgAgent {
            state: DdpgState {
                actor: TargetPair::new(actor, cfg.tau)?,
                critic: TargetPair::new(critic, cfg.tau)?,
                actor_opt: adam(cfg.actor_lr, cfg),
                critic_opt: adam(cfg.critic_lr, cfg),
            },
            gamma: cfg.gamma,
            batch: cfg.batch_size,
            noise: cfg.exploration_noise,
        })
    }
}

impl Agent for DdpgAgent {
    fn algorithm(&self) -> AlgoId {
        AlgoId::Ddpg
    }

    fn act(&self, obs: &Tensor, _rng: &mut SeededRng) -> Result<Tensor> {
        self.state.actor.online.act(obs)
    }

    fn policy_tensors(&self) -> Vec<&Tensor> {
        self.state.actor.online.parameters()
    }

    fn load_policy(&mut self, tensors: &[Tensor]) -> Result<()> {
        load_into(self.state.actor.online.parameters_mut(), tensors)
    }

    fn param_hash(&self) -> u64 {
        hash_all(&[&self.state.actor.online, &self.state.actor.target, &self.state.critic.online, &self.state.critic.target])
    }
}

impl OffPolicyAgent for DdpgAgent {
    fn explore(&mut self, obs: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        gaussian_explore(self.state.actor.online.act(obs)?, self.noise, rng)
    }

    fn update(&mut self, buffer: &mut ReplayBuffer, rng: &mut SeededRng) -> Result<Stats> {
        let b = buffer.sample(self.batch, rng)?;
        ddpg_update(&mut self.state, &b, self.gamma)
    }
}

pub struct Td3Agent {
    pub state: Td3State,
    gamma: f64,
    batch: usize,
    noise: f64,
}

impl Td3Agent {
    pub fn new(cfg: &AlgoConfig, spec: &EnvSpec, rng: &mut SeededRng) -> Result<Self> {
        let actor = DeterministicActor::new(spec.obs_dim, spec.action_dim, &cfg.hidden, cfg.activation, rng)?;
        Ok(Td3Agent {
            state: Td3State {
                actor: TargetPair::new(actor, cfg.tau)?,
                critics: twin_critics(cfg, spec, rng)?,
                actor_opt: adam(cfg.actor_lr, cfg),
                critic_opt: adam(cfg.critic_lr, cfg),
                critic_steps: 0,
                policy_delay: cfg.policy_delay,
                target_noise: cfg.target_noise,
                target_noise_clip: cfg.target_noise_clip,
            },
            gamma: cfg.gamma,
            batch: cfg.batch_size,
            noise: cfg.exploration_noise,
        })
    }
}

impl Agent for Td3Agent {
    fn algorithm(&self) -> AlgoId {
        AlgoId::Td3
    }

    fn act(&self, obs: &Tensor, _rng: &mut SeededRng) -> Result<Tensor> {
        self.state.actor.online.act(obs)
    }

    fn policy_tensors(&self) -> Vec<&Tensor> {
        self.state.actor.online.parameters()
    }

    fn load_policy(&mut self, tensors: &[Tensor]) -> Result<()> {
        load_into(self.state.actor.online.parameters_mut(), tensors)
    }

    fn param_hash(&self) -> u64 {
        hash_all(&[&self.state.actor.online, &self.state.actor.target, &self.state.critics.online, &self.state.critics.target])
    }
}

impl OffPolicyAgent for Td3Agent {
    fn explore(&mut self, obs: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        gaussian_explore(self.state.actor.online.act(obs)?, self.noise, rng)
    }

    fn update(&mut self, buffer: &mut ReplayBuffer, rng: &mut SeededRng) -> Result<Stats> {
        let b = buffer.sample(self.batch, rng)?;
        td3_update(&mut self.state, &b, self.gamma, rng)
    }
}

pub struct SacAgent {
    pub state: SacState,
    gamma: f64,
    batch: usize,
}

impl SacAgent {
    pub fn new(cfg: &AlgoConfig, spec: &EnvSpec, rng: &mut SeededRng) -> Result<Self> {
        if cfg.init_temperature <= 0.0 {
            return Err(Error::Config("initial temperature must be positive".into()));
        }
        Ok(SacAgent {
            state: SacState {
                actor: SquashedGaussianActor::new(spec.obs_dim, spec.action_dim, &cfg.hidden, cfg.activation, rng)?,
                critics: twin_critics(cfg, spec, rng)?,
                log_alpha: Tensor::full(&[1, 1], cfg.init_temperature.ln()),
                actor_opt: adam(cfg.actor_lr, cfg),
                critic_opt: adam(cfg.critic_lr, cfg),
                alpha_opt: Adam::new(cfg.actor_lr),
                target_entropy: cfg.target_entropy(spec.action_dim),
            },
            gamma: cfg.gamma,
            batch: cfg.batch_size,
        })
    }
}

impl Agent for SacAgent {
    fn algorithm(&self) -> AlgoId {
        AlgoId::Sac
    }

    fn act(&self, obs: &Tensor, _rng: &mut SeededRng) -> Result<Tensor> {
        self.state.actor.mean_action(obs)
    }

    fn policy_tensors(&self) -> Vec<&Tensor> {
        self.state.actor.parameters()
    }

    fn load_policy(&mut self, tensors: &[Tensor]) -> Result<()> {
        load_into(self.state.actor.parameters_mut(), tensors)
    }

    fn param_hash(&self) -> u64 {
        let mut h = hash_all(&[&self.state.actor, &self.state.critics.online, &self.state.critics.target]);
        h ^= self.state.log_alpha.item().to_bits();
        h
    }
}

impl OffPolicyAgent for SacAgent {
    fn explore(&mut self, obs: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        Ok(self.state.actor.sample(obs, rng)?.0)
    }

    fn update(&mut self, buffer: &mut ReplayBuffer, rng: &mut SeededRng) -> Result<Stats> {
        let b = buffer.sample(self.batch, rng)?;
        sac_update(&mut self.state, &b, self.gamma, rng)
    }
}

/// Noise predictor, schedule and twin critics shared by the off-policy
/// diffusion learners. The critic target uses fresh policy samples at `s′`.
pub struct DiffusionCore {
    pub np: NoisePredictor,
    pub sched: NoiseSchedule,
    pub critics: TargetPair<TwinCritic>,
    actor_opt: Adam,
    critic_opt: Adam,
    gamma: f64,
    batch: usize,
    policy_batch: usize,
}

impl DiffusionCore {
    pub fn new(cfg: &AlgoConfig, spec: &EnvSpec, rng: &mut SeededRng) -> Result<Self> {
        let k = cfg.diffusion_steps();
        Ok(DiffusionCore {
            np: NoisePredictor::new(spec.obs_dim, spec.action_dim, &cfg.hidden, cfg.embed_dim, k, cfg.activation, rng)?,
            sched: NoiseSchedule::linear(k, cfg.beta_min, cfg.beta_max)?,
            critics: twin_critics(cfg, spec, rng)?,
            actor_opt: adam(cfg.actor_lr, cfg),
            critic_opt: adam(cfg.critic_lr, cfg),
            gamma: cfg.gamma,
            batch: cfg.batch_size,
            policy_batch: cfg.policy_batch(),
        })
    }

    fn sample(&self, obs: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        sample_action(&self.np, obs, &self.sched, rng)
    }

    fn critic_step(&mut self, b: &ReplayBatch, rng: &mut SeededRng, stats: &mut Stats) -> Result<()> {
        let next = self.sample(&b.next_obs, rng)?;
        let y = td_target(b, &self.critics.target, &next, self.gamma)?;
        let (cl, cn) = twin_critic_update(&mut self.critics.online, &mut self.critic_opt, &b.obs, &b.actions, &y)?;
        self.critics.soft_update()?;
        stat(stats, "critic_loss", cl);
        stat(stats, "critic_grad_norm", cn);
        Ok(())
    }

    /// First `policy_batch` rows of the batch observations.
    fn policy_states(&self, b: &ReplayBatch) -> Tensor {
        let n = self.policy_batch.min(b.len());
        b.obs.gather_rows(&(0..n).collect::<Vec<_>>())
    }

    fn hash(&self) -> u64 {
        hash_all(&[&self.np, &self.critics.online, &self.critics.target])
    }
}

macro_rules! diffusion_agent_common {
    ($id:expr) => {
        fn algorithm(&self) -> AlgoId {
            $id
        }

        fn policy_tensors(&self) -> Vec<&Tensor> {
            self.core.np.parameters()
        }

        fn load_policy(&mut self, tensors: &[Tensor]) -> Result<()> {
            load_into(self.core.np.parameters_mut(), tensors)
        }
    };
}

pub struct DipoAgent {
    pub core: DiffusionCore,
    eta: f64,
    steps: usize,
    mode: EditMode,
}

impl DipoAgent {
    pub fn new(cfg: &AlgoConfig, spec: &EnvSpec, rng: &mut SeededRng) -> Result<Self> {
        Ok(DipoAgent {
            core: DiffusionCore::new(cfg, spec, rng)?,
            eta: cfg.action_lr,
            steps: cfg.action_grad_steps,
            mode: cfg.edit_mode,
        })
    }
}

impl Agent for DipoAgent {
    diffusion_agent_common!(AlgoId::Dipo);

    fn act(&self, obs: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        self.core.sample(obs, rng)
    }

    fn param_hash(&self) -> u64 {
        self.core.hash()
    }
}

impl OffPolicyAgent for DipoAgent {
    fn explore(&mut self, obs: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        self.core.sample(obs, rng)
    }

    fn update(&mut self, buffer: &mut ReplayBuffer, rng: &mut SeededRng) -> Result<Stats> {
        let mut s = Stats::new();
        let b = buffer.sample(self.core.batch, rng)?;
        self.core.critic_step(&b, rng, &mut s)?;
        let improved = dipo_action_improve(&b.obs, &b.policy_targets, &self.core.critics.online, self.eta, self.steps)?;
        let mut moved = 0.0;
        for (row, &idx) in b.indices.iter().enumerate() {
            buffer.overwrite_action(idx, improved.row_slice(row))?;
            moved += improved
                .row_slice(row)
                .iter()
                .zip(b.policy_targets.row_slice(row))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
        }
        let (pl, pn) = dipo_policy_update(buffer, &mut self.core.np, &mut self.core.actor_opt, &self.core.sched, self.core.policy_batch, rng)?;
        stat(&mut s, "actor_loss", pl);
        stat(&mut s, "actor_grad_norm", pn);
        stat(&mut s, "action_edit", moved / b.len() as f64);
        Ok(s)
    }

    fn edit_mode(&self) -> EditMode {
        self.mode
    }
}

pub struct QsmAgent {
    pub core: DiffusionCore,
    scale: f64,
}

impl QsmAgent {
    pub fn new(cfg: &AlgoConfig, spec: &EnvSpec, rng: &mut SeededRng) -> Result<Self> {
        Ok(QsmAgent {
            core: DiffusionCore::new(cfg, spec, rng)?,
            scale: cfg.qsm_scale,
        })
    }
}

impl Agent for QsmAgent {
    diffusion_agent_common!(AlgoId::Qsm);

    fn act(&self, obs: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        self.core.sample(obs, rng)
    }

    fn param_hash(&self) -> u64 {
        self.core.hash()
    }
}

impl OffPolicyAgent for QsmAgent {
    fn explore(&mut self, obs: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        self.core.sample(obs, rng)
    }

    fn update(&mut self, buffer: &mut ReplayBuffer, rng: &mut SeededRng) -> Result<Stats> {
        let mut s = Stats::new();
        let b = buffer.sample(self.core.batch, rng)?;
        self.core.critic_step(&b, rng, &mut s)?;
        let n = self.core.policy_batch.min(b.len());
        let rows: Vec<usize> = (0..n).collect();
        let (pl, pn) = qsm_update(
            &mut self.core.np,
            &mut self.core.actor_opt,
            &self.core.critics.online,
            &b.obs.gather_rows(&rows),
            &b.actions.gather_rows(&rows),
            self.scale,
            &self.core.sched,
            rng,
        )?;
        stat(&mut s, "actor_loss", pl);
        stat(&mut s, "actor_grad_norm", pn);
        Ok(s)
    }
}

pub struct QvpoAgent {
    pub core: DiffusionCore,
    params: QvpoParams,
    pub normalizer: QNormalizer,
}

impl QvpoAgent {
    pub fn new(cfg: &AlgoConfig, spec: &EnvSpec, rng: &mut SeededRng) -> Result<Self> {
        Ok(QvpoAgent {
            core: DiffusionCore::new(cfg, spec, rng)?,
            params: QvpoParams {
                diffusion_samples: cfg.diffusion_samples,
                batch_samples: cfg.batch_samples,
                entropy_weight: cfg.entropy_weight,
            },
            normalizer: QNormalizer::new(cfg.q_norm_rate),
        })
    }
}

impl Agent for QvpoAgent {
    diffusion_agent_common!(AlgoId::Qvpo);

    fn act(&self, obs: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        self.core.sample(obs, rng)
    }

    fn param_hash(&self) -> u64 {
        self.core.hash()
    }
}

impl OffPolicyAgent for QvpoAgent {
    fn explore(&mut self, obs: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        self.core.sample(obs, rng)
    }

    fn update(&mut self, buffer: &mut ReplayBuffer, rng: &mut SeededRng) -> Result<Stats> {
        let mut s = Stats::new();
        let b = buffer.sample(self.core.batch, rng)?;
        self.core.critic_step(&b, rng, &mut s)?;
        let states = self.core.policy_states(&b);
        let out = qvpo_update(
            &states,
            &mut self.core.np,
            &mut self.core.actor_opt,
            &self.core.critics.online,
            &self.params,
            &mut self.normalizer,
            &self.core.sched,
            rng,
        )?;
        if let Some(l) = out.loss {
            stat(&mut s, "actor_loss", l);
            stat(&mut s, "actor_grad_norm", out.grad_norm);
        }
        stat(&mut s, "mean_weight", out.mean_weight);
        Ok(s)
    }
}

/// States kept for the periodic entropy estimate.
const DACER_ENTROPY_STATES: usize = 8;

pub struct DacerAgent {
    pub core: DiffusionCore,
    pub entropy: DacerEntropyState,
    target_entropy: f64,
    entropy_lr: f64,
    components: usize,
    alpha_updates: usize,
    recent_states: Option<Tensor>,
}

impl DacerAgent {
    pub fn new(cfg: &AlgoConfig, spec: &EnvSpec, rng: &mut SeededRng) -> Result<Self> {
        Ok(DacerAgent {
            core: DiffusionCore::new(cfg, spec, rng)?,
            entropy: DacerEntropyState::new(cfg.init_alpha),
            target_entropy: cfg.target_entropy(spec.action_dim),
            entropy_lr: cfg.entropy_lr,
            components: cfg.gmm_components,
            alpha_updates: cfg.alpha_updates,
            recent_states: None,
        })
    }

    fn noisy_sample(&self, obs: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        let a = self.core.sample(obs, rng)?;
        let z = randn(a.shape(), rng);
        a.zip_map(&z, |a, z| a + self.entropy.noise_scale() * z)
    }

    /// Mean per-state GMM entropy of the exploration distribution.
    pub fn estimate_entropy(&self, states: &Tensor, rng: &mut SeededRng) -> Result<f64> {
        let per_state = (10 * self.components).max(64);
        let mut total = 0.0;
        for i in 0..states.rows() {
            let s = states.gather_rows(&vec![i; per_state]);
            let a = self.noisy_sample(&s, rng)?;
            total += dacer_entropy_estimate(&a, self.components, rng)?;
        }
        Ok(total / states.rows().max(1) as f64)
    }
}

impl Agent for DacerAgent {
    diffusion_agent_common!(AlgoId::Dacer);

    fn act(&self, obs: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        self.core.sample(obs, rng)
    }

    fn param_hash(&self) -> u64 {
        self.core.hash() ^ self.entropy.alpha.to_bits()
    }
}

impl OffPolicyAgent for DacerAgent {
    fn explore(&mut self, obs: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        Ok(clip_box(&self.noisy_sample(obs, rng)?))
    }

    fn update(&mut self, buffer: &mut ReplayBuffer, rng: &mut SeededRng) -> Result<Stats> {
        let mut s = Stats::new();
        let b = buffer.sample(self.core.batch, rng)?;
        self.core.critic_step(&b, rng, &mut s)?;
        let states = self.core.policy_states(&b);
        let noise = ChainNoise::draw(states.rows(), self.core.np.action_dim(), &self.core.sched, rng);
        let out = dacer_policy_grads(&self.core.np, &self.core.critics.online, &states, &self.core.sched, &noise)?;
        let pn = self.core.actor_opt.step(&mut self.core.np, out.grads)?;
        stat(&mut s, "actor_loss", out.loss);
        stat(&mut s, "actor_grad_norm", pn);
        stat(&mut s, "chain_grad_norm_max", out.step_norms.iter().cloned().fold(0.0, f64::max));
        stat(&mut s, "alpha", self.entropy.alpha);
        let n = DACER_ENTROPY_STATES.min(states.rows());
        self.recent_states = Some(states.gather_rows(&(0..n).collect::<Vec<_>>()));
        Ok(s)
    }

    fn on_progress(&mut self, env_steps: u64, total_steps: u64, rng: &mut SeededRng) -> Result<Option<Stats>> {
        let interval = (total_steps / self.alpha_updates as u64).max(1);
        if env_steps / interval <= self.entropy.updates {
            return Ok(None);
        }
        let Some(states) = self.recent_states.clone() else {
            return Ok(None);
        };
        let h = self.estimate_entropy(&states, rng)?;
        self.entropy.entropy = Some(h);
        self.entropy = dacer_alpha_update(&self.entropy, self.target_entropy, self.entropy_lr)?;
        let mut s = Stats::new();
        stat(&mut s, "entropy_estimate", h);
        stat(&mut s, "alpha", self.entropy.alpha);
        Ok(Some(s))
    }
}

/// Builds a fresh learner for `cfg` on `spec`.
pub fn build_agent(cfg: &AlgoConfig, spec: &EnvSpec, rng: &mut SeededRng) -> Result<AnyAgent> {
    cfg.validate()?;
    Ok(match cfg.algorithm {
        AlgoId::Ppo => AnyAgent::OnPolicy(Box::new(PpoAgent::new(cfg, spec, rng)?)),
        AlgoId::Genpo => AnyAgent::OnPolicy(Box::new(GenpoAgent::new(cfg, spec, rng)?)),
        AlgoId::Ddpg => AnyAgent::OffPolicy(Box::new(DdpgAgent::new(cfg, spec, rng)?)),
        AlgoId::Td3 => AnyAgent::OffPolicy(Box::new(Td3Agent::new(cfg, spec, rng)?)),
        AlgoId::Sac => AnyAgent::OffPolicy(Box::new(SacAgent::new(cfg, spec, rng)?)),
        AlgoId::Dipo => AnyAgent::OffPolicy(Box::new(DipoAgent::new(cfg, spec, rng)?)),
        AlgoId::Qsm => AnyAgent::OffPolicy(Box::new(QsmAgent::new(cfg, spec, rng)?)),
        AlgoId::Qvpo => AnyAgent::OffPolicy(Box::new(QvpoAgent::new(cfg, spec, rng)?)),
        AlgoId::Dacer => AnyAgent::OffPolicy(Box::new(DacerAgent::new(cfg, spec, rng)?)),
    })
}

/// JSON header stored in policy checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub env: EnvId,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub config: AlgoConfig,
}

pub fn save_policy(agent: &dyn Agent, cfg: &AlgoConfig, spec: &EnvSpec, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        env: spec.id,
        obs_dim: spec.obs_dim,
        action_dim: spec.action_dim,
        config: cfg.clone(),
    };
    let ck = Checkpoint {
        metadata: serde_json::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
        tensors: agent.policy_tensors().into_iter().cloned().collect(),
    };
    ck.save(path)
}

fn parse_meta(ck: &Checkpoint) -> Result<CheckpointMeta> {
    serde_json::from_str(&ck.metadata).map_err(|e| Error::Checkpoint(format!("bad metadata: {}", e)))
}

/// Metadata of a policy checkpoint without rebuilding the agent.
pub fn checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    parse_meta(&Checkpoint::load(path)?)
}

/// Rebuilds an agent for `spec` and loads the stored policy. Fails if the
/// checkpoint's observation or action width differs from `spec`.
pub fn load_policy(path: &Path, spec: &EnvSpec) -> Result<(CheckpointMeta, AnyAgent)> {
    let ck = Checkpoint::load(path)?;
    let meta = parse_meta(&ck)?;
    if meta.obs_dim != spec.obs_dim || meta.action_dim != spec.action_dim {
        return Err(Error::InvalidArgument(format!(
            "checkpoint dims (obs {}, action {}) differ from environment (obs {}, action {})",
            meta.obs_dim, meta.action_dim, spec.obs_dim, spec.action_dim
        )));
    }
    let mut agent = build_agent(&meta.config, spec, &mut crate::seeded_rng(0))?;
    agent.agent_mut().load_policy(&ck.tensors)?;
    Ok((meta, agent))
}
