//! Value learning and policy-improvement rules for the classical baselines
//! and the diffusion-policy learners, plus the agents that drive them.

mod agent;
mod classic;
mod config;
mod dacer;
mod dipo;
mod genpo;
mod ppo;
mod qsm;
mod qvpo;
mod td;


pub use agent::{
    build_agent, checkpoint_meta, load_policy, save_policy, Agent, AnyAgent, CheckpointMeta, DacerAgent, DdpgAgent, DiffusionCore, DipoAgent, GenpoAgent,
    OffPolicyAgent, OnPolicyAgent, PpoAgent, QsmAgent, QvpoAgent, RolloutAction, SacAgent, Td3Agent,
};
pub use classic::{ddpg_update, deterministic_actor_grads, sac_update, td3_update, temperature_gradient, DdpgState, SacState, Stats, Td3State};
pub use config::{AlgoConfig, AlgoId, DIPO_DESK_K, DIPO_FULL_K};
pub use dacer::{
    dacer_alpha_update, dacer_entropy_estimate, dacer_policy_grads, fit_gmm, DacerEntropyState, DacerGrads, Gmm, GMM_EM_ITERS, GMM_VAR_FLOOR,
};
pub use dipo::{dipo_action_improve, dipo_policy_update};
pub use genpo::{
    compress_penalty_graph, genpo_action, genpo_forward, genpo_inverse, genpo_logprob, genpo_sample, genpo_update, split_pair, FlowOutput,
    GenpoFlow, GenpoParams, GenpoSample, MAX_LOG_DET,
};
pub use ppo::{
    clipped_objective, clipped_policy_epochs, clipped_surrogate_graph, clipped_value_loss_graph, ppo_update, MinibatchOutcome, PpoParams,
    PpoStats,
};
pub use qsm::{qsm_loss, qsm_loss_graph, qsm_target, qsm_update};
pub use qvpo::{qvpo_candidates, qvpo_select, qvpo_update, qvpo_weight, QNormalizer, QvpoCandidates, QvpoOutcome, QvpoParams};
pub use td::{critic_update, soft_td_target, td_backup, td_target, twin_critic_update, NextActions};
