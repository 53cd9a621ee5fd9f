use std::collections::BTreeMap;

use super::td::{critic_update, soft_td_target, td_target, twin_critic_update, NextActions};
use crate::autodiff::Graph;
use crate::buffers::ReplayBatch;
use crate::error::Result;
use crate::nets::{Adam, Critic, DeterministicActor, Module, SquashedGaussianActor, TargetPair, TwinCritic};
use crate::tensor::Tensor;
use crate::{randn, SeededRng};

/// Named scalars reported by one update.
pub type Stats = BTreeMap<String, f64>;

pub(crate) fn stat(stats: &mut Stats, key: &str, v: f64) {
    stats.insert(key.to_string(), v);
}

/// `−mean Q(s, μ(s))` with the critic frozen; returns loss and actor gradients.
pub fn deterministic_actor_grads(actor: &DeterministicActor, critic: &Critic, obs: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let pa = actor.bind(&mut g);
    let pc = critic.bind_frozen(&mut g);
    let s = g.constant(obs.clone());
    let a = actor.act_graph(&mut g, &pa, s)?;
    let q = critic.q_graph(&mut g, &pc, s, a)?;
    let m = g.mean(q)?;
    let loss = g.neg(m)?;
    let value = g.value(loss)?.item();
    Ok((value, g.backward_scalar(loss)?.collect(&pa)))
}

#[derive(Clone, Debug)]
pub struct DdpgState {
    pub actor: TargetPair<DeterministicActor>,
    pub critic: TargetPair<Critic>,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

pub fn ddpg_update(st: &mut DdpgState, batch: &ReplayBatch, gamma: f64) -> Result<Stats> {
    let next = st.actor.target.act(&batch.next_obs)?;
    let y = td_target(batch, &st.critic.target, &next, gamma)?;
    let (cl, cn) = critic_update(&mut st.critic.online, &mut st.critic_opt, &batch.obs, &batch.actions, &y)?;
    let (al, grads) = deterministic_actor_grads(&st.actor.online, &st.critic.online, &batch.obs)?;
    let an = st.actor_opt.step(&mut st.actor.online, grads)?;
    st.actor.soft_update()?;
    st.critic.soft_update()?;
    let mut s = Stats::new();
    stat(&mut s, "critic_loss", cl);
    stat(&mut s, "critic_grad_norm", cn);
    stat(&mut s, "actor_loss", al);
    stat(&mut s, "actor_grad_norm", an);
    Ok(s)
}

#[derive(Clone, Debug)]
pub struct Td3State {
    pub actor: TargetPair<DeterministicActor>,
    pub critics: TargetPair<TwinCritic>,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub critic_steps: u64,
    pub policy_delay: usize,
    pub target_noise: f64,
    pub target_noise_clip: f64,
}

/// Critic step every call; actor and target updates every `policy_delay`
/// critic steps. Target actions get clipped Gaussian smoothing noise.
pub fn td3_update(st: &mut Td3State, batch: &ReplayBatch, gamma: f64, rng: &mut SeededRng) -> Result<Stats> {
    let mu = st.actor.target.act(&batch.next_obs)?;
    let noise = randn(mu.shape(), rng);
    let (sig, c) = (st.target_noise, st.target_noise_clip);
    let next = mu.zip_map(&noise, |m, z| (m + (sig * z).clamp(-c, c)).clamp(-1.0, 1.0))?;
    let y = td_target(batch, &st.critics.target, &next, gamma)?;
    let (cl, cn) = twin_critic_update(&mut st.critics.online, &mut st.critic_opt, &batch.obs, &batch.actions, &y)?;
    st.critic_steps += 1;
    let mut s = Stats::new();
    stat(&mut s, "critic_loss", cl);
    stat(&mut s, "critic_grad_norm", cn);
    if st.critic_steps % st.policy_delay as u64 == 0 {
        let (al, grads) = deterministic_actor_grads(&st.actor.online, &st.critics.online.q1, &batch.obs)?;
        let an = st.actor_opt.step(&mut st.actor.online, grads)?;
        st.actor.soft_update()?;
        st.critics.soft_update()?;
        stat(&mut s, "actor_loss", al);
        stat(&mut s, "actor_grad_norm", an);
    }
    Ok(s)
}

#[derive(Clone, Debug)]
pub struct SacState {
    pub actor: SquashedGaussianActor,
    pub critics: TargetPair<TwinCritic>,
    pub log_alpha: Tensor,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub alpha_opt: Adam,
    pub target_entropy: f64,
}

impl SacState {
    pub fn alpha(&self) -> f64 {
        self.log_alpha.item().exp()
    }
}

/// Gradient of `mean(−log α · (log π + H̄))` with respect to `log α`.
/// Negative (so `α` grows) when the entropy `−log π` is below `H̄`.
pub fn temperature_gradient(log_probs: &Tensor, target_entropy: f64) -> f64 {
    -(log_probs.mean() + target_entropy)
}

pub fn sac_update(st: &mut SacState, batch: &ReplayBatch, gamma: f64, rng: &mut SeededRng) -> Result<Stats> {
    let alpha = st.alpha();
    let (a_next, lp_next) = st.actor.sample(&batch.next_obs, rng)?;
    let next = NextActions {
        actions: a_next,
        log_probs: Some(lp_next),
    };
    let y = soft_td_target(batch, &st.critics.target, &next, gamma, alpha)?;
    let (cl, cn) = twin_critic_update(&mut st.critics.online, &mut st.critic_opt, &batch.obs, &batch.actions, &y)?;

    let xi = randn(&[batch.len(), st.actor.action_dim()], rng);
    let mut g = Graph::new();
    let pa = st.actor.bind(&mut g);
    let s = g.constant(batch.obs.clone());
    let (a, lp) = st.actor.sample_graph(&mut g, &pa, s, &xi)?;
    let q = st.critics.online.min_q_graph_frozen(&mut g, s, a)?;
    let alp = g.mul_scalar(lp, alpha)?;
    let d = g.sub(alp, q)?;
    let loss = g.mean(d)?;
    let al = g.value(loss)?.item();
    let lp_val = g.value(lp)?.clone();
    let grads = g.backward_scalar(loss)?.collect(&pa);
    let an = st.actor_opt.step(&mut st.actor, grads)?;

    let ga = temperature_gradient(&lp_val, st.target_entropy);
    st.alpha_opt.step_params(&mut [&mut st.log_alpha], vec![Tensor::full(&[1, 1], ga)])?;
    st.critics.soft_update()?;

    let mut s = Stats::new();
    stat(&mut s, "critic_loss", cl);
    stat(&mut s, "critic_grad_norm", cn);
    stat(&mut s, "actor_loss", al);
    stat(&mut s, "actor_grad_norm", an);
    stat(&mut s, "alpha", st.alpha());
    stat(&mut s, "entropy", -lp_val.mean());
    Ok(s)
}
