use crate::autodiff::Graph;
use crate::buffers::ReplayBatch;
use crate::error::{Error, Result};
use crate::nets::{ActionValue, Adam, Critic, Module, TwinCritic, LOG_PROB_CLAMP};
use crate::tensor::Tensor;

/// `r + γ (1 − done) q′`, all `[B, 1]`.
pub fn td_backup(rewards: &Tensor, dones: &Tensor, next_q: &Tensor, gamma: f64) -> Result<Tensor> {
    let boot = dones.zip_map(next_q, |d, q| (1.0 - d) * q)?;
    rewards.zip_map(&boot, |r, b| r + gamma * b)
}

/// Bootstrapped target `r + γ (1 − done) Q′(s′, a′)`. For a twin critic
/// `Q′` is the elementwise minimum. Targets are plain tensors, so no
/// gradient can reach the target network.
pub fn td_target(batch: &ReplayBatch, target: &impl ActionValue, next_actions: &Tensor, gamma: f64) -> Result<Tensor> {
    let q = target.q_values(&batch.next_obs, next_actions)?;
    td_backup(&batch.rewards, &batch.dones, &q, gamma)
}

/// Next actions drawn at `s′` with their log-density when the actor has one.
#[derive(Clone, Debug)]
pub struct NextActions {
    pub actions: Tensor,
    /// `None` for actors without a tractable likelihood (diffusion, deterministic).
    pub log_probs: Option<Tensor>,
}

/// Entropy-regularized target `r + γ (1 − done)(Q′ − β log π(a′|s′))`.
/// Log-densities are clamped to at most `LOG_PROB_CLAMP`.
pub fn soft_td_target(
    batch: &ReplayBatch,
    target: &impl ActionValue,
    next: &NextActions,
    gamma: f64,
    beta: f64,
) -> Result<Tensor> {
    let lp = next.log_probs.as_ref().ok_or(Error::IntractableLogProb)?;
    let q = target.q_values(&batch.next_obs, &next.actions)?;
    let soft = q.zip_map(lp, |q, l| q - beta * l.min(LOG_PROB_CLAMP))?;
    td_backup(&batch.rewards, &batch.dones, &soft, gamma)
}

/// One optimizer step of `Σ_critics mean (Q(s, a) − y)²`. Returns
/// `(loss, pre-clip gradient norm)`.
pub fn twin_critic_update(critics: &mut TwinCritic, opt: &mut Adam, obs: &Tensor, actions: &Tensor, targets: &Tensor) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let p = critics.bind(&mut g);
    let split = critics.split();
    let s = g.constant(obs.clone());
    let a = g.constant(actions.clone());
    let y = g.constant(targets.clone());
    let q1 = critics.q1.q_graph(&mut g, &p[..split], s, a)?;
    let q2 = critics.q2.q_graph(&mut g, &p[split..], s, a)?;
    let d1 = g.sub(q1, y)?;
    let d2 = g.sub(q2, y)?;
    let s1 = g.square(d1)?;
    let s2 = g.square(d2)?;
    let l1 = g.mean(s1)?;
    let l2 = g.mean(s2)?;
    let loss = g.add(l1, l2)?;
    let value = g.value(loss)?.item();
    let grads = g.backward_scalar(loss)?.collect(&p);
    let norm = opt.step(critics, grads)?;
    Ok((value, norm))
}

/// Single-critic variant of [`twin_critic_update`].
pub fn critic_update(critic: &mut Critic, opt: &mut Adam, obs: &Tensor, actions: &Tensor, targets: &Tensor) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let p = critic.bind(&mut g);
    let s = g.constant(obs.clone());
    let a = g.constant(actions.clone());
    let y = g.constant(targets.clone());
    let q = critic.q_graph(&mut g, &p, s, a)?;
    let d = g.sub(q, y)?;
    let sq = g.square(d)?;
    let loss = g.mean(sq)?;
    let value = g.value(loss)?.item();
    let grads = g.backward_scalar(loss)?.collect(&p);
    let norm = opt.step(critic, grads)?;
    Ok((value, norm))
}
