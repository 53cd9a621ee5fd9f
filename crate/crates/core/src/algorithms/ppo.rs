use rand::seq::SliceRandom;

use super::AlgoConfig;
use crate::autodiff::{Graph, Var};
use crate::buffers::{normalize_advantages, RolloutBatch};
use crate::error::{Error, Result};
use crate::nets::{global_norm, Adam, DiagGaussianPolicy, Mlp, Module};
use crate::tensor::Tensor;
use crate::SeededRng;

#[derive(Clone, Debug, PartialEq)]
pub struct PpoParams {
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub value_clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Remaining minibatch updates are skipped once the approximate KL to
    /// the collecting policy exceeds this.
    pub desired_kl: f64,
}

impl From<&AlgoConfig> for PpoParams {
    fn from(c: &AlgoConfig) -> Self {
        PpoParams {
            clip: c.clip,
            epochs: c.epochs,
            minibatches: c.minibatches,
            value_clip: c.value_clip,
            value_coef: c.value_coef,
            entropy_coef: c.entropy_coef,
            desired_kl: c.desired_kl,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Global norm over policy and value parameters.
    pub grad_norm: f64,
    /// Norm over the policy parameters alone.
    pub actor_grad_norm: f64,
    pub updates: usize,
    pub early_stopped: bool,
}

/// Per-sample clipped objective `min(r A, clip(r, 1 − δ, 1 + δ) A)`.
pub fn clipped_objective(ratio: f64, adv: f64, clip: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - clip, 1.0 + clip) * adv)
}

/// Quantities measured on one minibatch before its optimizer step.
#[derive(Clone, Debug, Default)]
pub struct MinibatchOutcome {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub actor_grad_norm: f64,
    /// `false` if the step was withheld because KL exceeded the limit.
    pub applied: bool,
}

/// Clipped surrogate loss `−mean min(r A, clip(r) A)` with
/// `r = exp(log π_new − log π_old)`. Also returns the ratio variable.
pub fn clipped_surrogate_graph(g: &mut Graph, new_logp: Var, old_logp: &Tensor, adv: &Tensor, clip: f64) -> Result<(Var, Var)> {
    let diff = g.add_const(new_logp, old_logp.scale(-1.0))?;
    let ratio = g.exp(diff)?;
    let t1 = g.mul_const(ratio, adv.clone())?;
    let rc = g.clamp(ratio, 1.0 - clip, 1.0 + clip)?;
    let t2 = g.mul_const(rc, adv.clone())?;
    let m = g.minimum(t1, t2)?;
    let mean = g.mean(m)?;
    Ok((g.neg(mean)?, ratio))
}

/// Clipped value loss `mean max((v − R)², (v_old + clip(v − v_old, ±c) − R)²)`.
pub fn clipped_value_loss_graph(g: &mut Graph, v: Var, old_v: &Tensor, returns: &Tensor, clip: f64) -> Result<Var> {
    let neg_ret = returns.scale(-1.0);
    let d = g.add_const(v, neg_ret.clone())?;
    let unclipped = g.square(d)?;
    let dv = g.add_const(v, old_v.scale(-1.0))?;
    let dvc = g.clamp(dv, -clip, clip)?;
    let vc = g.add_const(dvc, old_v.clone())?;
    let dc = g.add_const(vc, neg_ret)?;
    let clipped = g.square(dc)?;
    let m = g.maximum(unclipped, clipped)?;
    g.mean(m)
}

fn ratio_stats(ratio: &Tensor, clip: f64) -> (f64, f64) {
    let n = ratio.len() as f64;
    let kl = ratio.data().iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / n;
    let cf = ratio.data().iter().filter(|r| (*r - 1.0).abs() > clip).count() as f64 / n;
    (kl, cf)
}

/// Shared epoch / minibatch loop for clipped-surrogate learners. `step`
/// receives the minibatch row indices and their normalized advantages.
pub fn clipped_policy_epochs<F>(rollout: &RolloutBatch, p: &PpoParams, rng: &mut SeededRng, mut step: F) -> Result<PpoStats>
where
    F: FnMut(&[usize], &Tensor) -> Result<MinibatchOutcome>,
{
    let adv = rollout
        .advantages()
        .ok_or_else(|| Error::InvalidArgument("advantages not computed; call compute_gae first".into()))?;
    let n = rollout.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty rollout".into()));
    }
    let mb = p.minibatches.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = PpoStats::default();
    'outer: for _ in 0..p.epochs {
        order.shuffle(rng);
        for chunk in 0..mb {
            let lo = chunk * n / mb;
            let hi = (chunk + 1) * n / mb;
            let idx = &order[lo..hi];
            let mut a: Vec<f64> = idx.iter().map(|&i| adv[i]).collect();
            normalize_advantages(&mut a);
            let out = step(idx, &Tensor::column(a))?;
            if !out.applied {
                stats.early_stopped = true;
                stats.approx_kl = out.approx_kl;
                break 'outer;
            }
            stats.updates += 1;
            stats.policy_loss += out.policy_loss;
            stats.value_loss += out.value_loss;
            stats.entropy += out.entropy;
            stats.approx_kl += out.approx_kl;
            stats.clip_fraction += out.clip_fraction;
            stats.grad_norm += out.grad_norm;
            stats.actor_grad_norm += out.actor_grad_norm;
        }
    }
    if stats.updates > 0 {
        let u = stats.updates as f64;
        stats.policy_loss /= u;
        stats.value_loss /= u;
        stats.entropy /= u;
        if !stats.early_stopped {
            stats.approx_kl /= u;
        }
        stats.clip_fraction /= u;
        stats.grad_norm /= u;
        stats.actor_grad_norm /= u;
    }
    Ok(stats)
}

pub(crate) fn check_version(rollout: &RolloutBatch, version: u64) -> Result<()> {
    if rollout.policy_version != version {
        return Err(Error::StaleRollout {
            rollout: rollout.policy_version,
            policy: version,
        });
    }
    Ok(())
}

/// PPO update of a Gaussian policy and a state-value network sharing one
/// optimizer. `version` is the policy version; it must match the rollout's
/// and is incremented on success.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    rollout: &RolloutBatch,
    policy: &mut DiagGaussianPolicy,
    value: &mut Mlp,
    opt: &mut Adam,
    p: &PpoParams,
    version: &mut u64,
    rng: &mut SeededRng,
) -> Result<PpoStats> {
    check_version(rollout, *version)?;
    let obs = rollout.obs_tensor();
    let actions = rollout.actions_tensor();
    let old_lp = Tensor::column(rollout.log_probs().to_vec());
    let old_v = Tensor::column(rollout.values().to_vec());
    let returns = Tensor::column(
        rollout
            .returns()
            .ok_or_else(|| Error::InvalidArgument("returns not computed".into()))?
            .to_vec(),
    );
    let n_pol = policy.parameters().len();
    let stats = clipped_policy_epochs(rollout, p, rng, |idx, adv| {
        let mut g = Graph::new();
        let pp = policy.bind(&mut g);
        let vp = value.bind(&mut g);
        let s = g.constant(obs.gather_rows(idx));
        let lp = policy.log_prob_graph(&mut g, &pp, s, &actions.gather_rows(idx))?;
        let (pl, ratio) = clipped_surrogate_graph(&mut g, lp, &old_lp.gather_rows(idx), adv, p.clip)?;
        let (kl, cf) = ratio_stats(g.value(ratio)?, p.clip);
        let v = value.forward_graph(&mut g, &vp, s)?;
        let vl = clipped_value_loss_graph(&mut g, v, &old_v.gather_rows(idx), &returns.gather_rows(idx), p.value_clip)?;
        let ent = policy.entropy_graph(&mut g, &pp)?;
        let vl_s = g.mul_scalar(vl, p.value_coef)?;
        let ent_s = g.mul_scalar(ent, -p.entropy_coef)?;
        let l = g.add(pl, vl_s)?;
        let loss = g.add(l, ent_s)?;
        let mut out = MinibatchOutcome {
            policy_loss: g.value(pl)?.item(),
            value_loss: g.value(vl)?.item(),
            entropy: g.value(ent)?.item(),
            approx_kl: kl,
            clip_fraction: cf,
            ..Default::default()
        };
        if kl > p.desired_kl {
            return Ok(out);
        }
        let mut grads = g.backward_scalar(loss)?;
        let mut all = grads.collect(&pp);
        out.actor_grad_norm = global_norm(&all);
        all.extend(grads.collect(&vp));
        let mut params: Vec<&mut Tensor> = policy.parameters_mut();
        params.extend(value.parameters_mut());
        debug_assert_eq!(params.len(), n_pol + vp.len());
        out.grad_norm = opt.step_params(&mut params, all)?;
        out.applied = true;
        Ok(out)
    })?;
    *version += 1;
    Ok(stats)
}
