use std::f64::consts::PI;

use rand::{Rng, SeedableRng};

use super::ppo::{check_version, clipped_policy_epochs, clipped_surrogate_graph, clipped_value_loss_graph, MinibatchOutcome, PpoParams, PpoStats};
use crate::autodiff::{Graph, Var};
use crate::buffers::RolloutBatch;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nets::{global_norm, Adam, Mlp, Module, NoisePredictor};
use crate::tensor::Tensor;
use crate::{randn, SeededRng};

/// Largest accepted `|log det|` of the flow.
pub const MAX_LOG_DET: f64 = 50.0;

/// Invertible dummy-action flow. The pair `(x, y)` starts at `(ε_x, ε_y)`
/// and each reverse step `k = K..1` applies
///
/// 1. `x ← (x − c_k ε_θ(y, s, k)) / √α_k`
/// 2. `y ← (y − c_k ε_θ(x, s, k)) / √α_k`
/// 3. `x ← p x + (1 − p) y`, then `y ← p y + (1 − p) x`
///
/// Every sub-step is triangular, so the Jacobian determinant is the product
/// of the diagonal scales and does not depend on the predictor.
#[derive(Clone, Copy, Debug)]
pub struct GenpoFlow<'a> {
    pub np: &'a NoisePredictor,
    pub sched: &'a NoiseSchedule,
    pub mixing: f64,
}

#[derive(Clone, Debug)]
pub struct FlowOutput {
    pub x: Tensor,
    pub y: Tensor,
    pub log_det: f64,
}

impl<'a> GenpoFlow<'a> {
    pub fn new(np: &'a NoisePredictor, sched: &'a NoiseSchedule, mixing: f64) -> Result<Self> {
        if !(mixing > 0.0 && mixing <= 1.0) {
            return Err(Error::InvalidArgument(format!("mixing coefficient {} must lie in (0, 1]", mixing)));
        }
        if np.steps() != sched.steps() {
            return Err(Error::InvalidArgument(format!(
                "predictor conditioned on {} steps but schedule has {}",
                np.steps(),
                sched.steps()
            )));
        }
        Ok(GenpoFlow { np, sched, mixing })
    }

    /// `log |det ∂(x, y)/∂(ε_x, ε_y)|` for action dimension `d`.
    pub fn log_det(&self, d: usize) -> f64 {
        let d = d as f64;
        (1..=self.sched.steps())
            .map(|k| -d * self.sched.alpha(k).ln() + 2.0 * d * self.mixing.ln())
            .sum()
    }

    fn affine(&self, v: &Tensor, other: &Tensor, s: &Tensor, k: usize) -> Result<Tensor> {
        let e = self.np.predict(other, s, &[k])?;
        let (c, r) = (self.sched.eps_coef(k), self.sched.alpha(k).sqrt());
        v.zip_map(&e, |v, e| (v - c * e) / r)
    }

    fn unaffine(&self, v: &Tensor, other: &Tensor, s: &Tensor, k: usize) -> Result<Tensor> {
        let e = self.np.predict(other, s, &[k])?;
        let (c, r) = (self.sched.eps_coef(k), self.sched.alpha(k).sqrt());
        v.zip_map(&e, |v, e| v * r + c * e)
    }

    pub fn x_step(&self, x: &Tensor, y: &Tensor, s: &Tensor, k: usize) -> Result<Tensor> {
        self.affine(x, y, s, k)
    }

    pub fn y_step(&self, y: &Tensor, x: &Tensor, s: &Tensor, k: usize) -> Result<Tensor> {
        self.affine(y, x, s, k)
    }

    pub fn undo_x(&self, x: &Tensor, y: &Tensor, s: &Tensor, k: usize) -> Result<Tensor> {
        self.unaffine(x, y, s, k)
    }

    pub fn undo_y(&self, y: &Tensor, x: &Tensor, s: &Tensor, k: usize) -> Result<Tensor> {
        self.unaffine(y, x, s, k)
    }

    pub fn mix(&self, x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let p = self.mixing;
        let x2 = x.zip_map(y, |x, y| p * x + (1.0 - p) * y)?;
        let y2 = y.zip_map(&x2, |y, x| p * y + (1.0 - p) * x)?;
        Ok((x2, y2))
    }

    pub fn unmix(&self, x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let p = self.mixing;
        let y0 = y.zip_map(x, |y, x| (y - (1.0 - p) * x) / p)?;
        let x0 = x.zip_map(&y0, |x, y| (x - (1.0 - p) * y) / p)?;
        Ok((x0, y0))
    }

    pub fn forward(&self, eps_x: &Tensor, eps_y: &Tensor, s: &Tensor) -> Result<FlowOutput> {
        let log_det = self.log_det(eps_x.cols());
        check_log_det(log_det)?;
        let (mut x, mut y) = (eps_x.clone(), eps_y.clone());
        for k in (1..=self.sched.steps()).rev() {
            x = self.x_step(&x, &y, s, k)?;
            y = self.y_step(&y, &x, s, k)?;
            (x, y) = self.mix(&x, &y)?;
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Numeric(format!("non-finite flow state at step {}", k)));
            }
        }
        Ok(FlowOutput { x, y, log_det })
    }

    /// Exact inverse of `forward`: sub-steps undone in reverse order.
    pub fn inverse(&self, x: &Tensor, y: &Tensor, s: &Tensor) -> Result<(Tensor, Tensor)> {
        let (mut x, mut y) = (x.clone(), y.clone());
        for k in 1..=self.sched.steps() {
            (x, y) = self.unmix(&x, &y)?;
            y = self.undo_y(&y, &x, s, k)?;
            x = self.undo_x(&x, &y, s, k)?;
        }
        Ok((x, y))
    }

    fn affine_graph(&self, g: &mut Graph, params: &[Var], v: Var, other: Var, s: Var, k: usize, invert: bool) -> Result<Var> {
        let e = self.np.predict_graph(g, params, other, s, &[k])?;
        let (c, r) = (self.sched.eps_coef(k), self.sched.alpha(k).sqrt());
        if invert {
            let a = g.mul_scalar(v, r)?;
            let b = g.mul_scalar(e, c)?;
            g.add(a, b)
        } else {
            let b = g.mul_scalar(e, c)?;
            let d = g.sub(v, b)?;
            g.mul_scalar(d, 1.0 / r)
        }
    }

    fn lerp_graph(g: &mut Graph, a: Var, b: Var, p: f64) -> Result<Var> {
        let pa = g.mul_scalar(a, p)?;
        let pb = g.mul_scalar(b, 1.0 - p)?;
        g.add(pa, pb)
    }

    /// Differentiable `forward` from fixed base noise.
    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], s: Var, eps_x: &Tensor, eps_y: &Tensor) -> Result<(Var, Var)> {
        let p = self.mixing;
        let mut x = g.constant(eps_x.clone());
        let mut y = g.constant(eps_y.clone());
        for k in (1..=self.sched.steps()).rev() {
            x = self.affine_graph(g, params, x, y, s, k, false)?;
            y = self.affine_graph(g, params, y, x, s, k, false)?;
            x = Self::lerp_graph(g, x, y, p)?;
            y = Self::lerp_graph(g, y, x, p)?;
        }
        Ok((x, y))
    }

    /// Differentiable `inverse` from a fixed pair.
    pub fn inverse_graph(&self, g: &mut Graph, params: &[Var], s: Var, x: &Tensor, y: &Tensor) -> Result<(Var, Var)> {
        let p = self.mixing;
        let mut x = g.constant(x.clone());
        let mut y = g.constant(y.clone());
        for k in 1..=self.sched.steps() {
            let t = g.mul_scalar(x, -(1.0 - p))?;
            let t = g.add(y, t)?;
            y = g.mul_scalar(t, 1.0 / p)?;
            let t = g.mul_scalar(y, -(1.0 - p))?;
            let t = g.add(x, t)?;
            x = g.mul_scalar(t, 1.0 / p)?;
            y = self.affine_graph(g, params, y, x, s, k, true)?;
            x = self.affine_graph(g, params, x, y, s, k, true)?;
        }
        Ok((x, y))
    }

    /// Differentiable `log π(x, y | s)` per row, `[B, 1]`.
    pub fn log_prob_graph(&self, g: &mut Graph, params: &[Var], s: Var, x: &Tensor, y: &Tensor) -> Result<Var> {
        let d = x.cols();
        let (ex, ey) = self.inverse_graph(g, params, s, x, y)?;
        let both = g.concat(&[ex, ey], 1)?;
        let sq = g.square(both)?;
        let ss = g.sum_axis(sq, 1)?;
        let half = g.mul_scalar(ss, -0.5)?;
        g.add_scalar(half, -(d as f64) * (2.0 * PI).ln() - self.log_det(d))
    }

    /// `log π(x, y | s)` per row.
    pub fn log_prob(&self, x: &Tensor, y: &Tensor, s: &Tensor) -> Result<Tensor> {
        let (ex, ey) = self.inverse(x, y, s)?;
        let ld = self.log_det(x.cols());
        let lp: Vec<f64> = (0..x.rows())
            .map(|i| genpo_logprob(ex.row_slice(i), ey.row_slice(i), ld))
            .collect();
        Ok(Tensor::column(lp))
    }
}

fn check_log_det(ld: f64) -> Result<()> {
    if !ld.is_finite() || ld.abs() > MAX_LOG_DET {
        return Err(Error::Numeric(format!("flow log-determinant {:.3} exceeds {}", ld, MAX_LOG_DET)));
    }
    Ok(())
}

pub fn genpo_forward(eps_x: &Tensor, eps_y: &Tensor, s: &Tensor, flow: &GenpoFlow) -> Result<FlowOutput> {
    flow.forward(eps_x, eps_y, s)
}

pub fn genpo_inverse(x: &Tensor, y: &Tensor, s: &Tensor, flow: &GenpoFlow) -> Result<(Tensor, Tensor)> {
    flow.inverse(x, y, s)
}

/// `log N((ε_x, ε_y) | 0, I) − log det` for one pair.
pub fn genpo_logprob(eps_x: &[f64], eps_y: &[f64], log_det: f64) -> f64 {
    let n = (eps_x.len() + eps_y.len()) as f64;
    let sq: f64 = eps_x.iter().chain(eps_y).map(|v| v * v).sum();
    -0.5 * sq - 0.5 * n * (2.0 * PI).ln() - log_det
}

/// Environment action `clamp((x + y) / 2, −1, 1)`.
pub fn genpo_action(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    x.zip_map(y, |x, y| (0.5 * (x + y)).clamp(-1.0, 1.0))
}

/// A sampled pair with its log-density.
#[derive(Clone, Debug)]
pub struct GenpoSample {
    pub action: Tensor,
    /// `[x | y]`, `[B, 2d]`.
    pub pair: Tensor,
    pub log_prob: Tensor,
}

pub fn genpo_sample(flow: &GenpoFlow, s: &Tensor, rng: &mut SeededRng) -> Result<GenpoSample> {
    let d = flow.np.action_dim();
    let ex = randn(&[s.rows(), d], rng);
    let ey = randn(&[s.rows(), d], rng);
    let out = flow.forward(&ex, &ey, s)?;
    let lp: Vec<f64> = (0..s.rows())
        .map(|i| genpo_logprob(ex.row_slice(i), ey.row_slice(i), out.log_det))
        .collect();
    Ok(GenpoSample {
        action: genpo_action(&out.x, &out.y)?,
        pair: Tensor::hstack(&[&out.x, &out.y])?,
        log_prob: Tensor::column(lp),
    })
}

/// Splits a `[B, 2d]` pair tensor into `(x, y)`.
pub fn split_pair(pair: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = pair.cols();
    if n % 2 != 0 {
        return Err(Error::InvalidArgument(format!("pair width {} is odd", n)));
    }
    let d = n / 2;
    let mut x = Vec::with_capacity(pair.rows() * d);
    let mut y = Vec::with_capacity(pair.rows() * d);
    for i in 0..pair.rows() {
        let r = pair.row_slice(i);
        x.extend_from_slice(&r[..d]);
        y.extend_from_slice(&r[d..]);
    }
    Ok((Tensor::matrix(pair.rows(), d, x)?, Tensor::matrix(pair.rows(), d, y)?))
}

/// Dummy-pair divergence penalty `c · mean ‖x − y‖²` on a fresh forward
/// pass at `s`.
pub fn compress_penalty_graph(
    g: &mut Graph,
    flow: &GenpoFlow,
    params: &[Var],
    s: Var,
    eps_x: &Tensor,
    eps_y: &Tensor,
    coef: f64,
) -> Result<Var> {
    let (x, y) = flow.forward_graph(g, params, s, eps_x, eps_y)?;
    let d = g.sub(x, y)?;
    let sq = g.square(d)?;
    let per_row = g.sum_axis(sq, 1)?;
    let m = g.mean(per_row)?;
    g.mul_scalar(m, coef)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenpoParams {
    pub ppo: PpoParams,
    pub mixing: f64,
    pub compress: f64,
}

/// Clipped-surrogate update of the flow and value network; the ratio uses
/// the exact flow likelihood of the stored pairs (`aux` columns of the
/// rollout). Same versioning contract as `ppo_update`.
#[allow(clippy::too_many_arguments)]
pub fn genpo_update(
    rollout: &RolloutBatch,
    np: &mut NoisePredictor,
    sched: &NoiseSchedule,
    value: &mut Mlp,
    opt: &mut Adam,
    p: &GenpoParams,
    version: &mut u64,
    rng: &mut SeededRng,
) -> Result<PpoStats> {
    check_version(rollout, *version)?;
    let obs = rollout.obs_tensor();
    let (xs, ys) = split_pair(
        &rollout
            .aux_tensor()
            .ok_or_else(|| Error::InvalidArgument("rollout has no stored action pairs".into()))?,
    )?;
    let old_lp = Tensor::column(rollout.log_probs().to_vec());
    let old_v = Tensor::column(rollout.values().to_vec());
    let returns = Tensor::column(
        rollout
            .returns()
            .ok_or_else(|| Error::InvalidArgument("returns not computed".into()))?
            .to_vec(),
    );
    let d = np.action_dim();
    let mut noise_rng = SeededRng::seed_from_u64(rng.random());
    let stats = clipped_policy_epochs(rollout, &p.ppo, rng, |idx, adv| {
        let flow = GenpoFlow::new(np, sched, p.mixing)?;
        let mut g = Graph::new();
        let pp = np.bind(&mut g);
        let vp = value.bind(&mut g);
        let s = g.constant(obs.gather_rows(idx));
        let lp = flow.log_prob_graph(&mut g, &pp, s, &xs.gather_rows(idx), &ys.gather_rows(idx))?;
        let (pl, ratio) = clipped_surrogate_graph(&mut g, lp, &old_lp.gather_rows(idx), adv, p.ppo.clip)?;
        let r = g.value(ratio)?;
        let n = r.len() as f64;
        let kl = r.data().iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / n;
        let cf = r.data().iter().filter(|r| (*r - 1.0).abs() > p.ppo.clip).count() as f64 / n;
        let v = value.forward_graph(&mut g, &vp, s)?;
        let vl = clipped_value_loss_graph(&mut g, v, &old_v.gather_rows(idx), &returns.gather_rows(idx), p.ppo.value_clip)?;
        let ex = randn(&[idx.len(), d], &mut noise_rng);
        let ey = randn(&[idx.len(), d], &mut noise_rng);
        let cp = compress_penalty_graph(&mut g, &flow, &pp, s, &ex, &ey, p.compress)?;
        let vl_s = g.mul_scalar(vl, p.ppo.value_coef)?;
        let l = g.add(pl, vl_s)?;
        let loss = g.add(l, cp)?;
        let mut out = MinibatchOutcome {
            policy_loss: g.value(pl)?.item(),
            value_loss: g.value(vl)?.item(),
            entropy: -g.value(lp)?.mean(),
            approx_kl: kl,
            clip_fraction: cf,
            ..Default::default()
        };
        if !g.value(loss)?.item().is_finite() {
            return Err(Error::Numeric("non-finite clipped-surrogate loss".into()));
        }
        if kl > p.ppo.desired_kl {
            return Ok(out);
        }
        let mut grads = g.backward_scalar(loss)?;
        let mut all = grads.collect(&pp);
        out.actor_grad_norm = global_norm(&all);
        all.extend(grads.collect(&vp));
        let mut params: Vec<&mut Tensor> = np.parameters_mut();
        params.extend(value.parameters_mut());
        out.grad_norm = opt.step_params(&mut params, all)?;
        out.applied = true;
        Ok(out)
    })?;
    *version += 1;
    Ok(stats)
}
