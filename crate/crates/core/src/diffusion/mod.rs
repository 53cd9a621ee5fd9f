//! DDPM machinery for diffusion actors: the noise schedule, forward noising,
//! the reverse sampler (the policy's action generator), the denoising
//! behavior-cloning loss and the ε-to-score conversion.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{Module, NoisePredictor};
use crate::tensor::Tensor;
use crate::{randn, SeededRng};
use rand::Rng;

/// Per-step coefficients for steps `k = 1..=K` (stored at index `k - 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced `β` from `beta_min` to `beta_max`, posterior-variance
    /// `σ_k = sqrt(β_k (1 − ᾱ_{k−1}) / (1 − ᾱ_k))`, which makes `σ_1 = 0`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("diffusion needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_min <= beta_max < 1, got [{}, {}]",
                beta_min, beta_max
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])).sqrt()
            })
            .collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "diffusion step {} outside 1..={}",
                k,
                self.steps()
            )));
        }
        Ok(k - 1)
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k - 1]
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigmas[k - 1]
    }

    /// Coefficient `(1 − α_k) / sqrt(1 − ᾱ_k)` multiplying `ε̂` in a reverse step.
    pub fn eps_coef(&self, k: usize) -> f64 {
        (1.0 - self.alpha(k)) / (1.0 - self.alpha_bar(k)).sqrt()
    }
}

/// `make_schedule`: alias for [`NoiseSchedule::linear`].
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_min, beta_max)
}

/// `a^k = sqrt(ᾱ_k) a0 + sqrt(1 − ᾱ_k) ε`.
pub fn forward_noising(a0: &Tensor, k: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.idx(k)?;
    let (c0, c1) = (sched.alpha_bar(k).sqrt(), (1.0 - sched.alpha_bar(k)).sqrt());
    a0.zip_map(eps, |a, e| c0 * a + c1 * e)
}

/// Row-wise forward noising with a separate step per row.
pub fn forward_noising_rows(a0: &Tensor, ks: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if ks.len() != a0.rows() || a0.shape() != eps.shape() {
        return Err(Error::Tensor("forward noising batch mismatch".into()));
    }
    let mut out = a0.clone();
    for (i, &k) in ks.iter().enumerate() {
        sched.idx(k)?;
        let (c0, c1) = (sched.alpha_bar(k).sqrt(), (1.0 - sched.alpha_bar(k)).sqrt());
        for (o, e) in out.row_slice_mut(i).iter_mut().zip(eps.row_slice(i)) {
            *o = c0 * *o + c1 * e;
        }
    }
    Ok(out)
}

/// `a^{k−1} = (a^k − (1−α_k)/sqrt(1−ᾱ_k) ε̂) / sqrt(α_k) + σ_k · noise`.
/// `noise` is ignored when `σ_k = 0`.
pub fn reverse_step(a_k: &Tensor, eps_hat: &Tensor, k: usize, sched: &NoiseSchedule, noise: Option<&Tensor>) -> Result<Tensor> {
    sched.idx(k)?;
    let (c, inv) = (sched.eps_coef(k), 1.0 / sched.alpha(k).sqrt());
    let mut out = a_k.zip_map(eps_hat, |a, e| (a - c * e) * inv)?;
    let sigma = sched.sigma(k);
    if sigma > 0.0 {
        let n = noise.ok_or_else(|| Error::InvalidArgument(format!("step {} needs noise", k)))?;
        out = out.zip_map(n, |a, z| a + sigma * z)?;
    }
    Ok(out)
}

/// Differentiable counterpart of [`reverse_step`].
pub fn reverse_step_graph(
    g: &mut Graph,
    a_k: Var,
    eps_hat: Var,
    k: usize,
    sched: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Var> {
    sched.idx(k)?;
    let scaled = g.mul_scalar(eps_hat, sched.eps_coef(k))?;
    let diff = g.sub(a_k, scaled)?;
    let mut out = g.mul_scalar(diff, 1.0 / sched.alpha(k).sqrt())?;
    let sigma = sched.sigma(k);
    if sigma > 0.0 {
        let n = noise.ok_or_else(|| Error::InvalidArgument(format!("step {} needs noise", k)))?;
        out = g.add_const(out, n.scale(sigma))?;
    }
    Ok(out)
}

/// `score = −ε̂ / sqrt(1 − ᾱ_k)`.
pub fn score_from_eps(eps_hat: &Tensor, k: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.idx(k)?;
    Ok(eps_hat.scale(-1.0 / (1.0 - sched.alpha_bar(k)).sqrt()))
}

/// All Gaussian draws consumed by one reverse chain, fixed up front so the
/// chain is a pure function of the predictor's parameters.
#[derive(Clone, Debug)]
pub struct ChainNoise {
    /// `a^K`.
    pub initial: Tensor,
    /// Noise for step `k` at index `k − 1`; `None` where `σ_k = 0`.
    pub steps: Vec<Option<Tensor>>,
}

impl ChainNoise {
    pub fn draw(batch: usize, action_dim: usize, sched: &NoiseSchedule, rng: &mut SeededRng) -> Self {
        let initial = randn(&[batch, action_dim], rng);
        let steps = (1..=sched.steps())
            .rev()
            .map(|k| (sched.sigma(k) > 0.0).then(|| randn(&[batch, action_dim], rng)))
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        ChainNoise { initial, steps }
    }
}

fn check_predictor(np: &NoisePredictor, sched: &NoiseSchedule) -> Result<()> {
    if np.steps() != sched.steps() {
        return Err(Error::InvalidArgument(format!(
            "predictor conditioned on {} steps but schedule has {}",
            np.steps(),
            sched.steps()
        )));
    }
    Ok(())
}

/// Runs the full reverse chain from `a^K ~ N(0, I)` and clamps to `[-1, 1]`.
pub fn sample_action(np: &NoisePredictor, s: &Tensor, sched: &NoiseSchedule, rng: &mut SeededRng) -> Result<Tensor> {
    let noise = ChainNoise::draw(s.rows(), np.action_dim(), sched, rng);
    sample_action_with_noise(np, s, sched, &noise)
}

pub fn sample_action_with_noise(np: &NoisePredictor, s: &Tensor, sched: &NoiseSchedule, noise: &ChainNoise) -> Result<Tensor> {
    check_predictor(np, sched)?;
    let mut a = noise.initial.clone();
    for k in (1..=sched.steps()).rev() {
        let eps_hat = np.predict(&a, s, &[k])?;
        a = reverse_step(&a, &eps_hat, k, sched, noise.steps[k - 1].as_ref())?;
        if !a.is_finite() {
            return Err(Error::Numeric(format!("non-finite action at denoising step {}", k)));
        }
    }
    Ok(a.map(|v| v.clamp(-1.0, 1.0)))
}

/// Graph handles for a differentiable reverse chain.
#[derive(Clone, Debug)]
pub struct ChainVars {
    /// Clamped final action.
    pub action: Var,
    /// `a^K, a^{K−1}, …, a^0` before clamping.
    pub chain: Vec<Var>,
}

/// Differentiable reverse chain (backpropagation through every denoising step).
pub fn sample_action_graph(
    g: &mut Graph,
    np: &NoisePredictor,
    params: &[Var],
    s: Var,
    sched: &NoiseSchedule,
    noise: &ChainNoise,
) -> Result<ChainVars> {
    check_predictor(np, sched)?;
    let mut a = g.constant(noise.initial.clone());
    let mut chain = vec![a];
    for k in (1..=sched.steps()).rev() {
        let eps_hat = np
            .predict_graph(g, params, a, s, &[k])
            .map_err(|e| step_error(e, k))?;
        a = reverse_step_graph(g, a, eps_hat, k, sched, noise.steps[k - 1].as_ref()).map_err(|e| step_error(e, k))?;
        chain.push(a);
    }
    let action = g.clamp(a, -1.0, 1.0)?;
    Ok(ChainVars { action, chain })
}

fn step_error(e: Error, k: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Numeric(format!("non-finite action at denoising step {}", k)),
        other => other,
    }
}

/// Draws for one evaluation of the denoising loss: a step per row and the
/// Gaussian noise it adds.
#[derive(Clone, Debug)]
pub struct BcDraws {
    pub ks: Vec<usize>,
    pub eps: Tensor,
}

impl BcDraws {
    /// Independent uniform `k ∈ {1..K}` per row.
    pub fn draw(batch: usize, action_dim: usize, steps: usize, rng: &mut SeededRng) -> Self {
        let ks = (0..batch).map(|_| rng.random_range(1..=steps)).collect();
        BcDraws {
            ks,
            eps: randn(&[batch, action_dim], rng),
        }
    }
}

/// Denoising loss `mean_i w_i · mean_j (ε_ij − ε_θ(a^k_i, s_i, k_i)_j)²`
/// (`w_i = 1` when `weights` is `None`).
#[allow(clippy::too_many_arguments)]
pub fn bc_loss_graph(
    g: &mut Graph,
    np: &NoisePredictor,
    params: &[Var],
    states: &Tensor,
    targets: &Tensor,
    draws: &BcDraws,
    sched: &NoiseSchedule,
    weights: Option<&Tensor>,
) -> Result<Var> {
    if targets.rows() == 0 {
        return Err(Error::InvalidArgument("behavior-cloning loss on an empty batch".into()));
    }
    check_predictor(np, sched)?;
    let noisy = forward_noising_rows(targets, &draws.ks, &draws.eps, sched)?;
    let a_k = g.constant(noisy);
    let s = g.constant(states.clone());
    let pred = np.predict_graph(g, params, a_k, s, &draws.ks)?;
    let eps = g.constant(draws.eps.clone());
    let diff = g.sub(eps, pred)?;
    let sq = g.square(diff)?;
    match weights {
        None => g.mean(sq),
        Some(w) => {
            if w.len() != targets.rows() {
                return Err(Error::Tensor("one weight per row required".into()));
            }
            let per_row = g.mean_axis(sq, 1)?;
            let weighted = g.mul_const(per_row, w.clone().reshape(&[w.len(), 1])?)?;
            g.mean(weighted)
        }
    }
}

/// Value and parameter gradients of the denoising loss.
pub fn bc_loss_and_grads(
    np: &NoisePredictor,
    states: &Tensor,
    targets: &Tensor,
    draws: &BcDraws,
    sched: &NoiseSchedule,
    weights: Option<&Tensor>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = np.bind(&mut g);
    let loss = bc_loss_graph(&mut g, np, &p, states, targets, draws, sched, weights)?;
    let value = g.value(loss)?.item();
    let mut grads = g.backward_scalar(loss)?;
    Ok((value, grads.collect(&p)))
}

/// Denoising loss value on fresh draws.
pub fn bc_loss(np: &NoisePredictor, states: &Tensor, targets: &Tensor, sched: &NoiseSchedule, rng: &mut SeededRng) -> Result<f64> {
    if targets.rows() == 0 {
        return Err(Error::InvalidArgument("behavior-cloning loss on an empty batch".into()));
    }
    let draws = BcDraws::draw(targets.rows(), np.action_dim(), sched.steps(), rng);
    let mut g = Graph::new();
    let p = np.bind_frozen(&mut g);
    let loss = bc_loss_graph(&mut g, np, &p, states, targets, &draws, sched, None)?;
    Ok(g.value(loss)?.item())
}
