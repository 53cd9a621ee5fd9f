use rand::Rng;

use super::dipo::bc_step;
use crate::diffusion::{sample_action, NoiseSchedule};
use crate::error::Result;
use crate::nets::{ActionValue, Adam, NoisePredictor};
use crate::tensor::Tensor;
use crate::SeededRng;

/// Advantage weight: `A = Q − V` when non-negative, else 0.
pub fn qvpo_weight(q: f64, v: f64) -> f64 {
    let a = q - v;
    if a >= 0.0 {
        a
    } else {
        0.0
    }
}

/// Exponential moving estimate of the mean and standard deviation of Q,
/// used to put weights on a fixed scale.
#[derive(Clone, Debug, PartialEq)]
pub struct QNormalizer {
    pub mean: f64,
    pub std: f64,
    pub rate: f64,
}

impl QNormalizer {
    /// Starts at mean 0, std 1.
    pub fn new(rate: f64) -> Self {
        QNormalizer { mean: 0.0, std: 1.0, rate }
    }

    pub fn update(&mut self, q: &[f64]) {
        if q.is_empty() {
            return;
        }
        let n = q.len() as f64;
        let m = q.iter().sum::<f64>() / n;
        let s = (q.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        self.mean += self.rate * (m - self.mean);
        self.std += self.rate * (s - self.std);
    }

    pub fn normalize(&self, q: f64) -> f64 {
        (q - self.mean) / self.std.max(1e-6)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QvpoParams {
    /// Candidates sampled per state.
    pub diffusion_samples: usize,
    /// Top candidates per state kept for the loss.
    pub batch_samples: usize,
    /// Fraction of candidates replaced by uniform random actions.
    pub entropy_weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QvpoOutcome {
    /// `None` when every weight was zero and the step was skipped.
    pub loss: Option<f64>,
    pub grad_norm: f64,
    pub mean_weight: f64,
}

/// Candidate set for one update: per state, `N_d` diffusion samples with a
/// `E_w` share swapped for uniform random actions, scored by the critic.
#[derive(Clone, Debug)]
pub struct QvpoCandidates {
    /// `[B · N_d, d]`, state `i` owns rows `i·N_d .. (i+1)·N_d`.
    pub actions: Tensor,
    pub q: Vec<f64>,
}

pub fn qvpo_candidates(
    states: &Tensor,
    np: &NoisePredictor,
    critic: &impl ActionValue,
    p: &QvpoParams,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<QvpoCandidates> {
    let nd = p.diffusion_samples;
    let rep = states.repeat_rows(nd);
    let mut actions = sample_action(np, &rep, sched, rng)?;
    let n_rand = (p.entropy_weight * nd as f64).round() as usize;
    for i in 0..states.rows() {
        for j in 0..n_rand.min(nd) {
            for v in actions.row_slice_mut(i * nd + j) {
                *v = rng.random_range(-1.0..=1.0);
            }
        }
    }
    let q = critic.q_values(&rep, &actions)?.into_data();
    Ok(QvpoCandidates { actions, q })
}

/// Selection and weights from scored candidates: per state the top `N_b`
/// by normalized Q, weighted by `qvpo_weight(Q, V)` with `V` the mean
/// normalized Q over that state's candidates. Returns row indices into the
/// candidate set and the weights.
pub fn qvpo_select(q_norm: &[f64], n_states: usize, p: &QvpoParams) -> (Vec<usize>, Vec<f64>) {
    let nd = p.diffusion_samples;
    let mut idx = Vec::with_capacity(n_states * p.batch_samples);
    let mut w = Vec::with_capacity(n_states * p.batch_samples);
    for i in 0..n_states {
        let qs = &q_norm[i * nd..(i + 1) * nd];
        let v = qs.iter().sum::<f64>() / nd as f64;
        let mut order: Vec<usize> = (0..nd).collect();
        order.sort_by(|&a, &b| qs[b].total_cmp(&qs[a]).then(a.cmp(&b)));
        for &j in order.iter().take(p.batch_samples) {
            idx.push(i * nd + j);
            w.push(qvpo_weight(qs[j], v));
        }
    }
    (idx, w)
}

/// One Q-weighted denoising-loss step. Weights are constants (no gradient).
#[allow(clippy::too_many_arguments)]
pub fn qvpo_update(
    states: &Tensor,
    np: &mut NoisePredictor,
    opt: &mut Adam,
    critic: &impl ActionValue,
    p: &QvpoParams,
    norm: &mut QNormalizer,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<QvpoOutcome> {
    let cands = qvpo_candidates(states, np, critic, p, sched, rng)?;
    norm.update(&cands.q);
    let qn: Vec<f64> = cands.q.iter().map(|&q| norm.normalize(q)).collect();
    let (idx, w) = qvpo_select(&qn, states.rows(), p);
    let mean_weight = w.iter().sum::<f64>() / w.len().max(1) as f64;
    if w.iter().all(|&x| x == 0.0) {
        log::info!("all advantage weights are zero; skipping policy update");
        return Ok(QvpoOutcome {
            loss: None,
            grad_norm: 0.0,
            mean_weight,
        });
    }
    let s_rows: Vec<usize> = idx.iter().map(|&r| r / p.diffusion_samples).collect();
    let s = states.gather_rows(&s_rows);
    let a = cands.actions.gather_rows(&idx);
    let (loss, grad_norm) = bc_step(np, opt, sched, &s, &a, Some(&Tensor::column(w)), rng)?;
    Ok(QvpoOutcome {
        loss: Some(loss),
        grad_norm,
        mean_weight,
    })
}
