use std::f64::consts::PI;

use rand::Rng;

use crate::autodiff::Graph;
use crate::diffusion::{sample_action_graph, ChainNoise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nets::{Module, NoisePredictor, TwinCritic};
use crate::tensor::Tensor;
use crate::SeededRng;

/// Diagonal-covariance variance floor for the entropy proxy.
pub const GMM_VAR_FLOOR: f64 = 1e-4;
pub const GMM_EM_ITERS: usize = 10;
const KMEANS_ITERS: usize = 10;

#[derive(Clone, Debug)]
pub struct DacerGrads {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    /// `‖∂L/∂a^{k−1}‖` for `k = K, …, 1` (the output of each denoising step).
    pub step_norms: Vec<f64>,
}

/// `−mean min(Q1, Q2)(s, a(θ))` with `a(θ)` the full differentiable reverse
/// chain. Critics are frozen.
pub fn dacer_policy_grads(
    np: &NoisePredictor,
    critics: &TwinCritic,
    states: &Tensor,
    sched: &NoiseSchedule,
    noise: &ChainNoise,
) -> Result<DacerGrads> {
    let k = sched.steps();
    let mut g = Graph::new();
    let p = np.bind(&mut g);
    let s = g.constant(states.clone());
    let chain = match sample_action_graph(&mut g, np, &p, s, sched, noise) {
        Ok(c) => c,
        Err(e) if e.is_numeric() => {
            return Err(Error::ExplodingChain {
                steps: k,
                norms: vec![f64::NAN; k],
            })
        }
        Err(e) => return Err(e),
    };
    let q = critics.min_q_graph_frozen(&mut g, s, chain.action)?;
    let m = g.mean(q)?;
    let loss = g.neg(m)?;
    let value = g.value(loss)?.item();
    let mut grads = g.backward_scalar(loss)?;
    let step_norms: Vec<f64> = chain.chain[1..]
        .iter()
        .map(|&v| if grads.reached(v) { grads.wrt(v).norm_sq().sqrt() } else { 0.0 })
        .collect();
    let pg = grads.collect(&p);
    if !value.is_finite() || pg.iter().any(|t| !t.is_finite()) || step_norms.iter().any(|n| !n.is_finite()) {
        return Err(Error::ExplodingChain { steps: k, norms: step_norms });
    }
    Ok(DacerGrads {
        loss: value,
        grads: pg,
        step_norms,
    })
}

/// `α`, the latest entropy estimate and how many times `α` has been updated.
#[derive(Clone, Debug, PartialEq)]
pub struct DacerEntropyState {
    pub alpha: f64,
    pub entropy: Option<f64>,
    pub updates: u64,
}

impl DacerEntropyState {
    pub fn new(alpha: f64) -> Self {
        DacerEntropyState {
            alpha,
            entropy: None,
            updates: 0,
        }
    }

    /// Standard deviation of the exploration noise `a + α N(0, I)`; a
    /// negative `α` switches the noise off.
    pub fn noise_scale(&self) -> f64 {
        self.alpha.max(0.0)
    }
}

/// `α′ = α − λ_H (Ĥ − H̄)` using the stored estimate `Ĥ`.
pub fn dacer_alpha_update(state: &DacerEntropyState, target_entropy: f64, lr: f64) -> Result<DacerEntropyState> {
    let h = state
        .entropy
        .ok_or_else(|| Error::InvalidArgument("no entropy estimate available".into()))?;
    let alpha = state.alpha - lr * (h - target_entropy);
    if !alpha.is_finite() {
        return Err(Error::Numeric("non-finite exploration parameter".into()));
    }
    Ok(DacerEntropyState {
        alpha,
        entropy: state.entropy,
        updates: state.updates + 1,
    })
}

/// Fitted diagonal Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

impl Gmm {
    fn component_log_pdfs(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let mut lp = self.weights[c].max(1e-300).ln();
            for (j, xv) in x.iter().enumerate() {
                let v = self.vars[c][j];
                let d = xv - self.means[c][j];
                lp += -0.5 * ((2.0 * PI * v).ln() + d * d / v);
            }
            *o = lp;
        }
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.weights.len()];
        self.component_log_pdfs(x, &mut buf);
        log_sum_exp(&buf)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means initialization then `GMM_EM_ITERS` EM iterations with diagonal
/// covariances floored at `GMM_VAR_FLOOR`. Empty clusters are re-seeded at a
/// random sample.
pub fn fit_gmm(samples: &Tensor, m: usize, rng: &mut SeededRng) -> Result<Gmm> {
    let n = samples.rows();
    let d = samples.cols();
    if m == 0 || n < 10 * m {
        return Err(Error::InvalidArgument(format!(
            "need at least {} samples for {} components, got {}",
            10 * m,
            m,
            n
        )));
    }
    let row = |i: usize| samples.row_slice(i);
    let mut means: Vec<Vec<f64>> = (0..m).map(|_| row(rng.random_range(0..n)).to_vec()).collect();
    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_ITERS {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = (0..m)
                .min_by(|&x, &y| sq_dist(row(i), &means[x]).total_cmp(&sq_dist(row(i), &means[y])))
                .expect("m > 0");
        }
        for (c, mean) in means.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            if members.is_empty() {
                *mean = row(rng.random_range(0..n)).to_vec();
                continue;
            }
            for j in 0..d {
                mean[j] = members.iter().map(|&i| row(i)[j]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    let mut gmm = Gmm {
        weights: vec![1.0 / m as f64; m],
        means,
        vars: vec![vec![1.0; d]; m],
    };
    // initial variances from the hard assignment
    for c in 0..m {
        let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        gmm.weights[c] = members.len() as f64 / n as f64;
        for j in 0..d {
            let mu = gmm.means[c][j];
            let var = members.iter().map(|&i| (row(i)[j] - mu).powi(2)).sum::<f64>() / members.len() as f64;
            gmm.vars[c][j] = var.max(GMM_VAR_FLOOR);
        }
    }
    let mut resp = vec![0.0; n * m];
    let mut buf = vec![0.0; m];
    for _ in 0..GMM_EM_ITERS {
        for i in 0..n {
            gmm.component_log_pdfs(row(i), &mut buf);
            let lse = log_sum_exp(&buf);
            for c in 0..m {
                resp[i * m + c] = (buf[c] - lse).exp();
            }
        }
        for c in 0..m {
            let nk: f64 = (0..n).map(|i| resp[i * m + c]).sum();
            if nk < 1e-8 {
                gmm.means[c] = row(rng.random_range(0..n)).to_vec();
                gmm.vars[c] = vec![1.0; d];
                gmm.weights[c] = 1.0 / n as f64;
                continue;
            }
            gmm.weights[c] = nk / n as f64;
            for j in 0..d {
                let mu = (0..n).map(|i| resp[i * m + c] * row(i)[j]).sum::<f64>() / nk;
                let var = (0..n).map(|i| resp[i * m + c] * (row(i)[j] - mu).powi(2)).sum::<f64>() / nk;
                gmm.means[c][j] = mu;
                gmm.vars[c][j] = var.max(GMM_VAR_FLOOR);
            }
        }
        let total: f64 = gmm.weights.iter().sum();
        gmm.weights.iter_mut().for_each(|w| *w /= total);
    }
    Ok(gmm)
}

/// Entropy proxy `Ĥ = −mean log p_GMM(x)` over the fitting samples.
pub fn dacer_entropy_estimate(samples: &Tensor, m: usize, rng: &mut SeededRng) -> Result<f64> {
    let gmm = fit_gmm(samples, m, rng)?;
    let n = samples.rows();
    let total: f64 = (0..n).map(|i| gmm.log_pdf(samples.row_slice(i))).sum();
    Ok(-total / n as f64)
}
