use std::f64::consts::{LN_2, PI};

use super::{Activation, Mlp, Module};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{tanh, Tensor};
use crate::{randn, SeededRng};

/// Upper bound applied to log-densities wherever they feed a value target.
pub const LOG_PROB_CLAMP: f64 = 20.0;

const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;

fn half_log_two_pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

fn build_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

/// Deterministic `a = tanh(MLP(s))` actor used by DDPG and TD3.
#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicActor {
    net: Mlp,
}

impl DeterministicActor {
    pub fn new(obs_dim: usize, action_dim: usize, hidden: &[usize], activation: Activation, rng: &mut SeededRng) -> Result<Self> {
        let net = Mlp::new(&build_sizes(obs_dim, hidden, action_dim), activation, rng)?;
        Ok(DeterministicActor { net })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn act(&self, s: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward(s)?.map(tanh))
    }

    pub fn act_graph(&self, g: &mut Graph, params: &[Var], s: Var) -> Result<Var> {
        let h = self.net.forward_graph(g, params, s)?;
        g.tanh(h)
    }
}

impl Module for DeterministicActor {
    fn parameters(&self) -> Vec<&Tensor> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.parameters_mut()
    }
}

/// Tanh-squashed Gaussian with state-dependent mean and log-std (SAC actor).
#[derive(Clone, Debug, PartialEq)]
pub struct SquashedGaussianActor {
    net: Mlp,
    action_dim: usize,
}

impl SquashedGaussianActor {
    pub fn new(obs_dim: usize, action_dim: usize, hidden: &[usize], activation: Activation, rng: &mut SeededRng) -> Result<Self> {
        let net = Mlp::new(&build_sizes(obs_dim, hidden, 2 * action_dim), activation, rng)?;
        Ok(SquashedGaussianActor { net, action_dim })
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn squash_log_std(raw: f64) -> f64 {
        LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (tanh(raw) + 1.0)
    }

    /// `tanh(μ(s))`.
    pub fn mean_action(&self, s: &Tensor) -> Result<Tensor> {
        let out = self.net.forward(s)?;
        let d = self.action_dim;
        let mut a = Vec::with_capacity(s.rows() * d);
        for i in 0..out.rows() {
            a.extend(out.row_slice(i)[..d].iter().map(|&m| tanh(m)));
        }
        Tensor::matrix(out.rows(), d, a)
    }

    /// Sample with log-density (before any clamp), no graph.
    pub fn sample(&self, s: &Tensor, rng: &mut SeededRng) -> Result<(Tensor, Tensor)> {
        let xi = randn(&[s.rows(), self.action_dim], rng);
        self.sample_with_noise(s, &xi)
    }

    pub fn sample_with_noise(&self, s: &Tensor, xi: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.net.forward(s)?;
        let d = self.action_dim;
        let mut a = Vec::with_capacity(s.rows() * d);
        let mut lp = Vec::with_capacity(s.rows());
        for i in 0..out.rows() {
            let row = out.row_slice(i);
            let mut acc = 0.0;
            for j in 0..d {
                let log_std = Self::squash_log_std(row[d + j]);
                let e = xi.row_slice(i)[j];
                let u = row[j] + log_std.exp() * e;
                acc += -0.5 * e * e - log_std - half_log_two_pi() - log_one_minus_tanh_sq(u);
                a.push(tanh(u));
            }
            lp.push(acc);
        }
        Ok((Tensor::matrix(out.rows(), d, a)?, Tensor::column(lp)))
    }

    /// Reparameterized sample `a = tanh(μ + σ ξ)` and `log π(a|s)` as graph
    /// variables (`[B, d]` and `[B, 1]`).
    pub fn sample_graph(&self, g: &mut Graph, params: &[Var], s: Var, xi: &Tensor) -> Result<(Var, Var)> {
        let d = self.action_dim;
        let out = self.net.forward_graph(g, params, s)?;
        let mean = g.slice(out, 1, 0, d)?;
        let raw = g.slice(out, 1, d, 2 * d)?;
        let t = g.tanh(raw)?;
        let t1 = g.add_scalar(t, 1.0)?;
        let scaled = g.mul_scalar(t1, 0.5 * (LOG_STD_MAX - LOG_STD_MIN))?;
        let log_std = g.add_scalar(scaled, LOG_STD_MIN)?;
        let std = g.exp(log_std)?;
        let xi_v = g.constant(xi.clone());
        let noise = g.mul(std, xi_v)?;
        let u = g.add(mean, noise)?;
        let a = g.tanh(u)?;
        // log N(u; μ, σ) = -ξ²/2 - log σ - log(2π)/2
        let half_sq = xi.map(|e| -0.5 * e * e - half_log_two_pi());
        let gauss = g.add_const(log_std, half_sq.scale(-1.0))?;
        let gauss = g.neg(gauss)?;
        // log(1 - tanh²u) = 2 (log 2 - u - softplus(-2u))
        let m2u = g.mul_scalar(u, -2.0)?;
        let sp = g.softplus(m2u)?;
        let usp = g.add(u, sp)?;
        let jac = g.mul_scalar(usp, -2.0)?;
        let jac = g.add_scalar(jac, 2.0 * LN_2)?;
        let per_dim = g.sub(gauss, jac)?;
        let lp = g.sum_axis(per_dim, 1)?;
        Ok((a, lp))
    }
}

fn log_one_minus_tanh_sq(u: f64) -> f64 {
    let m = -2.0 * u;
    let softplus = m.max(0.0) + (-m.abs()).exp().ln_1p();
    2.0 * (LN_2 - u - softplus)
}

impl Module for SquashedGaussianActor {
    fn parameters(&self) -> Vec<&Tensor> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.parameters_mut()
    }
}

/// Unsquashed diagonal Gaussian with state-independent log-std (PPO actor).
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussianPolicy {
    mean: Mlp,
    log_std: Tensor,
}

impl DiagGaussianPolicy {
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        init_log_std: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mean = Mlp::new(&build_sizes(obs_dim, hidden, action_dim), activation, rng)?;
        Ok(DiagGaussianPolicy {
            mean,
            log_std: Tensor::full(&[1, action_dim], init_log_std),
        })
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn mean_net(&self) -> &Mlp {
        &self.mean
    }

    pub fn log_std(&self) -> &Tensor {
        &self.log_std
    }

    pub fn mean_action(&self, s: &Tensor) -> Result<Tensor> {
        self.mean.forward(s)
    }

    pub fn sample(&self, s: &Tensor, rng: &mut SeededRng) -> Result<(Tensor, Tensor)> {
        let mu = self.mean.forward(s)?;
        let xi = randn(mu.shape(), rng);
        let d = self.action_dim();
        let mut a = mu.clone();
        let mut lp = vec![0.0; mu.rows()];
        for i in 0..mu.rows() {
            for j in 0..d {
                let ls = self.log_std.data()[j];
                let e = xi.row_slice(i)[j];
                a.row_slice_mut(i)[j] += ls.exp() * e;
                lp[i] += -0.5 * e * e - ls - half_log_two_pi();
            }
        }
        Ok((a, Tensor::column(lp)))
    }

    /// `log π(a|s)` as a `[B, 1]` graph variable; `params` = mean-net params then log-std.
    pub fn log_prob_graph(&self, g: &mut Graph, params: &[Var], s: Var, a: &Tensor) -> Result<Var> {
        let n = params.len();
        if n == 0 {
            return Err(Error::InvalidArgument("missing parameters".into()));
        }
        let mu = self.mean.forward_graph(g, &params[..n - 1], s)?;
        let shape = g.shape(mu).to_vec();
        let log_std = g.broadcast_to(params[n - 1], &shape)?;
        let av = g.constant(a.clone());
        let diff = g.sub(av, mu)?;
        let neg_ls = g.neg(log_std)?;
        let inv_std = g.exp(neg_ls)?;
        let z = g.mul(diff, inv_std)?;
        let z2 = g.square(z)?;
        let half = g.mul_scalar(z2, -0.5)?;
        let t = g.sub(half, log_std)?;
        let t = g.add_scalar(t, -half_log_two_pi())?;
        g.sum_axis(t, 1)
    }

    /// Differential entropy `Σ (log σ + (1 + log 2π)/2)` as a scalar variable.
    pub fn entropy_graph(&self, g: &mut Graph, params: &[Var]) -> Result<Var> {
        let ls = *params.last().ok_or_else(|| Error::InvalidArgument("missing parameters".into()))?;
        let s = g.sum(ls)?;
        g.add_scalar(s, self.action_dim() as f64 * (0.5 + half_log_two_pi()))
    }
}

impl Module for DiagGaussianPolicy {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut p = self.mean.parameters();
        p.push(&self.log_std);
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.mean.parameters_mut();
        p.push(&mut self.log_std);
        p
    }
}
