use super::{Activation, Mlp, Module};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::SeededRng;

/// A state-action value function usable by value targets and action-gradient methods.
pub trait ActionValue {
    /// `[B, 1]` values for paired rows of `obs` and `actions`.
    fn q_values(&self, obs: &Tensor, actions: &Tensor) -> Result<Tensor>;

    /// Per-row `∇_a Q(s, a)`, same shape as `actions`.
    fn action_gradient(&self, obs: &Tensor, actions: &Tensor) -> Result<Tensor>;
}

/// `Q_φ(s, a)` as an MLP over `[s, a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    net: Mlp,
}

impl Critic {
    pub fn new(obs_dim: usize, action_dim: usize, hidden: &[usize], activation: Activation, rng: &mut SeededRng) -> Result<Self> {
        let mut sizes = vec![obs_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Critic {
            net: Mlp::new(&sizes, activation, rng)?,
        })
    }

    pub fn from_net(net: Mlp) -> Self {
        Critic { net }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn q(&self, obs: &Tensor, actions: &Tensor) -> Result<Tensor> {
        self.net.forward(&Tensor::hstack(&[obs, actions])?)
    }

    pub fn q_graph(&self, g: &mut Graph, params: &[Var], obs: Var, actions: Var) -> Result<Var> {
        let x = g.concat(&[obs, actions], 1)?;
        self.net.forward_graph(g, params, x)
    }
}

impl Module for Critic {
    fn parameters(&self) -> Vec<&Tensor> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.parameters_mut()
    }
}

impl ActionValue for Critic {
    fn q_values(&self, obs: &Tensor, actions: &Tensor) -> Result<Tensor> {
        self.q(obs, actions)
    }

    fn action_gradient(&self, obs: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let s = g.constant(obs.clone());
        let a = g.input(actions.clone());
        let q = self.q_graph(&mut g, &p, s, a)?;
        g.grad_wrt_input(q, a)
    }
}

/// Two independent critics combined by an elementwise minimum.
#[derive(Clone, Debug, PartialEq)]
pub struct TwinCritic {
    pub q1: Critic,
    pub q2: Critic,
}

impl TwinCritic {
    pub fn new(obs_dim: usize, action_dim: usize, hidden: &[usize], activation: Activation, rng: &mut SeededRng) -> Result<Self> {
        Ok(TwinCritic {
            q1: Critic::new(obs_dim, action_dim, hidden, activation, rng)?,
            q2: Critic::new(obs_dim, action_dim, hidden, activation, rng)?,
        })
    }

    /// `min(Q1, Q2)` with both critics' parameters held as constants.
    pub fn min_q_graph_frozen(&self, g: &mut Graph, obs: Var, actions: Var) -> Result<Var> {
        let p1 = self.q1.bind_frozen(g);
        let p2 = self.q2.bind_frozen(g);
        let a = self.q1.q_graph(g, &p1, obs, actions)?;
        let b = self.q2.q_graph(g, &p2, obs, actions)?;
        g.minimum(a, b)
    }

    /// Parameter split point: the first `n` of [`Module::parameters`] belong to `q1`.
    pub fn split(&self) -> usize {
        self.q1.parameters().len()
    }
}

impl Module for TwinCritic {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut p = self.q1.parameters();
        p.extend(self.q2.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.q1.parameters_mut();
        p.extend(self.q2.parameters_mut());
        p
    }
}

impl ActionValue for TwinCritic {
    fn q_values(&self, obs: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let a = self.q1.q(obs, actions)?;
        let b = self.q2.q(obs, actions)?;
        a.zip_map(&b, f64::min)
    }

    fn action_gradient(&self, obs: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let s = g.constant(obs.clone());
        let a = g.input(actions.clone());
        let q = self.min_q_graph_frozen(&mut g, s, a)?;
        g.grad_wrt_input(q, a)
    }
}
