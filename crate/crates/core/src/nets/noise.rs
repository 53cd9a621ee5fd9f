use super::{timestep_embed_batch, Activation, Mlp, Module};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::SeededRng;

/// Noise estimator `ε_θ(a^k, s, k)`: an MLP over `[a^k, s, embed(k)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePredictor {
    trunk: Mlp,
    obs_dim: usize,
    action_dim: usize,
    embed_dim: usize,
    steps: usize,
}

impl NoisePredictor {
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        embed_dim: usize,
        steps: usize,
        activation: Activation,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let sizes = Self::layer_sizes(obs_dim, action_dim, hidden, embed_dim);
        Self::from_trunk(Mlp::new(&sizes, activation, rng)?, obs_dim, action_dim, embed_dim, steps)
    }

    /// Predictor whose weights and biases are all zero.
    pub fn zeros(obs_dim: usize, action_dim: usize, hidden: &[usize], embed_dim: usize, steps: usize) -> Result<Self> {
        let sizes = Self::layer_sizes(obs_dim, action_dim, hidden, embed_dim);
        Self::from_trunk(Mlp::zeros(&sizes, Activation::Tanh)?, obs_dim, action_dim, embed_dim, steps)
    }

    fn layer_sizes(obs_dim: usize, action_dim: usize, hidden: &[usize], embed_dim: usize) -> Vec<usize> {
        let mut sizes = vec![action_dim + obs_dim + embed_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        sizes
    }

    pub fn from_trunk(trunk: Mlp, obs_dim: usize, action_dim: usize, embed_dim: usize, steps: usize) -> Result<Self> {
        if embed_dim % 2 != 0 || steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "embed dim {} must be even and steps {} positive",
                embed_dim, steps
            )));
        }
        if trunk.input_dim() != action_dim + obs_dim + embed_dim || trunk.output_dim() != action_dim {
            return Err(Error::InvalidArgument(format!(
                "trunk sizes {:?} do not fit action {} / obs {} / embed {}",
                trunk.sizes(),
                action_dim,
                obs_dim,
                embed_dim
            )));
        }
        Ok(NoisePredictor {
            trunk,
            obs_dim,
            action_dim,
            embed_dim,
            steps,
        })
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Number of diffusion steps `K` this predictor is conditioned on.
    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check(&self, a_shape: &[usize], s_shape: &[usize], ks: &[usize]) -> Result<()> {
        if a_shape.len() != 2 || a_shape[1] != self.action_dim || s_shape.len() != 2 || s_shape[1] != self.obs_dim {
            return Err(Error::Shape {
                node: 0,
                op: "predict_noise",
                detail: format!("a^k {:?}, s {:?}", a_shape, s_shape),
            });
        }
        if a_shape[0] != s_shape[0] || (ks.len() != 1 && ks.len() != a_shape[0]) {
            return Err(Error::Shape {
                node: 0,
                op: "predict_noise",
                detail: format!("batch {} vs states {} vs steps {}", a_shape[0], s_shape[0], ks.len()),
            });
        }
        if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > self.steps) {
            return Err(Error::InvalidArgument(format!(
                "diffusion step {} outside 1..={}",
                k, self.steps
            )));
        }
        Ok(())
    }

    fn embedding(&self, ks: &[usize], batch: usize) -> Result<Tensor> {
        if ks.len() == 1 {
            Ok(timestep_embed_batch(ks, self.embed_dim)?.repeat_rows(batch))
        } else {
            timestep_embed_batch(ks, self.embed_dim)
        }
    }

    /// `ks` holds either one step for the whole batch or one per row.
    pub fn predict(&self, a_k: &Tensor, s: &Tensor, ks: &[usize]) -> Result<Tensor> {
        self.check(a_k.shape(), s.shape(), ks)?;
        let emb = self.embedding(ks, a_k.rows())?;
        let x = Tensor::hstack(&[a_k, s, &emb])?;
        self.trunk.forward(&x)
    }

    pub fn predict_graph(&self, g: &mut Graph, params: &[Var], a_k: Var, s: Var, ks: &[usize]) -> Result<Var> {
        let (a_shape, s_shape) = (g.shape(a_k).to_vec(), g.shape(s).to_vec());
        self.check(&a_shape, &s_shape, ks)?;
        let emb = g.constant(self.embedding(ks, a_shape[0])?);
        let x = g.concat(&[a_k, s, emb], 1)?;
        self.trunk.forward_graph(g, params, x)
    }
}

impl Module for NoisePredictor {
    fn parameters(&self) -> Vec<&Tensor> {
        self.trunk.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.trunk.parameters_mut()
    }
}
