use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Module;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply_graph(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// Fully connected network. Hidden layers use `activation`; the output layer
/// is linear unless `output_activation` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    output_activation: bool,
    /// `[w0, b0, w1, b1, ...]`, weights `[in, out]`, biases `[1, out]`.
    params: Vec<Tensor>,
}

impl Mlp {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut SeededRng) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let mut params = Vec::with_capacity(2 * (sizes.len() - 1));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            };
            params.push(Tensor::matrix(w[0], w[1], draw(w[0] * w[1]))?);
            params.push(Tensor::row(draw(w[1])));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            activation,
            output_activation: false,
            params,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let params = sizes
            .windows(2)
            .flat_map(|w| [Tensor::zeros(&[w[0], w[1]]), Tensor::zeros(&[1, w[1]])])
            .collect();
        Ok(Mlp {
            sizes: sizes.to_vec(),
            activation,
            output_activation: false,
            params,
        })
    }

    pub fn from_params(sizes: &[usize], activation: Activation, params: Vec<Tensor>) -> Result<Self> {
        let mut m = Self::zeros(sizes, activation)?;
        if params.len() != m.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                m.params.len(),
                params.len()
            )));
        }
        for (dst, src) in m.params.iter_mut().zip(params) {
            if dst.shape() != src.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter shape {:?} vs {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src;
        }
        Ok(m)
    }

    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer sizes {:?}", sizes)));
        }
        Ok(())
    }

    /// Applies `activation` to the output layer as well.
    pub fn with_output_activation(mut self) -> Self {
        self.output_activation = true;
        self
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.cols() != self.input_dim() {
            return Err(Error::Shape {
                node: 0,
                op: "mlp_forward",
                detail: format!("input {:?} for input dim {}", x.shape(), self.input_dim()),
            });
        }
        let mut h = x.clone();
        for l in 0..self.layers() {
            h = h.matmul(&self.params[2 * l])?.add_row(&self.params[2 * l + 1])?;
            if l + 1 < self.layers() || self.output_activation {
                match self.activation {
                    Activation::Tanh => crate::tensor::tanh_in_place(h.data_mut()),
                    Activation::Relu => h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
                }
            }
        }
        Ok(h)
    }

    /// Differentiable forward with parameters supplied as graph variables
    /// (in [`Module::parameters`] order).
    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter vars, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(Error::Shape {
                node: x.index(),
                op: "mlp_forward",
                detail: format!("input {:?} for input dim {}", shape, self.input_dim()),
            });
        }
        let mut h = x;
        for l in 0..self.layers() {
            h = g.linear(h, params[2 * l], params[2 * l + 1])?;
            if l + 1 < self.layers() || self.output_activation {
                h = self.activation.apply_graph(g, h)?;
            }
        }
        Ok(h)
    }
}

impl Module for Mlp {
    fn parameters(&self) -> Vec<&Tensor> {
        self.params.iter().collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }
}
