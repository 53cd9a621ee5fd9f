use super::Module;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    max_grad_norm: Option<f64>,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_grad_clip(mut self, max_norm: f64) -> Self {
        self.max_grad_norm = Some(max_norm);
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Descends along `grads`; returns the pre-clip global gradient norm.
    pub fn step(&mut self, module: &mut (impl Module + ?Sized), grads: Vec<Tensor>) -> Result<f64> {
        let mut params = module.parameters_mut();
        self.step_params(&mut params, grads)
    }

    pub fn step_params(&mut self, params: &mut [&mut Tensor], mut grads: Vec<Tensor>) -> Result<f64> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        let norm = match self.max_grad_norm {
            Some(max) => clip_global_norm(&mut grads, max),
            None => global_norm(&grads),
        };
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient norm".into()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::InvalidArgument(format!(
                    "gradient shape {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                *w -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}
