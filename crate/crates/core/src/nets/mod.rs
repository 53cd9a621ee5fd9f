//! Parameterized networks: MLPs, the diffusion noise predictor, Gaussian and
//! deterministic actors, critics, target networks, Adam and checkpoints.

mod actor;
mod checkpoint;
mod critic;
mod embed;
mod mlp;
mod noise;
mod optim;
mod target;

pub use actor::{DeterministicActor, DiagGaussianPolicy, SquashedGaussianActor, LOG_PROB_CLAMP};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use critic::{ActionValue, Critic, TwinCritic};
pub use embed::{timestep_embed, timestep_embed_batch};
pub use mlp::{Activation, Mlp};
pub use noise::NoisePredictor;
pub use optim::{clip_global_norm, global_norm, Adam};
pub use target::{soft_update, TargetPair};

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

/// Anything that owns trainable tensors in a fixed order.
pub trait Module {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    /// Registers every parameter as a trainable leaf of `g`.
    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.parameters().into_iter().map(|t| g.param(t.clone())).collect()
    }

    /// Registers every parameter as a constant (no gradient) leaf of `g`.
    fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.parameters().into_iter().map(|t| g.constant(t.clone())).collect()
    }

    fn num_params(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Owned copy of every parameter tensor.
    fn snapshot(&self) -> Vec<Tensor> {
        self.parameters().into_iter().cloned().collect()
    }

    /// Overwrites parameters from `src` (same order and shapes).
    fn load(&mut self, src: &[Tensor]) -> crate::Result<()> {
        let dst = self.parameters_mut();
        if dst.len() != src.len() {
            return Err(crate::Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                dst.len(),
                src.len()
            )));
        }
        for (d, s) in dst.into_iter().zip(src) {
            if d.shape() != s.shape() {
                return Err(crate::Error::InvalidArgument(format!(
                    "tensor shape {:?} vs {:?}",
                    s.shape(),
                    d.shape()
                )));
            }
            *d = s.clone();
        }
        Ok(())
    }

    /// FNV-1a over the parameter bit patterns; regression fingerprint.
    fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.parameters() {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}
