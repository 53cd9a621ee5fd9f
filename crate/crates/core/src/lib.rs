//! Online diffusion-policy reinforcement learning at desk scale.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors and a define-by-run
//!   reverse-mode tape.
//! - [`nets`]: MLPs, noise predictors, Gaussian actors, critics, target
//!   networks, Adam and the checkpoint format.
//! - [`diffusion`]: noise schedule, forward noising, the reverse sampler and
//!   the behavior-cloning loss.
//! - [`envs`]: seedable vectorized control tasks.
//! - [`buffers`]: replay storage and on-policy rollouts with GAE.
//! - [`algorithms`]: PPO, DDPG, TD3, SAC and the diffusion learners DIPO,
//!   QSM, QVPO, DACER and GenPO.
//! - [`harness`]: config-driven runs, sweeps, out-of-distribution
//!   evaluation and plots.

pub mod algorithms;
pub mod autodiff;
pub mod buffers;
pub mod diffusion;
pub mod envs;
pub mod error;
pub mod harness;
pub mod nets;
pub mod tensor;

pub use autodiff::{finite_difference_check, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

/// Random number generator used everywhere a run must be reproducible.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Deterministic generator for `seed`.
pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

/// Tensor of independent standard-normal draws.
pub fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}
