use crate::buffers::ReplayBuffer;
use crate::diffusion::{bc_loss_and_grads, BcDraws, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nets::{ActionValue, Adam, NoisePredictor};
use crate::tensor::Tensor;
use crate::SeededRng;

/// `G` rounds of projected action-gradient ascent
/// `â ← clamp(â + η_a ∇_a Q(s, â), −1, 1)`.
///
/// A round whose gradient is non-finite is abandoned and the last finite
/// iterate returned.
pub fn dipo_action_improve(obs: &Tensor, actions: &Tensor, critic: &impl ActionValue, eta: f64, steps: usize) -> Result<Tensor> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("action learning rate {} must be positive", eta)));
    }
    let mut a = actions.clone();
    for round in 0..steps {
        let grad = match critic.action_gradient(obs, &a) {
            Ok(g) if g.is_finite() => g,
            Ok(_) => {
                log::warn!("non-finite action gradient at round {}; keeping last iterate", round);
                break;
            }
            Err(e) if e.is_numeric() => {
                log::warn!("action gradient failed at round {} ({}); keeping last iterate", round, e);
                break;
            }
            Err(e) => return Err(e),
        };
        a = a.zip_map(&grad, |x, g| (x + eta * g).clamp(-1.0, 1.0))?;
    }
    Ok(a)
}

/// Samples a replay batch and takes one denoising-loss step on
/// `(s, policy-target action)` pairs. Returns `(loss, grad norm)`.
pub fn dipo_policy_update(
    buffer: &ReplayBuffer,
    np: &mut NoisePredictor,
    opt: &mut Adam,
    sched: &NoiseSchedule,
    batch: usize,
    rng: &mut SeededRng,
) -> Result<(f64, f64)> {
    if batch == 0 {
        return Err(Error::InvalidArgument("zero-size policy batch".into()));
    }
    let b = buffer.sample(batch, rng)?;
    bc_step(np, opt, sched, &b.obs, &b.policy_targets, None, rng)
}

/// One optimizer step of the (optionally weighted) denoising loss.
pub(crate) fn bc_step(
    np: &mut NoisePredictor,
    opt: &mut Adam,
    sched: &NoiseSchedule,
    states: &Tensor,
    targets: &Tensor,
    weights: Option<&Tensor>,
    rng: &mut SeededRng,
) -> Result<(f64, f64)> {
    let draws = BcDraws::draw(targets.rows(), np.action_dim(), sched.steps(), rng);
    let (loss, grads) = bc_loss_and_grads(np, states, targets, &draws, sched, weights)?;
    let norm = opt.step(np, grads)?;
    Ok((loss, norm))
}
