use crate::autodiff::{Graph, Var};
use crate::diffusion::{forward_noising_rows, BcDraws, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nets::{ActionValue, Adam, Module, NoisePredictor};
use crate::tensor::Tensor;
use crate::SeededRng;

/// Score-matching loss `mean_i ‖score_θ(s_i, a^k_i) − target_i‖²` where the
/// score is `−ε_θ / sqrt(1 − ᾱ_k)` at a noised copy of `a_i`, and
/// `target` (already scaled, `[B, d]`) is held constant.
#[allow(clippy::too_many_arguments)]
pub fn qsm_loss_graph(
    g: &mut Graph,
    np: &NoisePredictor,
    params: &[Var],
    states: &Tensor,
    actions: &Tensor,
    target: &Tensor,
    draws: &BcDraws,
    sched: &NoiseSchedule,
) -> Result<Var> {
    if actions.rows() == 0 {
        return Err(Error::InvalidArgument("score matching on an empty batch".into()));
    }
    let noisy = forward_noising_rows(actions, &draws.ks, &draws.eps, sched)?;
    let a_k = g.constant(noisy);
    let s = g.constant(states.clone());
    let eps_hat = np.predict_graph(g, params, a_k, s, &draws.ks)?;
    let d = actions.cols();
    let coef: Vec<f64> = draws
        .ks
        .iter()
        .flat_map(|&k| std::iter::repeat_n(-1.0 / (1.0 - sched.alpha_bar(k)).sqrt(), d))
        .collect();
    let score = g.mul_const(eps_hat, Tensor::matrix(actions.rows(), d, coef)?)?;
    let diff = g.add_const(score, target.scale(-1.0))?;
    let sq = g.square(diff)?;
    let per_row = g.sum_axis(sq, 1)?;
    g.mean(per_row)
}

/// `scale · ∇_a Q(s, a)` at the clean actions.
pub fn qsm_target(critic: &impl ActionValue, states: &Tensor, actions: &Tensor, scale: f64) -> Result<Tensor> {
    Ok(critic.action_gradient(states, actions)?.scale(scale))
}

/// Loss value on the given draws.
pub fn qsm_loss(
    np: &NoisePredictor,
    critic: &impl ActionValue,
    states: &Tensor,
    actions: &Tensor,
    scale: f64,
    sched: &NoiseSchedule,
    draws: &BcDraws,
) -> Result<f64> {
    let target = qsm_target(critic, states, actions, scale)?;
    let mut g = Graph::new();
    let p = np.bind_frozen(&mut g);
    let l = qsm_loss_graph(&mut g, np, &p, states, actions, &target, draws, sched)?;
    Ok(g.value(l)?.item())
}

/// One optimizer step on the score-matching loss. Returns `(loss, grad norm)`.
#[allow(clippy::too_many_arguments)]
pub fn qsm_update(
    np: &mut NoisePredictor,
    opt: &mut Adam,
    critic: &impl ActionValue,
    states: &Tensor,
    actions: &Tensor,
    scale: f64,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<(f64, f64)> {
    let target = qsm_target(critic, states, actions, scale)?;
    let draws = BcDraws::draw(actions.rows(), np.action_dim(), sched.steps(), rng);
    let mut g = Graph::new();
    let p = np.bind(&mut g);
    let l = qsm_loss_graph(&mut g, np, &p, states, actions, &target, &draws, sched)?;
    let loss = g.value(l)?.item();
    let grads = g.backward_scalar(l)?.collect(&p);
    let norm = opt.step(np, grads)?;
    Ok((loss, norm))
}
