use std::path::Path;

use serde::Serialize;

use super::metrics::{mean_std, MetricRecord};
use super::run::evaluate;
use crate::algorithms::load_policy;
use crate::envs::EnvSpec;
use crate::error::Result;

/// Evaluation of a frozen policy under nominal and perturbed physics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OodReport {
    pub nominal: MetricRecord,
    pub perturbed: MetricRecord,
    /// `(nominal − perturbed) / |nominal|`; positive means the policy got
    /// worse under perturbation.
    pub degradation: f64,
}

fn eval_record(returns: &[f64]) -> MetricRecord {
    let (m, s) = mean_std(returns);
    MetricRecord {
        mean_return: m,
        std_return: s,
        ..Default::default()
    }
}

/// Evaluation-only: loads the policy in `checkpoint`, then runs `episodes`
/// episodes on `nominal` and on `perturbed` from the same initial states.
/// Build `perturbed` with [`EnvSpec::perturbed`], which bounds factors to
/// ±50%.
pub fn ood_eval(checkpoint: &Path, nominal: &EnvSpec, perturbed: &EnvSpec, episodes: usize, seed: u64) -> Result<OodReport> {
    let (_, agent) = load_policy(checkpoint, perturbed)?;
    let base = evaluate(agent.agent(), nominal, episodes, seed)?;
    let pert = evaluate(agent.agent(), perturbed, episodes, seed)?;
    let nominal = eval_record(&base);
    let perturbed = eval_record(&pert);
    let degradation = (nominal.mean_return - perturbed.mean_return) / nominal.mean_return.abs().max(1e-12);
    Ok(OodReport {
        nominal,
        perturbed,
        degradation,
    })
}
