use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Generalized advantage estimation over one trajectory segment.
///
/// `values` has `T + 1` entries, the last being the bootstrap value.
/// `dones[t]` cuts the recursion so nothing flows across an episode end.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let t_len = rewards.len();
    if dones.len() != t_len {
        return Err(Error::InvalidArgument("dones length differs from rewards".into()));
    }
    if values.len() != t_len + 1 {
        return Err(Error::InvalidArgument(format!(
            "expected {} values including the bootstrap value, got {}",
            t_len + 1,
            values.len()
        )));
    }
    let mut adv = vec![0.0; t_len];
    let mut running = 0.0;
    for t in (0..t_len).rev() {
        let mask = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * mask - values[t];
        running = delta + gamma * lambda * mask * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Shifts and scales to zero mean and unit variance in place.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.len() < 2 {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// On-policy storage for `T` steps of `N` environments, row `t·N + i`.
#[derive(Clone, Debug)]
pub struct RolloutBatch {
    n_envs: usize,
    obs_dim: usize,
    action_dim: usize,
    aux_dim: usize,
    steps: usize,
    /// Version of the policy that collected this rollout.
    pub policy_version: u64,
    obs: Vec<f64>,
    actions: Vec<f64>,
    aux: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    values: Vec<f64>,
    log_probs: Vec<f64>,
    bootstrap: Option<Vec<f64>>,
    advantages: Option<Vec<f64>>,
    returns: Option<Vec<f64>>,
}

impl RolloutBatch {
    /// `aux_dim` reserves per-sample side data (e.g. flow noise) that
    /// an update needs to re-evaluate log-probabilities.
    pub fn new(n_envs: usize, obs_dim: usize, action_dim: usize, aux_dim: usize, policy_version: u64) -> Self {
        RolloutBatch {
            n_envs,
            obs_dim,
            action_dim,
            aux_dim,
            steps: 0,
            policy_version,
            obs: Vec::new(),
            actions: Vec::new(),
            aux: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            values: Vec::new(),
            log_probs: Vec::new(),
            bootstrap: None,
            advantages: None,
            returns: None,
        }
    }

    pub fn n_envs(&self) -> usize {
        self.n_envs
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps * self.n_envs
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push_step(
        &mut self,
        obs: &Tensor,
        actions: &Tensor,
        aux: Option<&Tensor>,
        rewards: &[f64],
        dones: &[bool],
        values: &[f64],
        log_probs: &[f64],
    ) -> Result<()> {
        let n = self.n_envs;
        let aux_ok = match aux {
            Some(a) => a.shape() == [n, self.aux_dim],
            None => self.aux_dim == 0,
        };
        if obs.shape() != [n, self.obs_dim]
            || actions.shape() != [n, self.action_dim]
            || !aux_ok
            || rewards.len() != n
            || dones.len() != n
            || values.len() != n
            || log_probs.len() != n
        {
            return Err(Error::InvalidArgument("rollout step has inconsistent shapes".into()));
        }
        self.obs.extend_from_slice(obs.data());
        self.actions.extend_from_slice(actions.data());
        if let Some(a) = aux {
            self.aux.extend_from_slice(a.data());
        }
        self.rewards.extend_from_slice(rewards);
        self.dones.extend_from_slice(dones);
        self.values.extend_from_slice(values);
        self.log_probs.extend_from_slice(log_probs);
        self.steps += 1;
        self.advantages = None;
        self.returns = None;
        Ok(())
    }

    /// Value estimates of the observations after the last step.
    pub fn set_bootstrap(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_envs {
            return Err(Error::InvalidArgument("bootstrap length differs from env count".into()));
        }
        self.bootstrap = Some(values.to_vec());
        Ok(())
    }

    /// Per-environment GAE. Advantages are left unnormalized; PPO-style
    /// updates normalize each minibatch.
    pub fn compute_gae(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        let boot = self
            .bootstrap
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("compute_gae needs the bootstrap value for step T".into()))?;
        let (t_len, n) = (self.steps, self.n_envs);
        let mut adv = vec![0.0; t_len * n];
        let mut ret = vec![0.0; t_len * n];
        for i in 0..n {
            let r: Vec<f64> = (0..t_len).map(|t| self.rewards[t * n + i]).collect();
            let d: Vec<bool> = (0..t_len).map(|t| self.dones[t * n + i]).collect();
            let mut v: Vec<f64> = (0..t_len).map(|t| self.values[t * n + i]).collect();
            v.push(boot[i]);
            let (a, rt) = gae(&r, &v, &d, gamma, lambda)?;
            for t in 0..t_len {
                adv[t * n + i] = a[t];
                ret[t * n + i] = rt[t];
            }
        }
        self.advantages = Some(adv);
        self.returns = Some(ret);
        Ok(())
    }

    pub fn advantages(&self) -> Option<&[f64]> {
        self.advantages.as_deref()
    }

    pub fn returns(&self) -> Option<&[f64]> {
        self.returns.as_deref()
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn dones(&self) -> &[bool] {
        &self.dones
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn obs_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.obs_dim, self.obs.clone()).expect("rollout obs size")
    }

    pub fn actions_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.action_dim, self.actions.clone()).expect("rollout action size")
    }

    pub fn aux_tensor(&self) -> Option<Tensor> {
        (self.aux_dim > 0).then(|| Tensor::matrix(self.len(), self.aux_dim, self.aux.clone()).expect("aux size"))
    }
}
