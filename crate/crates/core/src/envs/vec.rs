use std::io::Write;

use rand::SeedableRng;
use serde::Serialize;

use super::EnvSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::SeededRng;

/// Result of stepping every instance once.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// Next observations `[N, obs_dim]`; rows of finished instances already
    /// hold the fresh reset observation when auto-reset is on.
    pub obs: Tensor,
    pub rewards: Vec<f64>,
    /// Episode ended by a failure condition.
    pub terminated: Vec<bool>,
    /// Episode ended by the horizon.
    pub truncated: Vec<bool>,
    /// Pre-reset observation for every instance whose episode ended.
    pub terminal_obs: Vec<Option<Vec<f64>>>,
}

impl StepOutput {
    pub fn dones(&self) -> Vec<bool> {
        self.terminated.iter().zip(&self.truncated).map(|(a, b)| *a || *b).collect()
    }

    /// Observation to bootstrap from for instance `i`: the terminal
    /// observation if the episode ended, else the next observation.
    pub fn final_obs(&self, i: usize) -> &[f64] {
        match &self.terminal_obs[i] {
            Some(o) => o,
            None => self.obs.row_slice(i),
        }
    }
}

/// `N` independent copies of one task. Instance `i` draws its initial
/// states from ChaCha stream `i` of the base seed, so instance 0 of any
/// `VecEnv` matches a single environment with the same seed.
#[derive(Clone, Debug)]
pub struct VecEnv {
    spec: EnvSpec,
    states: Vec<Vec<f64>>,
    steps: Vec<usize>,
    finished: Vec<bool>,
    rngs: Vec<SeededRng>,
    auto_reset: bool,
    clamp_events: usize,
}

impl VecEnv {
    pub fn new(spec: EnvSpec, n: usize, auto_reset: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("VecEnv needs at least one instance".into()));
        }
        let mut v = VecEnv {
            states: vec![vec![0.0; spec.state_dim()]; n],
            steps: vec![0; n],
            finished: vec![false; n],
            rngs: Vec::new(),
            spec,
            auto_reset,
            clamp_events: 0,
        };
        v.reset(0);
        Ok(v)
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn num_envs(&self) -> usize {
        self.states.len()
    }

    pub fn step_counts(&self) -> &[usize] {
        &self.steps
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i]
    }

    /// Number of action entries clamped into `[-1, 1]` so far.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    /// Overrides the physical state of instance `i` (tests, oracle runs).
    pub fn set_state(&mut self, i: usize, state: &[f64]) -> Result<()> {
        if i >= self.num_envs() || state.len() != self.spec.state_dim() {
            return Err(Error::InvalidArgument(format!(
                "bad state override for instance {} (len {})",
                i,
                state.len()
            )));
        }
        self.states[i] = state.to_vec();
        Ok(())
    }

    pub fn reset(&mut self, seed: u64) -> Tensor {
        let n = self.num_envs();
        self.rngs = (0..n)
            .map(|i| {
                let mut r = SeededRng::seed_from_u64(seed);
                r.set_stream(i as u64);
                r
            })
            .collect();
        for i in 0..n {
            self.states[i] = self.spec.initial_state(&mut self.rngs[i]);
            self.steps[i] = 0;
            self.finished[i] = false;
        }
        self.observations()
    }

    pub fn observations(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.num_envs() * self.spec.obs_dim);
        for s in &self.states {
            self.spec.observe_into(s, &mut data);
        }
        Tensor::matrix(self.num_envs(), self.spec.obs_dim, data).expect("observation size")
    }

    pub fn step(&mut self, actions: &Tensor) -> Result<StepOutput> {
        let n = self.num_envs();
        let mut actions = actions.clone();
        let clamped = self.spec.sanitize_actions(&mut actions, n)?;
        if clamped > 0 {
            self.clamp_events += clamped;
            log::warn!("clamped {} out-of-range action entries into [-1, 1]", clamped);
        }
        let mut rewards = vec![0.0; n];
        let mut terminated = vec![false; n];
        let mut truncated = vec![false; n];
        let mut terminal_obs = vec![None; n];
        for i in 0..n {
            if self.finished[i] {
                terminated[i] = true;
                continue;
            }
            let (r, failed) = self.spec.step_state(&mut self.states[i], actions.row_slice(i));
            self.steps[i] += 1;
            rewards[i] = r;
            terminated[i] = failed;
            truncated[i] = !failed && self.steps[i] >= self.spec.horizon;
            if failed || truncated[i] {
                terminal_obs[i] = Some(self.spec.observe(&self.states[i]));
                if self.auto_reset {
                    self.states[i] = self.spec.initial_state(&mut self.rngs[i]);
                    self.steps[i] = 0;
                } else {
                    self.finished[i] = true;
                }
            }
        }
        Ok(StepOutput {
            obs: self.observations(),
            rewards,
            terminated,
            truncated,
            terminal_obs,
        })
    }
}

/// Runs one episode per instance (auto-reset must be off) from the current
/// states and returns each undiscounted episode return.
pub fn run_episodes<P>(venv: &mut VecEnv, policy: &mut P) -> Result<Vec<f64>>
where
    P: FnMut(&Tensor) -> Result<Tensor>,
{
    if venv.auto_reset {
        return Err(Error::InvalidArgument("run_episodes needs auto-reset disabled".into()));
    }
    let n = venv.num_envs();
    let mut returns = vec![0.0; n];
    let mut live = vec![true; n];
    let mut obs = venv.observations();
    while live.iter().any(|&l| l) {
        let actions = policy(&obs)?;
        let out = venv.step(&actions)?;
        for (i, flag) in live.iter_mut().enumerate() {
            if *flag {
                returns[i] += out.rewards[i];
                if out.terminal_obs[i].is_some() {
                    *flag = false;
                }
            }
        }
        obs = out.obs;
    }
    Ok(returns)
}

/// Mean undiscounted return of `policy` over `episodes` episodes, each run
/// on its own instance of a vectorized environment seeded by `seed`.
pub fn env_oracle_return<P>(spec: &EnvSpec, policy: &mut P, seed: u64, episodes: usize) -> Result<f64>
where
    P: FnMut(&Tensor) -> Result<Tensor>,
{
    let mut venv = VecEnv::new(spec.clone(), episodes, false)?;
    venv.reset(seed);
    let returns = run_episodes(&mut venv, policy)?;
    Ok(returns.iter().sum::<f64>() / episodes as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub t: usize,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Single episode with instance 0 of `seed`.
pub fn record_trace<P>(spec: &EnvSpec, policy: &mut P, seed: u64) -> Result<Vec<TraceRecord>>
where
    P: FnMut(&Tensor) -> Result<Tensor>,
{
    let mut venv = VecEnv::new(spec.clone(), 1, false)?;
    let mut obs = venv.reset(seed);
    let mut out = Vec::new();
    for t in 0.. {
        let action = policy(&obs)?;
        let step = venv.step(&action)?;
        let done = step.terminal_obs[0].is_some();
        out.push(TraceRecord {
            t,
            obs: obs.row_slice(0).to_vec(),
            action: action.data().to_vec(),
            reward: step.rewards[0],
            done,
        });
        if done {
            break;
        }
        obs = step.obs;
    }
    Ok(out)
}

pub fn write_trace_jsonl(records: &[TraceRecord], w: &mut impl Write) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(w, "{}", line).map_err(|e| Error::io("<trace>", e))?;
    }
    Ok(())
}
