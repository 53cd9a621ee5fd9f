use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algorithms::AlgoConfig;
use crate::envs::{EnvId, EnvSpec};
use crate::error::{Error, Result};

fn default_name() -> String {
    "run".into()
}

fn default_n_envs() -> usize {
    1
}

fn default_eval_episodes() -> usize {
    10
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_checkpoint() -> bool {
    true
}

/// One experiment: a task, a learner and the run protocol.
///
/// ```toml
/// env = "pendulum"
/// n_envs = 1
/// total_steps = 100000
/// eval_interval = 5000
/// seeds = [0, 1, 2, 3, 4]
/// out_dir = "runs/sac"
///
/// [algo]
/// algorithm = "sac"
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub env: EnvId,
    /// Episode length override.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default = "default_n_envs")]
    pub n_envs: usize,
    pub total_steps: u64,
    /// Environment steps between evaluations.
    pub eval_interval: u64,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Save the final policy of each seed.
    #[serde(default = "default_checkpoint")]
    pub checkpoint: bool,
    pub algo: AlgoConfig,
}

impl ExperimentConfig {
    pub fn new(env: EnvId, algo: AlgoConfig, total_steps: u64, eval_interval: u64, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            name: default_name(),
            env,
            horizon: None,
            n_envs: default_n_envs(),
            total_steps,
            eval_interval,
            eval_episodes: default_eval_episodes(),
            seeds: default_seeds(),
            out_dir: out_dir.into(),
            checkpoint: default_checkpoint(),
            algo,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative `out_dir` values are resolved against the current directory,
    /// not the config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn spec(&self) -> Result<EnvSpec> {
        let spec = EnvSpec::new(self.env);
        match self.horizon {
            Some(h) => spec.with_horizon(h),
            None => Ok(spec),
        }
    }

    /// Environment steps consumed by one rollout (on-policy) or needed to
    /// fill one batch (off-policy).
    pub fn min_steps(&self) -> u64 {
        if self.algo.algorithm.is_on_policy() {
            (self.n_envs * self.algo.rollout_steps) as u64
        } else {
            self.algo.batch_size as u64
        }
    }

    /// Number of evaluation records each seed produces.
    pub fn eval_points(&self) -> u64 {
        self.total_steps / self.eval_interval
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.algo.validate()?;
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.n_envs == 0 || self.eval_episodes == 0 || self.eval_interval == 0 {
            return bad("n_envs, eval_episodes and eval_interval must be positive".into());
        }
        if self.horizon == Some(0) {
            return bad("horizon must be positive".into());
        }
        // A zero-step run is a dry run that only writes headers.
        if self.total_steps != 0 && self.total_steps < self.min_steps() {
            return bad(format!(
                "total_steps {} is below one {} ({} steps)",
                self.total_steps,
                if self.algo.algorithm.is_on_policy() { "rollout" } else { "batch" },
                self.min_steps()
            ));
        }
        Ok(())
    }
}
