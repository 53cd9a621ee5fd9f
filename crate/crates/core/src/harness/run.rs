use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::metrics::{
    checkpoint_file_name, create, mean_std, metrics_file_name, timing_file_name, write_json_line, write_summary, MetricRecord,
    StatAccumulator, TimingRecord, SUMMARY_FILE,
};
use crate::algorithms::{build_agent, save_policy, Agent, AnyAgent, OffPolicyAgent, OnPolicyAgent};
use crate::buffers::{ReplayBuffer, RolloutBatch, Transition};
use crate::envs::{run_episodes, EnvSpec, VecEnv};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{seeded_rng, SeededRng};

/// Environment counts used by the parallelism sweep. They stand in for much
/// larger GPU-scale counts and are recorded in every run's metadata.
pub const DESK_ENV_COUNTS: [usize; 3] = [1, 8, 64];

const EVAL_SEED_OFFSET: u64 = 0x5eed_0000;
const EVAL_RNG_SALT: u64 = 0x0e7a_1000_0000;

#[derive(Serialize)]
struct RunMeta<'a> {
    name: &'a str,
    crate_version: &'a str,
    desk_scale: bool,
    desk_env_counts: [usize; 3],
    note: &'a str,
    eval_points: u64,
}

/// Undiscounted returns of `eval_episodes` evaluation episodes, one per
/// instance of a fresh vectorized environment.
pub fn evaluate(agent: &dyn Agent, spec: &EnvSpec, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    let mut venv = VecEnv::new(spec.clone(), episodes, false)?;
    venv.reset(seed);
    let mut rng = seeded_rng(seed ^ EVAL_RNG_SALT);
    run_episodes(&mut venv, &mut |obs: &Tensor| agent.act(obs, &mut rng))
}

fn eval_seed(seed: u64, index: u64) -> u64 {
    EVAL_SEED_OFFSET + seed.wrapping_mul(1_000_003).wrapping_add(index)
}

/// Writes records as they are produced so a failed run leaves its history.
struct Recorder<'a> {
    metrics_path: PathBuf,
    timing_path: PathBuf,
    metrics: std::io::BufWriter<std::fs::File>,
    timing: std::io::BufWriter<std::fs::File>,
    records: Vec<MetricRecord>,
    stats: StatAccumulator,
    next_eval: u64,
    points: u64,
    cfg: &'a ExperimentConfig,
    spec: &'a EnvSpec,
    seed: u64,
    start: Instant,
    collect_time: Duration,
    collected: u64,
}

impl<'a> Recorder<'a> {
    fn new(dir: &Path, cfg: &'a ExperimentConfig, spec: &'a EnvSpec, seed: u64) -> Result<Self> {
        let metrics_path = dir.join(metrics_file_name(seed));
        let timing_path = dir.join(timing_file_name(seed));
        Ok(Recorder {
            metrics: create(&metrics_path)?,
            timing: create(&timing_path)?,
            metrics_path,
            timing_path,
            records: Vec::new(),
            stats: StatAccumulator::default(),
            next_eval: cfg.eval_interval,
            points: cfg.eval_points(),
            cfg,
            spec,
            seed,
            start: Instant::now(),
            collect_time: Duration::ZERO,
            collected: 0,
        })
    }

    /// Evaluates once for every interval boundary `env_steps` has crossed.
    fn maybe_eval(&mut self, agent: &dyn Agent, env_steps: u64) -> Result<()> {
        while self.records.len() < self.points as usize && self.next_eval <= env_steps {
            let index = self.records.len() as u64;
            let returns = evaluate(agent, self.spec, self.cfg.eval_episodes, eval_seed(self.seed, index))?;
            let (m, s) = mean_std(&returns);
            let mut rec = MetricRecord {
                env_steps,
                mean_return: m,
                std_return: s,
                wall_ms: self.start.elapsed().as_secs_f64() * 1e3,
                actions_per_sec: self.collected as f64 / self.collect_time.as_secs_f64().max(1e-9),
                ..Default::default()
            };
            self.stats.drain_into(&mut rec);
            log::info!(
                "seed {} step {}: return {:.1} ± {:.1}",
                self.seed,
                env_steps,
                rec.mean_return,
                rec.std_return
            );
            write_json_line(&mut self.metrics, &self.metrics_path, &rec)?;
            let t = TimingRecord {
                env_steps,
                wall_ms: rec.wall_ms,
                actions_per_sec: rec.actions_per_sec,
            };
            write_json_line(&mut self.timing, &self.timing_path, &t)?;
            self.records.push(rec);
            self.next_eval += self.cfg.eval_interval;
        }
        Ok(())
    }

    fn collected(&mut self, actions: u64, elapsed: Duration) {
        self.collected += actions;
        self.collect_time += elapsed;
    }
}

fn uniform_actions(n: usize, d: usize, rng: &mut SeededRng) -> Tensor {
    let data = (0..n * d).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Tensor::matrix(n, d, data).expect("shape matches")
}

fn train_off_policy(
    agent: &mut dyn OffPolicyAgent,
    cfg: &ExperimentConfig,
    spec: &EnvSpec,
    seed: u64,
    rec: &mut Recorder<'_>,
    rng: &mut SeededRng,
) -> Result<()> {
    let a = &cfg.algo;
    let n = cfg.n_envs;
    let mut buffer = ReplayBuffer::new(a.replay_capacity, spec.obs_dim, spec.action_dim, agent.edit_mode())?;
    let mut venv = VecEnv::new(spec.clone(), n, true)?;
    let mut obs = venv.reset(seed);
    let mut env_steps = 0u64;
    let mut t = 0usize;
    while env_steps < cfg.total_steps {
        let t0 = Instant::now();
        let actions = if t < a.random_action_steps {
            uniform_actions(n, spec.action_dim, rng)
        } else {
            agent.explore(&obs, rng)?
        };
        let out = venv.step(&actions)?;
        rec.collected(n as u64, t0.elapsed());
        for i in 0..n {
            buffer.push(Transition {
                obs: obs.row_slice(i).to_vec(),
                action: actions.row_slice(i).iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
                reward: out.rewards[i],
                next_obs: out.final_obs(i).to_vec(),
                // time-limit truncation still bootstraps
                done: out.terminated[i],
            })?;
        }
        env_steps += n as u64;
        t += 1;
        if let Some(s) = agent.on_progress(env_steps, cfg.total_steps, rng)? {
            rec.stats.add(&s);
        }
        if t >= a.random_action_steps && buffer.len() >= a.batch_size && t % a.update_every == 0 {
            for _ in 0..a.updates_per_step {
                let s = agent.update(&mut buffer, rng)?;
                rec.stats.add_update(&s);
            }
        }
        obs = out.obs;
        rec.maybe_eval(agent, env_steps)?;
    }
    Ok(())
}

fn train_on_policy(
    agent: &mut dyn OnPolicyAgent,
    cfg: &ExperimentConfig,
    spec: &EnvSpec,
    seed: u64,
    rec: &mut Recorder<'_>,
    rng: &mut SeededRng,
) -> Result<()> {
    let a = &cfg.algo;
    let n = cfg.n_envs;
    let mut venv = VecEnv::new(spec.clone(), n, true)?;
    let mut obs = venv.reset(seed);
    let mut env_steps = 0u64;
    while env_steps < cfg.total_steps {
        let mut rollout = RolloutBatch::new(n, spec.obs_dim, spec.action_dim, agent.aux_dim(), agent.policy_version());
        for _ in 0..a.rollout_steps {
            let t0 = Instant::now();
            let step = agent.sample(&obs, rng)?;
            let out = venv.step(&step.env_actions)?;
            rec.collected(n as u64, t0.elapsed());
            let values = agent.values(&obs)?;
            let mut rewards = out.rewards.clone();
            // Horizon cut-offs are not failures: fold the value of the
            // state reached into the reward before the episode boundary.
            let cut: Vec<usize> = (0..n).filter(|&i| out.truncated[i] && !out.terminated[i]).collect();
            if !cut.is_empty() {
                let rows: Vec<f64> = cut.iter().flat_map(|&i| out.final_obs(i).to_vec()).collect();
                let v = agent.values(&Tensor::matrix(cut.len(), spec.obs_dim, rows)?)?;
                for (j, &i) in cut.iter().enumerate() {
                    rewards[i] += a.gamma * v[j];
                }
            }
            rollout.push_step(&obs, &step.actions, step.aux.as_ref(), &rewards, &out.dones(), &values, &step.log_probs)?;
            env_steps += n as u64;
            obs = out.obs;
            rec.maybe_eval(agent, env_steps)?;
            if env_steps >= cfg.total_steps {
                return Ok(());
            }
        }
        rollout.set_bootstrap(&agent.values(&obs)?)?;
        rollout.compute_gae(a.gamma, a.gae_lambda)?;
        let s = agent.update(&rollout, rng)?;
        rec.stats.add_update(&s);
    }
    Ok(())
}

/// Trains one seed and writes its metrics, timing and checkpoint files into
/// `dir`. Returns the evaluation records.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<Vec<MetricRecord>> {
    let spec = cfg.spec()?;
    let mut rng = seeded_rng(seed);
    let mut agent = build_agent(&cfg.algo, &spec, &mut rng)?;
    let mut rec = Recorder::new(dir, cfg, &spec, seed)?;
    if cfg.total_steps > 0 {
        match &mut agent {
            AnyAgent::OffPolicy(a) => train_off_policy(a.as_mut(), cfg, &spec, seed, &mut rec, &mut rng)?,
            AnyAgent::OnPolicy(a) => train_on_policy(a.as_mut(), cfg, &spec, seed, &mut rec, &mut rng)?,
        }
    }
    if cfg.checkpoint {
        save_policy(agent.agent(), &cfg.algo, &spec, &dir.join(checkpoint_file_name(seed)))?;
    }
    Ok(rec.records)
}

/// Runs every seed of `cfg` into `cfg.out_dir` and writes the cross-seed
/// summary. Returns the output directory.
pub fn run(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string()?).map_err(|e| Error::io(&cfg_path, e))?;
    let meta = RunMeta {
        name: &cfg.name,
        crate_version: env!("CARGO_PKG_VERSION"),
        desk_scale: true,
        desk_env_counts: DESK_ENV_COUNTS,
        note: "desk-scale run on small CPU control tasks; returns are not comparable to large-scale simulator benchmarks",
        eval_points: cfg.eval_points(),
    };
    let meta_path = dir.join("meta.json");
    let mut f = create(&meta_path)?;
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    writeln!(f, "{}", text).map_err(|e| Error::io(&meta_path, e))?;
    let mut all = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        all.push(run_seed(cfg, seed, &dir)?);
    }
    write_summary(&dir.join(SUMMARY_FILE), &all)?;
    Ok(dir)
}
