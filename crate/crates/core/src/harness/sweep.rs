use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use super::config::ExperimentConfig;
use super::metrics::{mean_std, metrics_file_name, read_metrics, timing_file_name, MetricRecord, TimingRecord};
use super::run::{run, DESK_ENV_COUNTS};
use crate::error::{Error, Result};

pub const K_SWEEP: [usize; 4] = [5, 10, 20, 50];
pub const COMPARISON_FILE: &str = "comparison.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Number of parallel environments.
    Envs,
    /// Number of denoising steps.
    KSteps,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Envs => "envs",
            SweepAxis::KSteps => "ksteps",
        }
    }

    pub fn default_values(self) -> Vec<usize> {
        match self {
            SweepAxis::Envs => DESK_ENV_COUNTS.to_vec(),
            SweepAxis::KSteps => K_SWEEP.to_vec(),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "envs" => Ok(SweepAxis::Envs),
            "ksteps" => Ok(SweepAxis::KSteps),
            other => Err(Error::Config(format!("unknown sweep axis '{}' (expected envs or ksteps)", other))),
        }
    }
}

/// Outcome of one sweep point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: usize,
    pub dir: PathBuf,
    /// `None` on success, else the numeric failure that stopped the run.
    pub failure: Option<String>,
}

/// Config for one sweep point; `value` replaces `n_envs` or the number of
/// denoising steps and the run goes to `<out_dir>/<axis>_<value>`.
pub fn sweep_point_config(base: &ExperimentConfig, axis: SweepAxis, value: usize) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::Envs => cfg.n_envs = value,
        SweepAxis::KSteps => {
            if !base.algo.algorithm.is_diffusion() {
                return Err(Error::Config(format!(
                    "denoising-step sweep needs a diffusion algorithm, got {}",
                    base.algo.algorithm
                )));
            }
            cfg.algo.k_steps = Some(value);
        }
    }
    cfg.name = format!("{}-{}{}", base.name, axis, value);
    cfg.out_dir = base.out_dir.join(format!("{}_{}", axis, value));
    cfg.validate()?;
    Ok(cfg)
}

/// One run per axis value, then `comparison.csv` in `base.out_dir`.
///
/// Numeric failures (exploding gradients, non-finite losses) are recorded
/// as that point's outcome instead of aborting the sweep; every other error
/// is returned.
pub fn sweep_values(base: &ExperimentConfig, axis: SweepAxis, values: &[usize]) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| sweep_point_config(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;
    let mut points = Vec::new();
    for (cfg, &value) in configs.iter().zip(values) {
        let failure = match run(cfg) {
            Ok(_) => None,
            Err(e) if e.is_numeric() => {
                log::warn!("{} = {}: {}", axis, value, e);
                Some(e.to_string())
            }
            Err(e) => return Err(e),
        };
        points.push(SweepPoint {
            value,
            dir: cfg.out_dir.clone(),
            failure,
        });
    }
    write_comparison(base, axis, &points)?;
    Ok(points)
}

pub fn sweep(base: &ExperimentConfig, axis: SweepAxis) -> Result<PathBuf> {
    sweep_values(base, axis, &axis.default_values())?;
    Ok(base.out_dir.clone())
}

/// Per point: final return, mean collection throughput, and the actor
/// gradient-norm series summarized as mean and max, plus a count of
/// non-finite learner statistics.
fn write_comparison(base: &ExperimentConfig, axis: SweepAxis, points: &[SweepPoint]) -> Result<()> {
    let path = base.out_dir.join(COMPARISON_FILE);
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("{}: {}", path.display(), e));
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record([
        "axis",
        "value",
        "status",
        "final_mean_return",
        "final_std_return",
        "actions_per_sec",
        "actor_grad_norm_mean",
        "actor_grad_norm_max",
        "nonfinite_stats",
    ])
    .map_err(csv_err)?;
    for p in points {
        let mut finals = Vec::new();
        let mut grad = Vec::new();
        let mut grad_max = f64::NEG_INFINITY;
        let mut nonfinite = 0usize;
        let mut aps = Vec::new();
        for &seed in &base.seeds {
            let recs: Vec<MetricRecord> = read_metrics(&p.dir.join(metrics_file_name(seed))).unwrap_or_default();
            if let Some(last) = recs.last() {
                finals.push(last.mean_return);
            }
            for r in &recs {
                nonfinite += r.scalars().values().filter(|v| !v.is_finite()).count();
                if let Some(&g) = r.grad_norms.get("actor_grad_norm") {
                    grad.push(g);
                }
                if let Some(&g) = r.grad_norms.get("actor_grad_norm_max") {
                    grad_max = if g.is_nan() || grad_max.is_nan() { f64::NAN } else { grad_max.max(g) };
                }
            }
            let timing = p.dir.join(timing_file_name(seed));
            if let Ok(text) = std::fs::read_to_string(&timing) {
                if let Some(last) = text.lines().last() {
                    if let Ok(t) = serde_json::from_str::<TimingRecord>(last) {
                        aps.push(t.actions_per_sec);
                    }
                }
            }
        }
        let (fm, fs) = mean_std(&finals);
        let status = match &p.failure {
            None => "ok".to_string(),
            Some(m) => format!("numeric_failure: {}", m),
        };
        let gm = if grad.is_empty() { f64::NAN } else { mean_std(&grad).0 };
        w.write_record([
            axis.as_str().to_string(),
            p.value.to_string(),
            status,
            fm.to_string(),
            fs.to_string(),
            mean_std(&aps).0.to_string(),
            gm.to_string(),
            if grad_max == f64::NEG_INFINITY { "NaN".into() } else { grad_max.to_string() },
            nonfinite.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
