//! Experiment runner: TOML-configured multi-seed runs, parameter sweeps,
//! evaluation under perturbed physics and SVG learning curves.
//!
//! A run directory holds the echoed `config.toml`, `meta.json`, one
//! `seed_<s>.jsonl` metrics file per seed (byte-identical across reruns),
//! a `seed_<s>.timing.jsonl` with wall-clock data, a `seed_<s>.ckpt` policy
//! checkpoint and `summary.csv` with cross-seed statistics.

mod config;
mod metrics;
mod ood;
mod plot;
mod run;
mod sweep;

#[cfg(test)]
mod tests;

pub use config::ExperimentConfig;
pub use metrics::{
    checkpoint_file_name, mean_std, metrics_file_name, metrics_files, read_metrics, read_summary, timing_file_name, write_summary,
    MetricRecord, StatAccumulator, TimingRecord, SUMMARY_FILE,
};
pub use ood::{ood_eval, OodReport};
pub use plot::{curves, emit_plots, render_svg, Curve};
pub use run::{evaluate, run, run_seed, DESK_ENV_COUNTS};
pub use sweep::{sweep, sweep_point_config, sweep_values, SweepAxis, SweepPoint, COMPARISON_FILE, K_SWEEP};
