use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dprl::algorithms::checkpoint_meta;
use dprl::envs::EnvSpec;
use dprl::harness::{emit_plots, ood_eval, run, sweep, sweep_values, ExperimentConfig, SweepAxis};
use dprl::Error;

#[derive(Parser)]
#[command(name = "dprl", version, about = "Train and evaluate diffusion-policy RL learners on small control tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write metrics, checkpoints and a summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per value of an axis plus a comparison table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `envs` (1, 8, 64) or `ksteps` (5, 10, 20, 50).
        #[arg(long)]
        axis: String,
        /// Comma-separated values replacing the defaults.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a saved policy, optionally under perturbed physics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `key=factor` with key in mass, length, damping and factor in [0.5, 1.5].
        #[arg(long)]
        perturb: Vec<String>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Render learning curves for a run directory.
    Plot {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn load(path: &PathBuf, out: Option<PathBuf>) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run { config, seed, out } => {
            let mut cfg = load(&config, out)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let dir = run(&cfg)?;
            println!("{}", dir.display());
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => {
            let cfg = load(&config, out)?;
            let axis: SweepAxis = axis.parse()?;
            match values {
                Some(v) => {
                    let points = sweep_values(&cfg, axis, &v)?;
                    for p in points {
                        println!("{} {}", p.value, p.dir.display());
                    }
                }
                None => println!("{}", sweep(&cfg, axis)?.display()),
            }
        }
        Command::Eval {
            checkpoint,
            perturb,
            episodes,
            seed,
            horizon,
        } => {
            let meta = checkpoint_meta(&checkpoint)?;
            let mut nominal = EnvSpec::new(meta.env);
            if let Some(h) = horizon {
                nominal = nominal.with_horizon(h)?;
            }
            let mut perturbed = nominal.clone();
            for p in &perturb {
                let (key, factor) = p
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("perturbation '{}' is not key=factor", p)))?;
                let factor: f64 = factor
                    .parse()
                    .map_err(|_| Error::Config(format!("bad factor in '{}'", p)))?;
                perturbed = perturbed.perturbed(key, factor)?;
            }
            let report = ood_eval(&checkpoint, &nominal, &perturbed, episodes, seed)?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            println!("{}", text);
        }
        Command::Plot { dir } => {
            for f in emit_plots(&dir)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric() => 3,
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
