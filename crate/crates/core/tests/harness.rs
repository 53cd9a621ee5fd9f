use std::path::Path;

use dprl::algorithms::{AlgoConfig, AlgoId};
use dprl::envs::EnvId;
use dprl::harness::{run, timing_file_name, ExperimentConfig, TimingRecord};

fn throughput(n_envs: usize, dir: &Path) -> f64 {
    let mut a = AlgoConfig::for_algorithm(AlgoId::Ppo);
    a.hidden = vec![64, 64];
    a.rollout_steps = 32;
    a.epochs = 1;
    a.minibatches = 1;
    let mut cfg = ExperimentConfig::new(EnvId::Pendulum, a, 16384, 16384, dir);
    cfg.n_envs = n_envs;
    cfg.eval_episodes = 1;
    cfg.seeds = vec![0];
    cfg.checkpoint = false;
    run(&cfg).unwrap();
    let text = std::fs::read_to_string(dir.join(timing_file_name(0))).unwrap();
    let last: TimingRecord = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    last.actions_per_sec
}

/// Median over alternating single/batched pairs, so drift in host speed
/// hits both sides of each ratio alike.
#[test]
fn batched_collection_is_at_least_four_times_faster() {
    let mut ratios = Vec::new();
    for _ in 0..5 {
        let single = throughput(1, tempfile::tempdir().unwrap().path());
        let batched = throughput(64, tempfile::tempdir().unwrap().path());
        println!("actions/sec: 1 env {:.0}, 64 envs {:.0}, ratio {:.2}", single, batched, batched / single);
        ratios.push(batched / single);
    }
    ratios.sort_by(f64::total_cmp);
    let median = ratios[2];
    println!("median ratio {:.2}", median);
    assert!(median >= 4.0, "median ratio {}", median);
}
