use std::path::Path;

use super::*;
use crate::algorithms::{AlgoConfig, AlgoId, Stats};
use crate::envs::{EnvId, EnvSpec};
use crate::error::Error;

fn tiny(algo: AlgoId, dir: &Path) -> ExperimentConfig {
    let mut a = AlgoConfig::for_algorithm(algo);
    a.hidden = vec![8];
    a.batch_size = 16;
    a.random_action_steps = 16;
    a.rollout_steps = 8;
    a.epochs = 2;
    a.minibatches = 2;
    a.k_steps = Some(3);
    a.diffusion_samples = 4;
    a.batch_samples = 2;
    let mut cfg = ExperimentConfig::new(EnvId::Pendulum, a, 60, 20, dir);
    cfg.horizon = Some(15);
    cfg.eval_episodes = 2;
    cfg.seeds = vec![3];
    cfg
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn zero_step_run_writes_headers_only() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(AlgoId::Sac, tmp.path());
    cfg.total_steps = 0;
    let dir = run(&cfg).unwrap();
    assert_eq!(read(&dir.join(metrics_file_name(3))), "");
    assert_eq!(read(&dir.join(SUMMARY_FILE)).trim(), "env_steps,mean_return,std_return,n_seeds");
    assert!(dir.join("config.toml").exists());
    assert!(dir.join("meta.json").exists());
}

#[test]
fn rerun_gives_identical_metrics() {
    for algo in [AlgoId::Sac, AlgoId::Ppo, AlgoId::Dacer, AlgoId::Genpo] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run(&tiny(algo, a.path())).unwrap();
        run(&tiny(algo, b.path())).unwrap();
        let name = metrics_file_name(3);
        let text = read(&a.path().join(&name));
        assert_eq!(text.lines().count(), 3, "{}", algo);
        assert_eq!(text, read(&b.path().join(&name)), "{}", algo);
        assert_eq!(read(&a.path().join(SUMMARY_FILE)), read(&b.path().join(SUMMARY_FILE)));
    }
}

/// Counts interval boundaries reached, stepping one vector step at a time.
fn eval_count_oracle(total: u64, interval: u64, n_envs: u64) -> usize {
    let mut steps = 0;
    let mut next = interval;
    let mut count = 0;
    while steps < total {
        steps += n_envs;
        while next <= steps && next <= total {
            count += 1;
            next += interval;
        }
    }
    count
}

#[test]
fn summary_rows_match_eval_points_and_means() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(AlgoId::Sac, tmp.path());
    cfg.seeds = vec![0, 1, 2, 3, 4];
    cfg.n_envs = 3;
    cfg.total_steps = 70;
    cfg.eval_interval = 20;
    let dir = run(&cfg).unwrap();
    let (header, rows) = read_summary(&dir.join(SUMMARY_FILE)).unwrap();
    assert_eq!(&header[..4], ["env_steps", "mean_return", "std_return", "n_seeds"]);
    assert_eq!(rows.len(), eval_count_oracle(70, 20, 3));
    let per_seed: Vec<Vec<MetricRecord>> = cfg
        .seeds
        .iter()
        .map(|&s| read_metrics(&dir.join(metrics_file_name(s))).unwrap())
        .collect();
    for (i, row) in rows.iter().enumerate() {
        let returns: Vec<f64> = per_seed.iter().map(|r| r[i].mean_return).collect();
        let mean = returns.iter().sum::<f64>() / 5.0;
        assert!((row[1].unwrap() - mean).abs() < 1e-12);
        let var = returns.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
        assert!((row[2].unwrap() - var.sqrt()).abs() < 1e-12);
        assert_eq!(row[3], Some(5.0));
    }
    let steps: Vec<u64> = per_seed[0].iter().map(|r| r.env_steps).collect();
    assert!(steps.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn config_toml_round_trip_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(AlgoId::Qvpo, tmp.path());
    let text = cfg.to_toml_string().unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    let bad_algo = text.replace("algorithm = \"qvpo\"", "algorithm = \"dqn\"");
    assert!(matches!(ExperimentConfig::from_toml_str(&bad_algo), Err(Error::Config(_))));
    let bad_env = text.replace("env = \"pendulum\"", "env = \"walker\"");
    assert!(matches!(ExperimentConfig::from_toml_str(&bad_env), Err(Error::Config(_))));
    let minimal = "env = \"pendulum\"\ntotal_steps = 10000\neval_interval = 5000\nout_dir = \"x\"\n[algo]\nalgorithm = \"sac\"\n";
    let m = ExperimentConfig::from_toml_str(minimal).unwrap();
    assert_eq!(m.seeds, vec![0, 1, 2, 3, 4]);
    assert_eq!(m.algo, AlgoConfig::for_algorithm(AlgoId::Sac));
}

#[test]
fn config_contract_violations() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(AlgoId::Sac, tmp.path());
    cfg.seeds.clear();
    assert!(matches!(run(&cfg), Err(Error::Config(_))));
    let mut cfg = tiny(AlgoId::Sac, tmp.path());
    cfg.total_steps = 5;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = tiny(AlgoId::Ppo, tmp.path());
    cfg.n_envs = 4;
    cfg.total_steps = 31;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg.total_steps = 32;
    cfg.validate().unwrap();
    let mut cfg = tiny(AlgoId::Sac, tmp.path());
    cfg.seeds = vec![1, 1];
    assert!(cfg.validate().is_err());
}

#[test]
fn env_sweep_makes_one_run_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(AlgoId::Ppo, tmp.path());
    cfg.algo.rollout_steps = 2;
    cfg.total_steps = 128;
    cfg.eval_interval = 64;
    let points = sweep_values(&cfg, SweepAxis::Envs, &DESK_ENV_COUNTS).unwrap();
    assert_eq!(points.len(), 3);
    for p in &points {
        assert!(p.dir.join(SUMMARY_FILE).exists());
        assert!(p.failure.is_none());
    }
    let cmp = read(&tmp.path().join(COMPARISON_FILE));
    assert_eq!(cmp.lines().count(), 4);
}

#[test]
fn k_sweep_requires_diffusion_learner() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(AlgoId::Ppo, tmp.path());
    assert!(matches!(sweep(&cfg, SweepAxis::KSteps), Err(Error::Config(_))));
    assert!(!tmp.path().join("ksteps_5").exists());
    assert!("depth".parse::<SweepAxis>().is_err());
}

#[test]
fn k_sweep_records_gradient_norms_per_k() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(AlgoId::Dacer, tmp.path());
    sweep_values(&cfg, SweepAxis::KSteps, &[2, 4]).unwrap();
    let (header, rows) = read_summary(&tmp.path().join(COMPARISON_FILE)).unwrap();
    let col = header.iter().position(|h| h == "actor_grad_norm_mean").unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!(r[col].unwrap().is_finite());
    }
    for k in [2, 4] {
        let recs = read_metrics(&tmp.path().join(format!("ksteps_{}", k)).join(metrics_file_name(3))).unwrap();
        assert!(recs.iter().skip(1).all(|r| r.grad_norms.contains_key("actor_grad_norm")));
    }
}

#[test]
fn sweep_of_one_value_equals_plain_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny(AlgoId::Td3, a.path());
    run(&cfg).unwrap();
    let swept = tiny(AlgoId::Td3, b.path());
    let points = sweep_values(&swept, SweepAxis::Envs, &[1]).unwrap();
    let name = metrics_file_name(3);
    assert_eq!(read(&a.path().join(&name)), read(&points[0].dir.join(&name)));
    assert_eq!(read(&a.path().join(SUMMARY_FILE)), read(&points[0].dir.join(SUMMARY_FILE)));
}

#[test]
fn ood_eval_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(AlgoId::Sac, tmp.path());
    run(&cfg).unwrap();
    let ckpt = tmp.path().join(checkpoint_file_name(3));
    let spec = cfg.spec().unwrap();
    let same = spec.perturbed("mass", 1.0).unwrap();
    let r = ood_eval(&ckpt, &spec, &same, 4, 9).unwrap();
    assert_eq!(r.nominal, r.perturbed);
    assert_eq!(r.degradation, 0.0);
    let heavy = spec.perturbed("mass", 1.5).unwrap();
    let r = ood_eval(&ckpt, &spec, &heavy, 4, 9).unwrap();
    assert!(r.degradation.is_finite());
    assert!(spec.perturbed("mass", 1.6).is_err());
    let cart = EnvSpec::new(EnvId::CartpoleContinuous);
    assert!(ood_eval(&ckpt, &cart, &cart, 2, 0).is_err());
}

fn record(steps: u64, ret: f64, loss: f64) -> MetricRecord {
    let mut r = MetricRecord {
        env_steps: steps,
        mean_return: ret,
        ..Default::default()
    };
    r.losses.insert("critic_loss".into(), loss);
    r
}

fn write_records(path: &Path, recs: &[MetricRecord]) {
    let text: String = recs.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    std::fs::write(path, text).unwrap();
}

#[test]
fn plots_one_file_per_metric_with_all_points() {
    let tmp = tempfile::tempdir().unwrap();
    let recs: Vec<MetricRecord> = (1..=4).map(|i| record(10 * i, -(i as f64), 0.5 * i as f64)).collect();
    write_records(&tmp.path().join(metrics_file_name(0)), &recs);
    let files = emit_plots(tmp.path()).unwrap();
    assert_eq!(files.len(), 2);
    for f in &files {
        let svg = read(f);
        let line = svg.lines().find(|l| l.contains("class=\"mean\"")).unwrap();
        let pts = line.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split_whitespace().count(), 4);
        assert!(svg.contains("env steps"));
    }
    let c = curves(&[recs]);
    assert!(c.iter().all(|c| c.std.iter().all(|&s| s == 0.0)));
}

#[test]
fn plot_band_spans_seed_spread() {
    let a = vec![record(10, -1.0, 0.0), record(20, -3.0, 0.0)];
    let b = vec![record(10, -3.0, 0.0), record(20, -3.0, 0.0)];
    let c = curves(&[a, b]);
    let ret = c.iter().find(|c| c.metric == "mean_return").unwrap();
    assert_eq!(ret.mean, vec![-2.0, -3.0]);
    assert_eq!(ret.std, vec![1.0, 0.0]);
}

#[test]
fn plots_need_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(emit_plots(tmp.path()).is_err());
}

#[test]
fn accumulator_splits_and_tracks_max() {
    let mut acc = StatAccumulator::default();
    let mut s = Stats::new();
    s.insert("critic_loss".into(), 1.0);
    s.insert("actor_grad_norm".into(), 2.0);
    s.insert("alpha".into(), 0.1);
    acc.add_update(&s);
    s.insert("critic_loss".into(), 3.0);
    s.insert("actor_grad_norm".into(), 6.0);
    acc.add_update(&s);
    let mut rec = MetricRecord::default();
    acc.drain_into(&mut rec);
    assert_eq!(rec.updates, 2);
    assert_eq!(rec.losses["critic_loss"], 2.0);
    assert_eq!(rec.grad_norms["actor_grad_norm"], 4.0);
    assert_eq!(rec.grad_norms["actor_grad_norm_max"], 6.0);
    assert_eq!(rec.other["alpha"], 0.1);
    s.insert("actor_grad_norm".into(), f64::NAN);
    acc.add_update(&s);
    let mut rec = MetricRecord::default();
    acc.drain_into(&mut rec);
    assert!(rec.grad_norms["actor_grad_norm_max"].is_nan());
}
