use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
env = "pendulum"
horizon = 15
total_steps = 60
eval_interval = 20
eval_episodes = 2
seeds = [1, 2]
out_dir = "OUT"

[algo]
algorithm = "ALGO"
hidden = [8]
batch_size = 16
random_action_steps = 16
rollout_steps = 8
epochs = 2
minibatches = 2
k_steps = 3
diffusion_samples = 4
batch_samples = 2
"#;

fn dprl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dprl"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, algo: &str, extra: &str) -> String {
    let path = dir.join(format!("{}.toml", algo));
    let mut text = TINY.replace("ALGO", algo).replace("OUT", dir.join("default").to_str().unwrap());
    text.push_str(extra);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_metrics_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "sac", "");
    let out_dir = tmp.path().join("out");
    let o = dprl(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim(), out_dir.to_str().unwrap());
    let metrics = std::fs::read_to_string(out_dir.join("seed_7.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(!out_dir.join("seed_1.jsonl").exists());
    assert!(out_dir.join("summary.csv").exists());
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = write_config(tmp.path(), "sac", "bogus_key = 1\n");
    assert_eq!(dprl(&["run", "--config", &unknown]).status.code(), Some(2));
    let bad_algo = write_config(tmp.path(), "nope", "");
    assert_eq!(dprl(&["run", "--config", &bad_algo]).status.code(), Some(2));
    let ok = write_config(tmp.path(), "sac", "");
    let o = dprl(&["sweep", "--config", &ok, "--axis", "ksteps", "--out", tmp.path().join("s").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "denoising-step sweep of a Gaussian learner");
    assert_eq!(dprl(&["sweep", "--config", &ok, "--axis", "widths"]).status.code(), Some(2));
}

#[test]
fn missing_config_file_is_an_io_error() {
    assert_eq!(dprl(&["run", "--config", "/nonexistent/dprl.toml"]).status.code(), Some(1));
}

#[test]
fn numeric_failure_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    // a vanishing mixing coefficient blows up the flow's log-determinant
    let cfg = write_config(tmp.path(), "genpo", "mixing = 1e-12\n");
    let o = dprl(&["run", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn env_sweep_writes_comparison() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "ppo", "");
    let out = tmp.path().join("sweep");
    let o = dprl(&["sweep", "--config", &cfg, "--axis", "envs", "--values", "1,2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("envs,1,ok,"));
    assert!(rows[2].starts_with("envs,2,ok,"));
    assert!(out.join("envs_2").join("seed_2.jsonl").exists());
}

#[test]
fn eval_reports_degradation_and_rejects_large_perturbations() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "sac", "");
    let out = tmp.path().join("run");
    assert_eq!(dprl(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]).status.code(), Some(0));
    let ckpt = out.join("seed_1.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let o = dprl(&["eval", "--checkpoint", ckpt, "--perturb", "mass=1.5", "--episodes", "3", "--horizon", "20"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let nominal = report["nominal"]["mean_return"].as_f64().unwrap();
    let perturbed = report["perturbed"]["mean_return"].as_f64().unwrap();
    let degradation = report["degradation"].as_f64().unwrap();
    assert!((degradation - (nominal - perturbed) / nominal.abs()).abs() < 1e-12);

    let same = dprl(&["eval", "--checkpoint", ckpt, "--episodes", "3", "--horizon", "20"]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&same)).unwrap();
    assert_eq!(report["degradation"].as_f64(), Some(0.0));

    assert_eq!(dprl(&["eval", "--checkpoint", ckpt, "--perturb", "mass=2.0"]).status.code(), Some(2));
    assert_eq!(dprl(&["eval", "--checkpoint", ckpt, "--perturb", "gravity=1.1"]).status.code(), Some(2));
    assert_eq!(dprl(&["eval", "--checkpoint", ckpt, "--perturb", "mass"]).status.code(), Some(2));
}

#[test]
fn plot_emits_one_svg_per_metric() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "ppo", "");
    let out = tmp.path().join("run");
    assert_eq!(dprl(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]).status.code(), Some(0));
    let o = dprl(&["plot", "--dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let files: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert!(files.iter().any(|f| f.ends_with("mean_return.svg")));
    for f in &files {
        let svg = std::fs::read_to_string(f).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("env steps"));
    }

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(dprl(&["plot", "--dir", empty.path().to_str().unwrap()]).status.code(), Some(2));
}
