use std::path::Path;
use std::process::{Command, Output};

fn vbfn(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vbfn"));
    cmd.args(args).env_remove("VBFN_SEED").env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: &str = "\
data.synthetic_count = 20
model.hidden_width = 8
model.time_embed_dim = 4
train.batch_size = 4
train.steps = 6
schedule.T = 4
";

#[test]
fn train_then_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("train");
    let o = vbfn(&["train", "--config", &cfg, "--set", "seed=3", "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echoed.contains("seed = 3") && echoed.contains("train.steps = 6"));

    let ck = out.join("checkpoint.json");
    let sample_dir = dir.path().join("sample");
    let o = vbfn(
        &["sample", "--checkpoint", ck.to_str().unwrap(), "--count", "5", "--out", sample_dir.to_str().unwrap()],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("\"count\": 5"));
    assert!(sample_dir.join("samples.jsonl").exists());
    assert!(sample_dir.join("config.txt").exists());
}

#[test]
fn seed_environment_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}seed = 1\n"));
    let out = dir.path().join("t");
    let o = vbfn(&["train", "--config", &cfg, "--out", out.to_str().unwrap()], &[("VBFN_SEED", "77")]);
    assert!(o.status.success());
    assert!(std::fs::read_to_string(out.join("config.txt")).unwrap().contains("seed = 77"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "solver.tolerence = 1e-6\n");
    let o = vbfn(&["inspect-precision", "--config", &cfg], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("solver.cg_tol"));

    let o = vbfn(&["inspect-precision", "--set", "schedule.T=abc"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_files_exit_with_four() {
    let o = vbfn(&["sample", "--checkpoint", "/nonexistent/ck.json", "--count", "1"], &[]);
    assert_eq!(o.status.code(), Some(4));
    let o = vbfn(&["inspect-precision", "--config", "/nonexistent/run.cfg"], &[]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn verify_filter_and_fault() {
    let o = vbfn(&["verify", "--filter", "diagonal"], &[]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).all(|l| l.contains("diagonal-reduction/")));

    let o = vbfn(&["verify", "--filter", "spd", "--fault", "laplacian-sign"], &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAIL spd/"));
}

#[test]
fn inspect_precision_prints_json() {
    let o = vbfn(&["inspect-precision", "--set", "data.synthetic_count=10"], &[]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let blocks = v["blocks"].as_array().unwrap();
    assert_eq!(blocks.len(), 2);
    for b in blocks {
        assert!(b["condition_bound"].as_f64().unwrap() >= 1.0);
        assert!(b["dim"].as_u64().unwrap() > 0);
    }
}

#[test]
fn bench_emits_csv() {
    let o = vbfn(&["bench", "--dims", "16,32", "--repeats", "1"], &[]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "D,method,iters,seconds,residual");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("16,cg,"));
    assert!(lines[2].starts_with("16,cholesky,"));
}
