//! Exit codes and artifacts of the `sgds` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
train_episodes = 16
episode_chunks = 3

[schedule]
num_steps = 10

[denoiser]
hidden = [12]
cond_dim = 2
epochs = 1
batch_size = 8

[jepa]
embed_dim = 4
encoder_hidden = [8]
predictor_hidden = [8]
epochs = 1
batch_size = 8

[bon]
n = 2

[eval]
num_conditions = 2
horizon_chunks = 1

[oracle]
n_samples = 4000
num_steps = 50
"#;

fn sgds(cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgds"))
        .arg("--cache-dir")
        .arg(cache)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(sgds(tmp.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(sgds(tmp.path(), &["evaluate"]).status.code(), Some(1));
    assert_eq!(sgds(tmp.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = write_config(tmp.path(), "unknown.toml", "[bon]\nm = 3\n");
    let out = sgds(tmp.path(), &["train-denoiser", &unknown]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bon.m"));

    let bad_type = write_config(tmp.path(), "type.toml", "[schedule]\nnum_steps = \"many\"\n");
    assert_eq!(sgds(tmp.path(), &["train-jepa", &bad_type]).status.code(), Some(2));

    let missing = tmp.path().join("missing.toml");
    assert_eq!(sgds(tmp.path(), &["train-jepa", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn evaluate_writes_report_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let cache = tmp.path().join("cache");
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    let out = sgds(&cache, &["evaluate", &cfg, "--out", first.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = sgds(&cache, &["--threads", "2", "evaluate", &cfg, "--out", second.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["report.json", "summary.csv"] {
        assert_eq!(fs::read(first.join(name)).unwrap(), fs::read(second.join(name)).unwrap(), "{name}");
    }
    assert!(first.join("timings.json").exists());
    let csv = fs::read_to_string(first.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn generate_prints_a_rollout() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let out = sgds(&tmp.path().join("cache"), &["generate", &cfg, "--seed", "5", "--arm", "c"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["arm"], "c");
    assert_eq!(doc["frames"].as_array().unwrap().len(), 4);

    let bad = sgds(&tmp.path().join("cache"), &["generate", &cfg, "--seed", "5", "--arm", "z"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn oracle_check_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let out_dir = tmp.path().join("oracle");
    let out = sgds(tmp.path(), &["oracle-check", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(out_dir.join("oracle.json").exists());

    // Three samples cannot pin the variance to 10%.
    let coarse = write_config(tmp.path(), "coarse.toml", "[oracle]\nn_samples = 3\nnum_steps = 20\n");
    let out = sgds(tmp.path(), &["oracle-check", &coarse, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stdout));
}
