//! Harness round trips on a deliberately tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};

use sgds::harness::report::{read_report, summary_csv};
use sgds::harness::{parse_config_str, run_experiment, write_report, ExperimentConfig, HarnessError, RunOptions};

const TINY: &str = r#"
seed = 7

[data]
train_episodes = 24
episode_chunks = 3

[schedule]
num_steps = 12

[denoiser]
hidden = [16]
cond_dim = 2
epochs = 2
batch_size = 8

[jepa]
embed_dim = 4
encoder_hidden = [8]
predictor_hidden = [8]
epochs = 2
batch_size = 8

[guidance]
omega_s = 1.0

[bon]
n = 3

[eval]
num_conditions = 3
horizon_chunks = 2
"#;

fn tiny() -> ExperimentConfig {
    parse_config_str(TINY).unwrap()
}

fn opts(dir: &Path) -> RunOptions {
    RunOptions {
        cache_dir: dir.to_path_buf(),
    }
}

fn entry(cache: &Path, kind: &str) -> PathBuf {
    fs::read_dir(cache)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with(kind))
        .unwrap_or_else(|| panic!("no {kind} entry in {}", cache.display()))
}

#[test]
fn warm_run_reuses_cache_and_reproduces_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let (cold, t_cold) = run_experiment(&cfg, &opts(tmp.path())).unwrap();
    let (warm, t_warm) = run_experiment(&cfg, &opts(tmp.path())).unwrap();
    assert!(!t_cold.denoiser_from_cache && !t_cold.jepa_from_cache);
    assert!(t_warm.denoiser_from_cache && t_warm.jepa_from_cache);
    assert_eq!(cold, warm);
    assert_eq!(cold.rows.len(), 3);
    assert_eq!(cold.arms.len(), 3);
}

#[test]
fn report_files_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (report, _) = run_experiment(&tiny(), &opts(&tmp.path().join("cache"))).unwrap();
    let out = tmp.path().join("out");
    write_report(&report, &out).unwrap();
    assert_eq!(read_report(&out.join("report.json")).unwrap(), report);

    let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(csv, summary_csv(&report));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "arm,mean_plausibility_error,median_plausibility_error,mean_surprise,n_conditions");
    assert_eq!(lines.len(), 4);
    for (line, arm) in lines[1..].iter().zip(["a", "b", "c"]) {
        assert!(line.starts_with(&format!("{arm},")), "{line}");
        assert!(line.ends_with(",3"), "{line}");
    }
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    run_experiment(&cfg, &opts(tmp.path())).unwrap();
    let dir = entry(tmp.path(), "denoiser");
    let victim = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap() != "meta.json")
        .unwrap();
    let mut bytes = fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    fs::write(&victim, bytes).unwrap();
    match run_experiment(&cfg, &opts(tmp.path())) {
        Err(HarnessError::CacheChecksum(path)) => assert!(path.contains("denoiser"), "{path}"),
        other => panic!("expected a checksum error, got {other:?}"),
    }
}

#[test]
fn foreign_config_hash_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    run_experiment(&cfg, &opts(tmp.path())).unwrap();
    let meta_path = entry(tmp.path(), "jepa").join("meta.json");
    let mut meta: serde_json::Value = serde_json::from_slice(&fs::read(&meta_path).unwrap()).unwrap();
    meta["config_hash"] = serde_json::Value::String("0".repeat(64));
    fs::write(&meta_path, serde_json::to_vec(&meta).unwrap()).unwrap();
    assert!(matches!(
        run_experiment(&cfg, &opts(tmp.path())),
        Err(HarnessError::CacheMismatch { .. })
    ));
}

#[test]
fn reference_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
    let cfg = sgds::harness::parse_config(&path).unwrap();
    assert_eq!(cfg.world.frame_width, 32);
    assert_eq!(cfg.world.chunk_frames, 4);
    assert_eq!(cfg.schedule.num_steps, 100);
    assert_eq!(cfg.eval.num_conditions, 50);
    assert_eq!(cfg.bon_n, 16);
}
