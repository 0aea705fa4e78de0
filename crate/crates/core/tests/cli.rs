use std::path::Path;
use std::process::{Command, Output};

fn mvm(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvm"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

const SMALL: &str = r#"{"data": {"source": "phantom", "params": {"num_frames": 12, "seed": 5}, "train": 1, "val": 0, "test": 1}}"#;

#[test]
fn malformed_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\"ks\": ").unwrap();
    let o = mvm(&["phantom-gen", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config error"));
}

#[test]
fn invalid_config_values_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"crop_size": 48, "phase_train": {"input_size": 32}}"#).unwrap();
    let o = mvm(&["ksweep", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_study_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("nowhere");
    let o = mvm(&["metrics", "--pred", nowhere.to_str().unwrap(), "--gt", nowhere.to_str().unwrap(), "--k", "1"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn learned_interpolation_requires_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = mvm(&["infer-interp", "--study", "x", "--k", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--checkpoint"));
}

#[test]
fn linear_fill_and_score_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let c = cfg.to_str().unwrap();
    let data = dir.path().join("data");
    assert!(mvm(&["phantom-gen", "--config", c], &data).status.success());
    let study = data.join("test").join("phantom-2005");
    assert!(study.is_dir());

    let filled = dir.path().join("filled");
    let st = study.to_str().unwrap();
    let o = mvm(&["infer-interp", "--config", c, "--study", st, "--k", "2", "--method", "linear"], &filled);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let scored = dir.path().join("scored");
    let o = mvm(&["metrics", "--config", c, "--pred", filled.to_str().unwrap(), "--gt", st, "--k", "2"], &scored);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(scored.join("metrics.json")).unwrap()).unwrap();
    assert!(summary["dice"]["mean"].as_f64().unwrap() > 0.6);
    assert!(summary["psnr"]["mean"].as_f64().unwrap() > 10.0);
    let frames: Vec<serde_json::Value> = serde_json::from_slice(&std::fs::read(scored.join("frames.json")).unwrap()).unwrap();
    assert_eq!(frames.len(), 8);
}
