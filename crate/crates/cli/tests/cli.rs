use std::path::Path;
use std::process::{Command, Output};

fn mpa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpa")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

const TINY: &str = r#"{
    "episodes": 2, "n_eval": 2, "sample_pngs": 1,
    "encoder": {"widths": [8, 8], "strides": [2, 1]},
    "dmp": {"max_epochs": 2}
}"#;

#[test]
fn adapt_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let o = mpa(&["adapt", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "7", "--precision", "64"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("adapt: mIoU"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seeds"], serde_json::json!([7]));
    assert_eq!(report["config"]["precision"], 64);
    for f in ["report.csv", "curves/loss.svg", "curves/views.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(std::fs::read_dir(out.join("samples")).unwrap().count() > 0);
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    for json in [r#"{"episodes": 0}"#, r#"{"domains": ["mars-like"]}"#, "{", r#"{"typo": true}"#] {
        let cfg = write_config(dir.path(), json);
        let o = mpa(&["eval", "--config", &cfg]);
        assert_eq!(o.status.code(), Some(2), "{json}");
    }
    let o = mpa(&["eval", "--config", "/nonexistent/config.json"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mpa(&["eval", "--workers", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unsupported_precision_is_a_usage_error() {
    let o = mpa(&["eval", "--precision", "16"]);
    assert!(!o.status.success());
}

#[test]
fn diverging_episodes_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"episodes": 2, "n_eval": 1, "encoder": {"widths": [8], "strides": [1]},
            "dmp": {"max_epochs": 5, "lr": 1e30}}"#,
    );
    let o = mpa(&["adapt", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn gen_data_writes_specs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"domains": ["xray-like", "aerial-like"]}"#);
    let out = dir.path().join("data");
    let o = mpa(&["gen-data", "--config", &cfg, "--out", out.to_str().unwrap(), "--per-domain", "1"]);
    assert!(o.status.success());
    assert!(out.join("domains/xray-like.json").exists());
    assert!(out.join("samples/aerial-like_0_mask.png").exists());
}

#[test]
fn eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = |name: &str| {
        let out = dir.path().join(name);
        assert!(mpa(&["eval", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
        let mut r: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        r["wall_clock_seconds"] = 0.into();
        r
    };
    assert_eq!(run("a"), run("b"));
}
