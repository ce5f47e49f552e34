use std::path::Path;
use std::process::{Command, Output};

fn taskweigh(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taskweigh"))
        .args(args)
        .env("TASKWEIGH_OUT", out_root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

const TINY: &str = r#"
preset = "balanced-small"
seed = 2
epochs = 2
lr = 1e-3

[strategy]
id = "uncertainty"

[benchmark]
grid = 8
n_train_det = 16
n_train_seg = 16
n_val = 8
max_objects = 2

[arch]
trunk_channels = [4]
det_hidden = 4
"#;

#[test]
fn fixtures_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let o = taskweigh(&["fixtures"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("meta-async"));
}

#[test]
fn run_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    let o = taskweigh(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["result.json", "curves.csv", "snapshots/final.snap"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let result: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(result["epochs"].as_array().unwrap().len(), 2);
}

#[test]
fn default_output_goes_under_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let o = taskweigh(&["run", "--config", cfg.to_str().unwrap(), "--strategy", "none"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("run-balanced-small-none-seed2/result.json").exists());
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "batch_size = 0\nlr = -1.0\n").unwrap();
    let o = taskweigh(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("batch_size"), "{err}");

    std::fs::write(&cfg, "colour = \"red\"\n").unwrap();
    let o = taskweigh(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn meta_rejects_categorical_space() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("meta.toml");
    let text = format!(
        "{TINY}\n[meta.space]\nvariables = [{{ name = \"w_seg\", kind = \"categorical\", choices = [\"a\", \"b\"] }}]\n"
    );
    std::fs::write(&cfg, text).unwrap();
    let o = taskweigh(&["meta", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
