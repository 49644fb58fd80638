use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seeds = [1]

[network]
hidden = [16]
embedding_dim = 4

[train]
base_epochs = 8
batch_size = 32

[data.synthetic]
classes = 10
base_classes = 6
input_dim = 8
train_per_class = 30
test_per_class = 20

[flatness]
samples = 40

[sweep]
bounds = [0.005, 0.02]

[convergence]
steps = 30
"#;

fn f2m(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_f2m"))
        .args(args)
        .env("F2M_THREADS", "1")
        .output()
        .unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_subcommand_exits_with_usage_error() {
    let out = f2m(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = f2m(&["run", "-c", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("train.learning_rate"), "{stderr}");
}

#[test]
fn invalid_override_is_reported() {
    let out = f2m(&["run", "--bound=-1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`b`"));
    let out = f2m(&["run", "--flags", "fm,xx"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("flags"));
}

#[test]
fn every_subcommand_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    for cmd in ["train-base", "run", "ablation", "sweep", "flatness", "convergence"] {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let out_dir = dir.path().join(format!("{cmd}-{rep}"));
            let out = f2m(&[cmd, "-c", &config, "-o", out_dir.to_str().unwrap()]);
            assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
            outputs.push(std::fs::read(out_dir.join("metrics.json")).unwrap());
            let manifest = std::fs::read_to_string(out_dir.join("run_manifest.json")).unwrap();
            assert!(manifest.contains(&format!("\"command\": \"{cmd}\"")));
        }
        assert_eq!(outputs[0], outputs[1], "{cmd} metrics differ between runs");
    }
}

#[test]
fn manifest_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let first = dir.path().join("first");
    let out = f2m(&[
        "run",
        "-c",
        &config,
        "--seed",
        "4",
        "--bound",
        "0.02",
        "-o",
        first.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let second = dir.path().join("second");
    let manifest = first.join("run_manifest.json");
    let out = f2m(&["run", "-c", manifest.to_str().unwrap(), "-o", second.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(first.join("metrics.json")).unwrap(),
        std::fs::read(second.join("metrics.json")).unwrap()
    );
}

#[test]
fn baseline_and_resume_flags() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let base = dir.path().join("base");
    assert!(f2m(&["train-base", "-c", &config, "-o", base.to_str().unwrap()])
        .status
        .success());
    let resumed = dir.path().join("resumed");
    let out = f2m(&[
        "run",
        "-c",
        &config,
        "--resume",
        base.join("state").to_str().unwrap(),
        "-o",
        resumed.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(resumed.join("state/params.json").exists());

    let plain = dir.path().join("plain");
    let out = f2m(&["run", "--baseline", "-c", &config, "-o", plain.to_str().unwrap()]);
    assert!(out.status.success());
    let manifest = std::fs::read_to_string(plain.join("run_manifest.json")).unwrap();
    assert!(manifest.contains("\"mode\": \"baseline\""));
}

#[test]
fn thread_setting_must_be_numeric() {
    let out = Command::new(env!("CARGO_BIN_EXE_f2m"))
        .args(["convergence"])
        .env("F2M_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
