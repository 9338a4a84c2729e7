use std::path::Path;
use std::process::{Command, Output};

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let text = format!(
        r#"
seed = 3
[data]
input_dir = "{0}/edf"
cache_dir = "{0}/cache"
output_dir = "{0}/runs"
[data.synthetic]
subjects = 3
epochs_per_night = 24
seq_len = 4
[model]
filters = 4
epb_hidden = 4
attention_size = 4
spb_hidden = 4
seq_len = 4
[pretrain]
valid_subjects = ["syn002"]
epochs = 2
stride = 2
[personalize]
subjects = ["syn002"]
alphas = [0.0, 0.4]
finetune_epochs = 4
snapshot_every = 2
stride = 2
{extra}
"#,
        dir.display()
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqsleep"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("SEQSLEEP_WORKERS", "1")
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn full_pipeline_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    for cmd in ["synthesize", "preprocess", "pretrain", "personalize", "evaluate"] {
        let out = run(&config, &[cmd]);
        assert_eq!(out.status.code(), Some(0), "{cmd}: {}", stderr(&out));
    }
    let runs = dir.path().join("runs");
    for file in ["si.ckpt", "pretrain_manifest.json", "report.csv", "curves.json", "study.json"] {
        assert!(runs.join(file).exists(), "missing {file}");
    }
    let snapshots = runs.join("personalized/syn002/all_a0.4");
    assert!(snapshots.join("e002.ckpt").exists() && snapshots.join("e004.ckpt").exists());
    let report = std::fs::read_to_string(runs.join("report.csv")).unwrap();
    assert!(report.lines().count() > 1);
}

#[test]
fn unknown_key_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[evaluate]\nbetta = 0.5\n");
    let out = run(&config, &["synthesize"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("evaluate.betta"), "{}", stderr(&out));
}

#[test]
fn unknown_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let out = run(&config, &["--set", "pretrain.epochz=3", "pretrain"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("pretrain.epochz"), "{}", stderr(&out));
}

#[test]
fn override_replaces_file_value() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    assert_eq!(run(&config, &["synthesize"]).status.code(), Some(0));
    let other = dir.path().join("other");
    let set = format!("data.cache_dir={:?}", other.display().to_string());
    let out = run(&config, &["--set", &set, "preprocess"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(other.join("syn000_n1.night").exists());
    assert!(!dir.path().join("cache").exists());
}

#[test]
fn invalid_value_and_bad_usage_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let out = run(&config, &["--set", "evaluate.beta=1.5", "evaluate"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("evaluate.beta"));
    assert_eq!(run(&config, &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn preprocess_without_recordings_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    std::fs::create_dir_all(dir.path().join("edf")).unwrap();
    let out = run(&config, &["preprocess"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn corrupt_cache_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    std::fs::create_dir_all(dir.path().join("cache")).unwrap();
    std::fs::write(dir.path().join("cache/syn000_n1.night"), b"not a cache").unwrap();
    let out = run(&config, &["pretrain"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}
