use crowdlearn::experiment::load_datasets;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn crowdlearn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowdlearn")).args(args).output().expect("binary runs")
}

const TINY: &str = r#"
name = "tiny"
seed = 3

[dataset]
train = 60
test = 20
source = { kind = "blobs", classes = 3, size = 12 }

[[annotators]]
name = "a"
noise = { kind = "symmetric", rate = 0.2 }

[[annotators]]
name = "b"
noise = { kind = "pairflip", rate = 0.3 }

[model]
classifier = { kind = "mlp", hidden = 8 }

[train]
epochs = 2
batch_size = 16
learning_rate = 0.01
regularizer = "entropy"
lambda = { initial = 0.01, ratio = 2.0 }
"#;

fn config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn stdout_lines(o: &Output) -> Vec<String> {
    String::from_utf8_lossy(&o.stdout).lines().map(str::to_owned).collect()
}

#[test]
fn run_is_reproducible_and_comparable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "tiny.toml", TINY);
    let out = tmp.path().join("runs");
    let args = ["run", "--quiet", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let first = crowdlearn(&args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let dir = PathBuf::from(&stdout_lines(&first)[0]);
    let csv = std::fs::read(dir.join("report.csv")).unwrap();
    for f in ["report.json", "manifest.json", "summary.json", "model.ckpt", "recovery.json", "confidence.csv", "confusion/annotator0-learned.svg"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let second = crowdlearn(&args);
    assert!(second.status.success());
    assert_eq!(std::fs::read(dir.join("report.csv")).unwrap(), csv);

    // Replaying the manifest reproduces the run.
    let replay = crowdlearn(&["run", "--quiet", "--config", dir.join("manifest.json").to_str().unwrap()]);
    assert!(replay.status.success(), "{}", String::from_utf8_lossy(&replay.stderr));
    assert_eq!(PathBuf::from(&stdout_lines(&replay)[0]), dir);
    assert_eq!(std::fs::read(dir.join("report.csv")).unwrap(), csv);

    let other = crowdlearn(&[&args[..], &["--seed", "9", "--epochs", "3"]].concat());
    assert!(other.status.success());
    let other_dir = stdout_lines(&other)[0].clone();
    let table = crowdlearn(&["compare", dir.to_str().unwrap(), &other_dir]);
    assert!(table.status.success());
    let lines = stdout_lines(&table);
    assert_eq!(lines.len(), 4, "{lines:?}");
    assert!(lines[0].starts_with("run,name,regularizer,epochs"));
    assert_eq!(lines[3], "# warning: runs differ in epoch count");
}

#[test]
fn invalid_rate_is_a_config_error_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "bad.toml", &TINY.replace("rate = 0.2", "rate = 1.2"));
    let o = crowdlearn(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("annotators[0].noise.rate"), "{err}");
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "bad.toml", &TINY.replace("epochs = 2", "epochs = 2\nepoch_count = 4"));
    let o = crowdlearn(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch_count"));
}

#[test]
fn missing_files_are_runtime_failures() {
    let o = crowdlearn(&["run", "--config", "/nonexistent/config.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let o = crowdlearn(&["compare", "/nonexistent/run"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn make_dataset_with_identity_noise_keeps_clean_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TINY.replace("rate = 0.2", "rate = 0.0").replace("kind = \"pairflip\", rate = 0.3", "kind = \"symmetric\", rate = 0.0");
    let cfg = config(tmp.path(), "clean.toml", &text);
    let o = crowdlearn(&["make-dataset", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let data = load_datasets(Path::new(&stdout_lines(&o)[0])).unwrap();
    assert_eq!(data.train.len(), 60);
    for a in data.train.annotators() {
        assert_eq!(a.labels, data.train.clean_labels());
    }
}

#[test]
fn theorem1_prints_a_report() {
    let o = crowdlearn(&["theorem1", "--classes", "3", "--noise", "symmetric", "--rate", "0.3", "--samples", "3000"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["learned_vs_empirical"]["max_tv"].as_f64().unwrap() < 0.01);
    let bad = crowdlearn(&["theorem1", "--rate", "1.2"]);
    assert_eq!(bad.status.code(), Some(1));
}
