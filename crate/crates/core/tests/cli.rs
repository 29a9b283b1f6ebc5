use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "experiment": "infoprop",
  "normalizers": ["none", "layer"],
  "model": {"kind": "mlp", "depth": 4, "width": 16, "num_classes": 4},
  "dataset": {"id": "synthetic", "samples": 200, "shape": [2, 2, 2], "classes": 4},
  "batch_size": 32
}"#;

fn normlab(args: &[&str], data_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_normlab"))
        .args(args)
        .env("NORMLAB_DATA_DIR", data_dir)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_writes_results_and_prints_one_line_per_normalizer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", CONFIG);
    let out = dir.path().join("out");
    let o = normlab(&["run", &cfg, "--out", out.to_str().unwrap(), "--seed", "2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.lines().any(|l| l.starts_with("none: ")));
    assert!(stdout.lines().any(|l| l.starts_with("layer: ")));
    let csv = fs::read_to_string(out.join("info_prop_correlation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    assert!(out.join("run_manifest.json").exists());

    let again = dir.path().join("again");
    let o = normlab(&["run", &cfg, "--out", again.to_str().unwrap(), "--seed", "2", "--workers", "2"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    for f in ["info_prop_correlation.csv", "run_manifest.json"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad_norm = write(dir.path(), "n.json", &CONFIG.replace("\"layer\"", "\"batchnorm2\""));
    let o = normlab(&["run", &bad_norm], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("batchnorm2") && err.contains("prelayernorm"), "{err}");

    let unknown = write(dir.path(), "u.json", &CONFIG.replace("\"batch_size\"", "\"bs\": 1, \"batch_size\"").replace("\"depth\"", "\"layers\": 2, \"depth\""));
    let o = normlab(&["validate", &unknown], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("bs") && err.contains("model.layers"), "{err}");

    let good = write(dir.path(), "g.json", CONFIG);
    let o = normlab(&["validate", &good], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("ok: infoprop"));
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let text = CONFIG
        .replace(r#"{"id": "synthetic", "samples": 200, "shape": [2, 2, 2], "classes": 4}"#, r#"{"id": "mnist", "pool": 7}"#)
        .replace("\"num_classes\": 4", "\"num_classes\": 10");
    let cfg = write(dir.path(), "m.json", &text);
    let o = normlab(&["validate", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = normlab(&["run", &cfg, "--out", dir.path().join("o").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn datasets_check_reports_each_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let o = normlab(&["datasets", "check"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("synthetic: ok"));
    assert!(out.contains("mnist: missing"));
    assert!(out.contains("cifar10: missing"));

    fs::create_dir_all(dir.path().join("mnist")).unwrap();
    fs::write(dir.path().join("mnist").join("train-images-idx3-ubyte"), [0xDE, 0xAD]).unwrap();
    let o = normlab(&["datasets", "check"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8(o.stdout).unwrap().contains("mnist: invalid"));
}
