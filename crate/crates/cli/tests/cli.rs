use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn heinfer(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heinfer")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn export(dir: &Path, fixture: &str) {
    let out = heinfer(&["bench", "export-fixture", "--fixture", fixture, "--dir", ".", "--inputs", "1"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_calibration_exits_two_and_names_the_file() {
    let dir = TempDir::new().unwrap();
    export(dir.path(), "cryptonets");
    let out = heinfer(&["keyparams", "-m", "cryptonets.onnx", "-c", "absent.zip", "-o", "kp.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.zip"));
    assert!(!dir.path().join("kp.json").exists());
}

#[test]
fn inference_prints_a_json_report() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    export(d, "cryptonets");
    let steps: [&[&str]; 3] = [
        &[
            "keyparams",
            "-m",
            "cryptonets.onnx",
            "-c",
            "cryptonets-calibration.zip",
            "-o",
            "kp.json",
            "--backend",
            "tfhe",
        ],
        &["keygen", "-p", "kp.json", "--seed", "4"],
        &["encrypt", "-k", "secret.key", "-i", "cryptonets-input-0.zip", "-o", "x.ct"],
    ];
    for args in steps {
        assert!(heinfer(args, d).status.success(), "{args:?}");
    }
    let out = Command::new(env!("CARGO_BIN_EXE_heinfer"))
        .args(["inference", "-m", "cryptonets.onnx", "-e", "eval.key", "-i", "x.ct", "-o", "y.ct"])
        .env("HEINFER_THREADS", "1")
        .current_dir(d)
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["backend"], "tfhe");
    assert_eq!(report["output_shape"], serde_json::json!([1, 10]));
    assert!(report["latency_ms"].as_f64().unwrap() >= 0.0);
    assert!(report["flushes"].as_u64().unwrap() >= 1);

    // The evaluation key cannot decrypt.
    let out = heinfer(&["decrypt", "-k", "eval.key", "-i", "y.ct", "-o", "y.zip"], d);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unsupported_degree_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = heinfer(&["keyparams", "-m", "a", "-c", "b", "--relu-degree", "5"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn golden_bench_passes_and_emits_json() {
    let dir = TempDir::new().unwrap();
    let out = heinfer(&["bench", "golden", "--json"], dir.path());
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["rows"].as_array().unwrap().len() >= 17);
}
