use std::path::{Path, PathBuf};

use heinfer_core::backend::format::{CT_MAGIC, EVAL_MAGIC, SECRET_MAGIC};
use heinfer_core::fixtures::{build_fixture, FixtureName};
use heinfer_core::graph::to_onnx_bytes;
use heinfer_core::harness::{run_pipeline, scan_for_weights};
use heinfer_core::params::BackendKind;
use heinfer_core::protocol::{
    cmd_decrypt, cmd_encrypt, cmd_inference, cmd_keygen, cmd_keyparams, read_tensor, sidecar_path, write_tensor,
    KeyparamsOptions, ProtocolError,
};
use heinfer_core::tensor::Tensor;
use tempfile::TempDir;

struct Setup {
    dir: TempDir,
    model: PathBuf,
    kp: PathBuf,
    sk: PathBuf,
    ek: PathBuf,
}

impl Setup {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn input(&self, name: &str, x: &Tensor) -> PathBuf {
        let p = self.path(name);
        write_tensor(&p, "input", x).unwrap();
        p
    }
}

fn setup(name: FixtureName, opts: &KeyparamsOptions) -> Setup {
    let dir = TempDir::new().unwrap();
    let fx = build_fixture(name, 1);
    let model = dir.path().join("model.onnx");
    std::fs::write(&model, to_onnx_bytes(&fx.graph)).unwrap();
    let calib = dir.path().join("calibration.zip");
    std::fs::write(&calib, fx.calibration.to_zip().unwrap()).unwrap();
    let kp = dir.path().join("keyparams.json");
    cmd_keyparams(&model, &calib, &kp, opts).unwrap();
    let (sk, ek) = (dir.path().join("secret.key"), dir.path().join("eval.key"));
    cmd_keygen(&kp, &sk, &ek, Some(1)).unwrap();
    Setup { dir, model, kp, sk, ek }
}

fn code<T: std::fmt::Debug>(r: Result<T, ProtocolError>) -> (i32, String) {
    let e = r.unwrap_err();
    (e.exit_code(), e.message)
}

fn sample(name: FixtureName, seed: u64) -> Tensor {
    build_fixture(name, 1).sample_inputs(1, seed).remove(0)
}

#[test]
fn missing_calibration_file_exits_two_naming_the_path() {
    let s = setup(FixtureName::CryptoNets, &KeyparamsOptions::default());
    let missing = s.path("nope.zip");
    let (c, msg) = code(cmd_keyparams(&s.model, &missing, &s.path("k2.json"), &KeyparamsOptions::default()));
    assert_eq!(c, 2);
    assert!(msg.contains(&missing.display().to_string()), "{msg}");
}

#[test]
fn keyparams_for_lenet() {
    let s = setup(FixtureName::LeNet5, &KeyparamsOptions::default());
    let kp: serde_json::Value = serde_json::from_slice(&std::fs::read(&s.kp).unwrap()).unwrap();
    assert_eq!(kp["ckks"]["log2_n"], 14);
    assert!(sidecar_path(&s.model).exists());
    let tfhe = KeyparamsOptions { backend: BackendKind::Tfhe, lambda_bits: 80, ..KeyparamsOptions::default() };
    let s = setup(FixtureName::LeNet5, &tfhe);
    let kp: serde_json::Value = serde_json::from_slice(&std::fs::read(&s.kp).unwrap()).unwrap();
    assert_eq!(kp["tfhe"]["rlwe_n"], 2048);
}

#[test]
fn keygen_is_deterministic_and_separates_roles() {
    let s = setup(FixtureName::CryptoNets, &KeyparamsOptions::default());
    let (sk2, ek2) = (s.path("sk2"), s.path("ek2"));
    let id1 = cmd_keygen(&s.kp, &sk2, &ek2, Some(1)).unwrap();
    assert_eq!(std::fs::read(&sk2).unwrap(), std::fs::read(&s.sk).unwrap());
    assert_eq!(std::fs::read(&ek2).unwrap(), std::fs::read(&s.ek).unwrap());
    let id2 = cmd_keygen(&s.kp, &s.path("sk3"), &s.path("ek3"), Some(2)).unwrap();
    assert_ne!(id1, id2);
    let eval = std::fs::read(&s.ek).unwrap();
    assert_eq!(eval[..4], EVAL_MAGIC);
    assert!(!eval.windows(4).any(|w| w == SECRET_MAGIC));
}

#[test]
fn keyparams_with_unknown_version_are_rejected() {
    let s = setup(FixtureName::CryptoNets, &KeyparamsOptions::default());
    let text = std::fs::read_to_string(&s.kp).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
    let bad = s.path("bad.json");
    std::fs::write(&bad, text).unwrap();
    assert_eq!(code(cmd_keygen(&bad, &s.path("a"), &s.path("b"), None)).0, 2);
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(cmd_keygen(&bad, &s.path("a"), &s.path("b"), None)).0, 2);
}

#[test]
fn encrypt_decrypt_roundtrip() {
    let s = setup(FixtureName::CryptoNets, &KeyparamsOptions::default());
    let x = sample(FixtureName::CryptoNets, 3);
    let ct = s.path("x.ct");
    cmd_encrypt(&s.sk, &s.input("x.zip", &x), &ct).unwrap();
    let y = cmd_decrypt(&s.sk, &ct, &s.path("y.zip")).unwrap();
    assert!(y.max_abs_diff(&x) <= 1e-6);
    assert_eq!(read_tensor(&s.path("y.zip")).unwrap(), y);
}

#[test]
fn encrypt_errors() {
    let s = setup(FixtureName::CryptoNets, &KeyparamsOptions::default());
    let x = s.input("x.zip", &sample(FixtureName::CryptoNets, 3));
    // An evaluation key in place of the secret key.
    assert_eq!(code(cmd_encrypt(&s.ek, &x, &s.path("a.ct"))).0, 2);
    let wrong_shape = s.input("w.zip", &Tensor::zeros(vec![1, 1, 16, 16]));
    assert_eq!(code(cmd_encrypt(&s.sk, &wrong_shape, &s.path("a.ct"))).0, 2);
    // 20000 elements exceed the 4096 slots of log2_n 13.
    let big = s.input("big.zip", &Tensor::zeros(vec![1, 20000]));
    let (c, msg) = code(cmd_encrypt(&s.sk, &big, &s.path("a.ct")));
    assert_eq!(c, 4, "{msg}");
}

#[test]
fn inference_yields_ten_logits_and_reuses_the_eval_key() {
    let s = setup(FixtureName::CryptoNets, &KeyparamsOptions::default());
    for i in 0..2 {
        let ct = s.path(&format!("x{i}.ct"));
        cmd_encrypt(&s.sk, &s.input(&format!("x{i}.zip"), &sample(FixtureName::CryptoNets, i)), &ct).unwrap();
        let out = s.path(&format!("y{i}.ct"));
        let report = cmd_inference(&s.model, &s.ek, &ct, &out).unwrap();
        assert_eq!(report.output_shape, [1, 10]);
        assert_eq!(report.levels_consumed, 7);
        let y = cmd_decrypt(&s.sk, &out, &s.path(&format!("y{i}.zip"))).unwrap();
        assert_eq!(y.shape(), [1, 10]);
    }
}

#[test]
fn inference_errors() {
    let s = setup(FixtureName::CryptoNets, &KeyparamsOptions::default());
    let ct = s.path("x.ct");
    cmd_encrypt(&s.sk, &s.input("x.zip", &sample(FixtureName::CryptoNets, 3)), &ct).unwrap();

    let mut bytes = std::fs::read(&ct).unwrap();
    assert_eq!(bytes[..4], CT_MAGIC);
    bytes[0] ^= 0xff;
    let tampered = s.path("t.ct");
    std::fs::write(&tampered, bytes).unwrap();
    assert_eq!(code(cmd_inference(&s.model, &s.ek, &tampered, &s.path("o.ct"))).0, 2);

    // Same parameters, different key.
    let (sk2, ek2) = (s.path("sk2"), s.path("ek2"));
    cmd_keygen(&s.kp, &sk2, &ek2, Some(7)).unwrap();
    assert_eq!(code(cmd_inference(&s.model, &ek2, &ct, &s.path("o.ct"))).0, 3);

    // Key generated for another model's parameters.
    let other = setup(FixtureName::LeNet5, &KeyparamsOptions::default());
    assert_eq!(code(cmd_inference(&s.model, &other.ek, &ct, &s.path("o.ct"))).0, 3);

    // The model no longer matches its sidecar.
    let mut model = std::fs::read(&s.model).unwrap();
    model.extend_from_slice(&[0x42, 0x00]);
    std::fs::write(&s.model, model).unwrap();
    assert_eq!(code(cmd_inference(&s.model, &s.ek, &ct, &s.path("o.ct"))).0, 2);
}

#[test]
fn decrypt_errors() {
    let s = setup(FixtureName::CryptoNets, &KeyparamsOptions::default());
    let ct = s.path("x.ct");
    cmd_encrypt(&s.sk, &s.input("x.zip", &sample(FixtureName::CryptoNets, 3)), &ct).unwrap();
    assert_eq!(code(cmd_decrypt(&s.ek, &ct, &s.path("y.zip"))).0, 3);
    let sk2 = s.path("sk2");
    cmd_keygen(&s.kp, &sk2, &s.path("ek2"), Some(9)).unwrap();
    assert_eq!(code(cmd_decrypt(&sk2, &ct, &s.path("y.zip"))).0, 3);
}

fn visible(dir: &Path) -> Vec<PathBuf> {
    ["keyparams.json", "eval.key", "input-0.ct", "output-0.ct"].iter().map(|f| dir.join(f)).collect()
}

#[test]
fn data_owner_files_carry_no_weights() {
    for backend in [BackendKind::Ckks, BackendKind::Tfhe] {
        let dir = TempDir::new().unwrap();
        let fx = build_fixture(FixtureName::LeNet5, 1);
        let opts = KeyparamsOptions { backend, ..KeyparamsOptions::default() };
        let inputs = fx.sample_inputs(3, 1);
        let run = run_pipeline(dir.path(), &fx.graph, &fx.calibration, &inputs, &opts, 5).unwrap();
        assert_eq!(run.visible_files, visible(dir.path()));
        assert_eq!(run.outputs.len(), 3);
        assert!(scan_for_weights(&fx.graph, &run.visible_files).unwrap().is_empty(), "{backend}");
        // The scan does find weights where they are expected.
        assert!(!scan_for_weights(&fx.graph, &[dir.path().join("model.onnx")]).unwrap().is_empty());
    }
}
