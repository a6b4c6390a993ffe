//! The five-step two-party protocol over files.
//!
//! The model owner runs `keyparams` (and later `inference`); the data owner
//! runs `keygen`, `encrypt` and `decrypt`. Only `keyparams.json`, the
//! evaluation key and ciphertexts cross the trust boundary. The calibrated
//! model sidecar stays with the model owner.
//!
//! Every file is written atomically (temporary file in the target directory,
//! then rename).

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::approx::{Polynomial, ReluDegree};
use crate::backend::format::{self, FormatError};
use crate::backend::{decrypt, encrypt, keygen, BackendError, Evaluator};
use crate::calibration::{calibrate_parallel, CalibratedModel, CalibrationMeta, DomainMethod, EdgeStats};
use crate::dataset::{read_tensor_file, write_tensor_file, CalibrationSet};
use crate::graph::{infer_shapes, load_model, validate_supported, ModelGraph};
use crate::params::{
    derive_ckks_params, derive_tfhe_params, multiplicative_depth, BackendKind, DepthReport, KeyParams, DEFAULT_LAMBDA,
    DEFAULT_MSG_BITS,
};
use crate::runtime::{plan, run_inference, ExecutionPlan, PlanError, PlanOptions, ReluPolicy, RunStats};
use crate::tensor::Tensor;

pub const SIDECAR_VERSION: u32 = 1;
pub const SIDECAR_SUFFIX: &str = "calibrated.json";
/// Caps the worker threads used by inference and calibration.
pub const THREADS_ENV: &str = "HEINFER_THREADS";

/// Error classes, each with its process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Missing or malformed input, unsupported model, invalid request.
    Input,
    /// Key material does not belong to the ciphertext or parameters.
    KeyMismatch,
    /// Depth, slot or precision budget exhausted.
    Capacity,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Input => 2,
            ErrorKind::KeyMismatch => 3,
            ErrorKind::Capacity => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolError {
    pub kind: ErrorKind,
    pub message: String,
}

impl ProtocolError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Input, message: message.into() }
    }

    pub fn key(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::KeyMismatch, message: message.into() }
    }

    pub fn capacity(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Capacity, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    fn backend(err: BackendError, context: impl fmt::Display) -> Self {
        let kind = match err {
            BackendError::Key(_) => ErrorKind::KeyMismatch,
            BackendError::Depth(_) | BackendError::Capacity(_) => ErrorKind::Capacity,
            BackendError::Shape(_) | BackendError::Unsupported { .. } => ErrorKind::Input,
        };
        Self { kind, message: format!("{context}: {err}") }
    }
}

impl fmt::Display for ProtocolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for ProtocolError {}

pub type Result<T> = std::result::Result<T, ProtocolError>;

/// Model-owner state produced by `keyparams`: everything needed to rebuild
/// the execution plan without the calibration data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibratedModelSidecar {
    pub format_version: u32,
    /// File name of the model, relative to the sidecar.
    pub model_file: String,
    /// Hex SHA-256 of the model bytes.
    pub model_digest: String,
    pub calibration: CalibrationMeta,
    pub options: PlanOptions,
    pub keyparams: KeyParams,
    pub depth: DepthReport,
    /// Statistics of every non-constant edge.
    pub stats: BTreeMap<String, EdgeStats>,
    /// Fitted ReLU polynomials by node (CKKS only).
    pub polynomials: BTreeMap<String, Polynomial>,
}

/// Options of the `keyparams` step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyparamsOptions {
    pub backend: BackendKind,
    pub lambda_bits: u32,
    pub relu_degree: ReluDegree,
    pub relu_domain: DomainMethod,
    pub tfhe_domain: DomainMethod,
    pub msg_bits: u32,
    pub compose_linear: bool,
}

impl Default for KeyparamsOptions {
    fn default() -> Self {
        let plan = PlanOptions::default();
        Self {
            backend: BackendKind::Ckks,
            lambda_bits: DEFAULT_LAMBDA,
            relu_degree: ReluDegree::Three,
            relu_domain: plan.relu.domain,
            tfhe_domain: plan.tfhe_domain,
            msg_bits: DEFAULT_MSG_BITS,
            compose_linear: plan.compose_linear,
        }
    }
}

impl KeyparamsOptions {
    fn plan_options(&self) -> PlanOptions {
        PlanOptions {
            relu: ReluPolicy { degree: Some(self.relu_degree), domain: self.relu_domain },
            tfhe_domain: self.tfhe_domain,
            compose_linear: self.compose_linear,
            ..PlanOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyparamsSummary {
    pub keyparams: KeyParams,
    pub depth: DepthReport,
    pub sidecar_path: PathBuf,
}

/// Machine-readable report printed by `inference`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub backend: BackendKind,
    pub latency_ms: f64,
    pub levels_consumed: u32,
    pub flushes: u64,
    pub quantizations: u64,
    pub clamped: u64,
    pub output_shape: Vec<usize>,
}

/// `<stem>.calibrated.json` next to the model.
pub fn sidecar_path(model_path: &Path) -> PathBuf {
    model_path.with_extension(SIDECAR_SUFFIX)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| ProtocolError::input(format!("cannot read {}: {e}", path.display())))
}

/// Write via a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let fail = |e: std::io::Error| ProtocolError::input(format!("cannot write {}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parse, validate and shape-infer a model.
pub fn load_graph(path: &Path) -> Result<(ModelGraph, Vec<u8>)> {
    let bytes = read_file(path)?;
    let g = load_model(&bytes).map_err(|e| ProtocolError::input(format!("{}: {e}", path.display())))?;
    validate_supported(&g).map_err(|r| ProtocolError::input(format!("{}: {r}", path.display())))?;
    let g = infer_shapes(&g).map_err(|e| ProtocolError::input(format!("{}: {e}", path.display())))?;
    Ok((g, bytes))
}

fn plan_error(e: PlanError) -> ProtocolError {
    match e {
        PlanError::Params(m) => ProtocolError::key(format!("key parameters do not fit this model: {m}")),
        other => ProtocolError::input(other.to_string()),
    }
}

/// Step 1 (model owner): calibrate, select parameters, write
/// `keyparams.json` and the sidecar.
pub fn cmd_keyparams(
    model_path: &Path,
    calibration_path: &Path,
    out_keyparams: &Path,
    opts: &KeyparamsOptions,
) -> Result<KeyparamsSummary> {
    let (g, model_bytes) = load_graph(model_path)?;
    let calib_bytes = read_file(calibration_path)?;
    let data = CalibrationSet::from_zip(&calib_bytes)
        .map_err(|e| ProtocolError::input(format!("{}: {e}", calibration_path.display())))?;
    let cm = calibrate_parallel(&g, &data).map_err(|e| ProtocolError::input(format!("calibration failed: {e}")))?;

    let kp = match opts.backend {
        BackendKind::Ckks => derive_ckks_params(&cm, opts.relu_degree, opts.lambda_bits),
        BackendKind::Tfhe => derive_tfhe_params(&cm, opts.lambda_bits, opts.msg_bits, opts.tfhe_domain),
    }
    .map_err(|e| match e {
        crate::params::ParamsError::Infeasible(_) => ProtocolError::capacity(e.to_string()),
        other => ProtocolError::input(other.to_string()),
    })?;
    let depth = multiplicative_depth(&g, opts.relu_degree).map_err(|e| ProtocolError::input(e.to_string()))?;
    let plan_opts = opts.plan_options();
    let p = plan(&cm, &kp, &plan_opts).map_err(plan_error)?;

    let model_file = model_path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .ok_or_else(|| ProtocolError::input(format!("{} is not a file path", model_path.display())))?;
    let sidecar = CalibratedModelSidecar {
        format_version: SIDECAR_VERSION,
        model_file,
        model_digest: sha256_hex(&model_bytes),
        calibration: cm.meta.clone(),
        options: plan_opts,
        keyparams: kp.clone(),
        depth: depth.clone(),
        stats: cm.stats.iter().filter(|(e, _)| !g.is_initializer(e)).map(|(e, s)| (e.clone(), *s)).collect(),
        polynomials: p.polynomials(),
    };
    let sidecar_path = sidecar_path(model_path);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    write_atomic(&sidecar_path, json.as_bytes())?;
    write_atomic(out_keyparams, kp.to_json().as_bytes())?;
    Ok(KeyparamsSummary { keyparams: kp, depth, sidecar_path })
}

/// Seed for key generation: expanded from `seed` when given, else drawn
/// from the operating system.
pub fn key_seed(seed: Option<u64>) -> [u8; 32] {
    let mut out = [0u8; 32];
    match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s).fill(&mut out),
        None => rand::rng().fill(&mut out),
    }
    out
}

pub fn read_keyparams(path: &Path) -> Result<KeyParams> {
    KeyParams::from_json(&read_file(path)?).map_err(|e| ProtocolError::input(format!("{}: {e}", path.display())))
}

/// Step 2 (data owner): generate the secret and evaluation keys.
pub fn cmd_keygen(keyparams_path: &Path, out_secret: &Path, out_eval: &Path, seed: Option<u64>) -> Result<String> {
    let kp = read_keyparams(keyparams_path)?;
    let (sk, ek) = keygen(&kp, key_seed(seed));
    write_atomic(out_secret, &format::write_secret_key(&sk))?;
    write_atomic(out_eval, &format::write_eval_key(&ek))?;
    Ok(sk.key_id.to_string())
}

fn format_error(path: &Path, e: FormatError) -> ProtocolError {
    ProtocolError::input(format!("{}: {e}", path.display()))
}

/// Step 3 (data owner): encrypt one input tensor.
pub fn cmd_encrypt(secret_path: &Path, input_path: &Path, out_ct: &Path) -> Result<()> {
    let sk = format::read_secret_key(&read_file(secret_path)?).map_err(|e| format_error(secret_path, e))?;
    let (_, x) = read_tensor_file(&read_file(input_path)?)
        .map_err(|e| ProtocolError::input(format!("{}: {e}", input_path.display())))?;
    let ct = encrypt(&sk, &x).map_err(|e| ProtocolError::backend(e, input_path.display()))?;
    let bytes = format::write_ciphertext(&ct).map_err(|e| format_error(out_ct, e))?;
    write_atomic(out_ct, &bytes)
}

/// Model-owner view of a calibrated model, rebuilt from its sidecar.
pub struct LoadedModel {
    pub sidecar: CalibratedModelSidecar,
    pub model: CalibratedModel,
}

/// Accepts either the model file (sidecar found next to it) or the sidecar.
pub fn load_calibrated_model(path: &Path) -> Result<LoadedModel> {
    let is_sidecar = path.to_string_lossy().ends_with(SIDECAR_SUFFIX);
    let sidecar_file = if is_sidecar { path.to_path_buf() } else { sidecar_path(path) };
    let sidecar: CalibratedModelSidecar = serde_json::from_slice(&read_file(&sidecar_file)?)
        .map_err(|e| ProtocolError::input(format!("{}: {e}", sidecar_file.display())))?;
    if sidecar.format_version != SIDECAR_VERSION {
        return Err(ProtocolError::input(format!(
            "{}: unsupported sidecar version {} (expected {SIDECAR_VERSION})",
            sidecar_file.display(),
            sidecar.format_version
        )));
    }
    let model_path = if is_sidecar { sidecar_file.with_file_name(&sidecar.model_file) } else { path.to_path_buf() };
    let (graph, bytes) = load_graph(&model_path)?;
    if sha256_hex(&bytes) != sidecar.model_digest {
        return Err(ProtocolError::input(format!(
            "{} does not match the model digest recorded in {}",
            model_path.display(),
            sidecar_file.display()
        )));
    }
    let model = CalibratedModel { graph, stats: sidecar.stats.clone(), meta: sidecar.calibration.clone() };
    Ok(LoadedModel { sidecar, model })
}

impl LoadedModel {
    pub fn plan(&self) -> Result<ExecutionPlan> {
        let p = plan(&self.model, &self.sidecar.keyparams, &self.sidecar.options).map_err(plan_error)?;
        if p.polynomials() != self.sidecar.polynomials {
            return Err(ProtocolError::input("ReLU polynomials differ from the ones recorded at calibration"));
        }
        Ok(p)
    }
}

/// Step 4 (model owner): homomorphic inference on one ciphertext.
pub fn cmd_inference(model_path: &Path, eval_path: &Path, ct_in: &Path, out_ct: &Path) -> Result<InferenceReport> {
    let loaded = load_calibrated_model(model_path)?;
    let ek = format::read_eval_key(&read_file(eval_path)?).map_err(|e| format_error(eval_path, e))?;
    let ct = format::read_ciphertext(&read_file(ct_in)?).map_err(|e| format_error(ct_in, e))?;
    if ek.params != loaded.sidecar.keyparams {
        return Err(ProtocolError::key(format!(
            "{} was generated for different key parameters than this model",
            eval_path.display()
        )));
    }
    let p = loaded.plan()?;
    let ev = Evaluator::new(&ek);
    let start = Instant::now();
    let (out, stats) =
        run_inference(&p, &ev, &ct).map_err(|e| ProtocolError::backend(e.source, format!("node `{}`", e.node)))?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    let bytes = format::write_ciphertext(&out).map_err(|e| format_error(out_ct, e))?;
    write_atomic(out_ct, &bytes)?;
    let RunStats { levels_consumed, flushes, quantizations, clamped } = stats;
    Ok(InferenceReport {
        backend: p.backend,
        latency_ms,
        levels_consumed,
        flushes,
        quantizations,
        clamped,
        output_shape: out.shape().to_vec(),
    })
}

/// Step 5 (data owner): decrypt a result into a tensor file.
pub fn cmd_decrypt(secret_path: &Path, ct_path: &Path, out_tensor: &Path) -> Result<Tensor> {
    let sk = format::read_secret_key(&read_file(secret_path)?).map_err(|e| match e {
        FormatError::WrongKind { .. } => ProtocolError::key(format!("{}: {e}", secret_path.display())),
        other => format_error(secret_path, other),
    })?;
    let ct = format::read_ciphertext(&read_file(ct_path)?).map_err(|e| format_error(ct_path, e))?;
    let y = decrypt(&sk, &ct).map_err(|e| ProtocolError::backend(e, ct_path.display()))?;
    let bytes = write_tensor_file("output", &y).map_err(|e| ProtocolError::input(e.to_string()))?;
    write_atomic(out_tensor, &bytes)?;
    Ok(y)
}

/// Read a tensor file written by `decrypt` or used as `encrypt` input.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    read_tensor_file(&read_file(path)?)
        .map(|(_, t)| t)
        .map_err(|e| ProtocolError::input(format!("{}: {e}", path.display())))
}

pub fn write_tensor(path: &Path, name: &str, t: &Tensor) -> Result<()> {
    let bytes = write_tensor_file(name, t).map_err(|e| ProtocolError::input(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Worker thread cap from [`THREADS_ENV`], if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}
