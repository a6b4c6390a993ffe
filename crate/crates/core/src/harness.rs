//! Experiments and self-checks: golden parameter values, lowering soundness,
//! lookup-table folding, and end-to-end agreement through the file protocol.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{poly_depth, ReluDegree};
use crate::backend::{encrypt, keygen, Ciphertext, Evaluator, UnivariateFn};
use crate::calibration::{calibrate, cleartext_forward, DomainMethod, Interval};
use crate::dataset::CalibrationSet;
use crate::fixtures::{build_fixture, Fixture, FixtureName};
use crate::graph::{infer_shapes, to_onnx_bytes, AttrValue, ModelGraph, Node, OpKind, TensorSpec, EXPORT_OPSET};
use crate::params::{
    derive_ckks_params, derive_tfhe_params, multiplicative_depth, BackendKind, KeyParams, TfheParams, KEYPARAMS_VERSION,
};
use crate::protocol::{
    cmd_decrypt, cmd_encrypt, cmd_inference, cmd_keygen, cmd_keyparams, write_atomic, write_tensor, InferenceReport,
    KeyparamsOptions, KeyparamsSummary, ProtocolError,
};
use crate::runtime::{plan, PlanOptions};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Golden values

/// `(fixture, d_m with degree-3 ReLU, log2 N, max log2 q, parameter count)`.
const REFERENCE_FIXTURES: [(FixtureName, u32, u32, u32, usize); 3] = [
    (FixtureName::CryptoNets, 7, 13, 218, 52722),
    (FixtureName::LeNet5, 15, 14, 438, 61706),
    (FixtureName::MobileFaceNetsClassifier, 2, 15, 881, 56960),
];

/// `(degree, d_m)` of the ReLU surrogates.
const REFERENCE_POLY_DEPTHS: [(ReluDegree, u32); 3] =
    [(ReluDegree::One, 1), (ReluDegree::Three, 2), (ReluDegree::Seven, 3)];

/// `(lambda, rlwe_n, log2 sigma_rlwe, lwe_k, log2 sigma_lwe)`.
const REFERENCE_TFHE: [(u32, u32, i32, u32, i32); 2] = [(80, 2048, -60, 542, -23), (128, 4096, -62, 938, -23)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenRow {
    pub check: String,
    pub computed: String,
    pub expected: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenReport {
    pub rows: Vec<GoldenRow>,
}

impl GoldenReport {
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.ok)
    }
}

impl fmt::Display for GoldenReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.rows.iter().map(|r| r.check.len()).max().unwrap_or(0);
        writeln!(f, "{:<w$}  {:>24}  {:>24}  status", "check", "computed", "expected")?;
        for r in &self.rows {
            let status = if r.ok { "ok" } else { "MISMATCH" };
            writeln!(f, "{:<w$}  {:>24}  {:>24}  {status}", r.check, r.computed, r.expected)?;
        }
        Ok(())
    }
}

fn row(check: String, computed: impl fmt::Display, expected: impl fmt::Display, ok: bool) -> GoldenRow {
    GoldenRow { check, computed: computed.to_string(), expected: expected.to_string(), ok }
}

/// Depths, ring dimensions, coefficient budgets, surrogate depths, TFHE
/// parameter rows and fixture sizes next to their reference values.
pub fn golden_report(seed: u64) -> GoldenReport {
    let mut rows = Vec::new();
    for (name, d_m, log2_n, cap, params) in REFERENCE_FIXTURES {
        let fx = build_fixture(name, seed);
        let count = fx.graph.parameter_count();
        rows.push(row(format!("{name} parameters"), count, params, count == params));
        let depth = multiplicative_depth(&fx.graph, ReluDegree::Three).map(|d| d.d_m);
        rows.push(match depth {
            Ok(d) => row(format!("{name} d_m"), d, d_m, d == d_m),
            Err(e) => row(format!("{name} d_m"), e, d_m, false),
        });
        let cm = match calibrate(&fx.graph, &CalibrationSet::new("input", fx.calibration.samples[..1].to_vec())) {
            Ok(cm) => cm,
            Err(e) => {
                rows.push(row(format!("{name} calibration"), e, "ok", false));
                continue;
            }
        };
        match derive_ckks_params(&cm, ReluDegree::Three, 128) {
            Ok(kp) => {
                let c = kp.ckks.expect("ckks block");
                rows.push(row(format!("{name} log2 N"), c.log2_n, log2_n, c.log2_n == log2_n));
                let q = c.total_q_bits();
                rows.push(row(format!("{name} log2 q"), q, format!("<= {cap}"), q <= cap));
            }
            Err(e) => rows.push(row(format!("{name} log2 N"), e, log2_n, false)),
        }
    }
    for (degree, d) in REFERENCE_POLY_DEPTHS {
        let got = poly_depth(degree);
        rows.push(row(format!("degree-{degree} ReLU d_m"), got, d, got == d));
    }
    let fx = build_fixture(FixtureName::CryptoNets, seed);
    let cm = calibrate(&fx.graph, &CalibrationSet::new("input", fx.calibration.samples[..1].to_vec()))
        .expect("fixture calibrates");
    for (lambda, n, sn, k, sk) in REFERENCE_TFHE {
        let expected = format!("{n}/{sn}/{k}/{sk}");
        let check = format!("TFHE lambda={lambda}");
        rows.push(match derive_tfhe_params(&cm, lambda, crate::params::DEFAULT_MSG_BITS, DomainMethod::MinMax) {
            Ok(kp) => {
                let t = kp.tfhe.expect("tfhe block");
                let got = format!("{}/{}/{}/{}", t.rlwe_n, t.rlwe_sigma_log2, t.lwe_k, t.lwe_sigma_log2);
                let ok = got == expected;
                row(check, got, expected, ok)
            }
            Err(e) => row(check, e, expected, false),
        });
    }
    GoldenReport { rows }
}

// ---------------------------------------------------------------------------
// Lowering soundness

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessRow {
    pub case: String,
    pub instances: usize,
    /// Largest elementwise deviation of the lowered plan from the reference.
    pub max_abs_err: f64,
}

/// Single-operator (and small fused) graphs whose lowering is checked.
pub const SOUNDNESS_CASES: [&str; 15] = [
    "conv",
    "depthwise_conv",
    "average_pool",
    "pad",
    "gemm",
    "matmul",
    "add_plain",
    "mul_plain",
    "add_ct",
    "mul_ct",
    "relu",
    "flatten",
    "reshape",
    "pad_conv",
    "gemm_reshape_gemm",
];

/// For each case, `instances` random graphs: the lowered plan applied in
/// cleartext against the reference forward pass, both with and without
/// linear-map composition.
pub fn lowering_soundness(instances: usize, seed: u64) -> Vec<SoundnessRow> {
    SOUNDNESS_CASES
        .par_iter()
        .enumerate()
        .map(|(ci, case)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(ci as u64));
            let mut max_abs_err: f64 = 0.0;
            for _ in 0..instances {
                let (g, x) = random_instance(case, &mut rng);
                max_abs_err = max_abs_err.max(lowering_error(&g, &x));
            }
            SoundnessRow { case: case.to_string(), instances, max_abs_err }
        })
        .collect()
}

fn lowering_error(g: &ModelGraph, x: &Tensor) -> f64 {
    let (reference, _) = cleartext_forward(g, x).expect("instance evaluates");
    let cm = calibrate(g, &CalibrationSet::new("x", vec![x.clone()])).expect("instance calibrates");
    let kp = derive_tfhe_params(&cm, 128, crate::params::DEFAULT_MSG_BITS, DomainMethod::MinMax).expect("tfhe params");
    [true, false]
        .into_iter()
        .map(|compose_linear| {
            let opts = PlanOptions { compose_linear, ..PlanOptions::default() };
            let p = plan(&cm, &kp, &opts).unwrap_or_else(|e| panic!("instance lowers: {e}"));
            let y = p.run_plain(x);
            assert_eq!(y.shape(), reference.shape(), "lowered output shape");
            y.max_abs_diff(&reference)
        })
        .fold(0.0, f64::max)
}

struct GraphBuilder {
    g: ModelGraph,
    counter: usize,
}

impl GraphBuilder {
    fn new(shape: Vec<usize>) -> Self {
        let mut g = ModelGraph {
            name: "instance".into(),
            opset: EXPORT_OPSET,
            nodes: Vec::new(),
            edges: Default::default(),
            initializers: Default::default(),
            inputs: vec!["x".into()],
            outputs: Vec::new(),
        };
        g.edges.insert("x".into(), TensorSpec::new(shape));
        Self { g, counter: 0 }
    }

    fn constant(&mut self, t: Tensor) -> String {
        self.counter += 1;
        let name = format!("c{}", self.counter);
        self.g.edges.insert(name.clone(), TensorSpec::new(t.shape().to_vec()));
        self.g.initializers.insert(name.clone(), t);
        name
    }

    fn node(&mut self, op: OpKind, inputs: &[&str], attrs: Vec<(&str, AttrValue)>) -> String {
        self.counter += 1;
        let out = format!("e{}", self.counter);
        let mut n = Node::new(format!("n{}", self.counter), op, inputs, &[&out]);
        for (k, v) in attrs {
            n = n.with_attr(k, v);
        }
        self.g.nodes.push(n);
        out
    }

    fn finish(mut self, output: String) -> ModelGraph {
        self.g.outputs = vec![output];
        infer_shapes(&self.g).expect("instance is well formed")
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
}

fn ints(v: &[usize]) -> AttrValue {
    AttrValue::Ints(v.iter().map(|&x| x as i64).collect())
}

#[allow(clippy::too_many_arguments)]
fn conv_node(
    b: &mut GraphBuilder,
    rng: &mut ChaCha8Rng,
    x: &str,
    cin: usize,
    cout: usize,
    group: usize,
    k: usize,
    pads: [usize; 4],
    stride: usize,
) -> String {
    let w = random_tensor(rng, vec![cout, cin / group, k, k]);
    let w = b.constant(w);
    let mut inputs = vec![x.to_string(), w];
    if rng.random_bool(0.5) {
        inputs.push(b.constant(random_tensor(rng, vec![cout])));
    }
    let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
    b.node(
        OpKind::Conv,
        &refs,
        vec![
            ("kernel_shape", ints(&[k, k])),
            ("strides", ints(&[stride, stride])),
            ("pads", ints(&pads)),
            ("group", AttrValue::Int(group as i64)),
        ],
    )
}

fn random_instance(case: &str, rng: &mut ChaCha8Rng) -> (ModelGraph, Tensor) {
    let k = rng.random_range(1..=3usize);
    let pads: [usize; 4] = std::array::from_fn(|_| rng.random_range(0..k.min(2)));
    let stride = rng.random_range(1..=2usize);
    let c = rng.random_range(1..=3usize);
    let (h, w) = (rng.random_range(k..=7usize), rng.random_range(k..=7usize));
    let image = vec![1, c, h, w];

    let (shape, g) = match case {
        "conv" | "depthwise_conv" => {
            let mut b = GraphBuilder::new(image.clone());
            let (cout, group) =
                if case == "conv" { (rng.random_range(1..=4), 1) } else { (c * rng.random_range(1..=2), c) };
            let y = conv_node(&mut b, rng, "x", c, cout, group, k, pads, stride);
            (image, b.finish(y))
        }
        "average_pool" => {
            let mut b = GraphBuilder::new(image.clone());
            let y = b.node(
                OpKind::AveragePool,
                &["x"],
                vec![
                    ("kernel_shape", ints(&[k, k])),
                    ("strides", ints(&[stride, stride])),
                    ("pads", ints(&pads)),
                    ("count_include_pad", AttrValue::Int(rng.random_range(0..=1))),
                ],
            );
            (image, b.finish(y))
        }
        "pad" => {
            let mut b = GraphBuilder::new(image.clone());
            let amounts: Vec<f64> =
                (0..8).map(|i| if i % 4 == 0 { 0.0 } else { rng.random_range(0..=2) as f64 }).collect();
            let p = b.constant(Tensor::from_vec(amounts));
            let y = b.node(OpKind::Pad, &["x", &p], vec![]);
            (image, b.finish(y))
        }
        "pad_conv" => {
            let mut b = GraphBuilder::new(image.clone());
            let amounts: Vec<f64> =
                (0..8).map(|i| if i % 4 < 2 { 0.0 } else { rng.random_range(0..=2) as f64 }).collect();
            let p = b.constant(Tensor::from_vec(amounts));
            let padded = b.node(OpKind::Pad, &["x", &p], vec![]);
            let cout = rng.random_range(1..=3);
            let y = conv_node(&mut b, rng, &padded, c, cout, 1, k, [0; 4], stride);
            (image, b.finish(y))
        }
        "gemm" => {
            let (kk, n) = (rng.random_range(1..=6), rng.random_range(1..=6));
            let (ta, tb) = (rng.random_bool(0.5), rng.random_bool(0.5));
            let mut b = GraphBuilder::new(vec![1, kk]);
            // A transposed operand reaches Gemm through a reshape to (k, 1).
            let a = if ta {
                let s = b.constant(Tensor::from_vec(vec![kk as f64, 1.0]));
                b.node(OpKind::Reshape, &["x", &s], vec![])
            } else {
                "x".to_string()
            };
            let bm = b.constant(random_tensor(rng, if tb { vec![n, kk] } else { vec![kk, n] }));
            let mut inputs = vec![a, bm];
            match rng.random_range(0..3) {
                0 => {}
                1 => inputs.push(b.constant(random_tensor(rng, vec![n]))),
                _ => inputs.push(b.constant(random_tensor(rng, vec![1, n]))),
            }
            let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
            let y = b.node(
                OpKind::Gemm,
                &refs,
                vec![
                    ("alpha", AttrValue::Float(rng.random_range(-2.0f32..2.0))),
                    ("beta", AttrValue::Float(rng.random_range(-2.0f32..2.0))),
                    ("transA", AttrValue::Int(i64::from(ta))),
                    ("transB", AttrValue::Int(i64::from(tb))),
                ],
            );
            (vec![1, kk], b.finish(y))
        }
        "gemm_reshape_gemm" => {
            let (k1, n1, n2) = (rng.random_range(1..=6), 2 * rng.random_range(1..=3), rng.random_range(1..=5));
            let mut b = GraphBuilder::new(vec![1, k1]);
            let w1 = b.constant(random_tensor(rng, vec![k1, n1]));
            let b1 = b.constant(random_tensor(rng, vec![n1]));
            let h1 = b.node(OpKind::Gemm, &["x", &w1, &b1], vec![]);
            let s = b.constant(Tensor::from_vec(vec![1.0, 2.0, -1.0]));
            let r = b.node(OpKind::Reshape, &[&h1, &s], vec![]);
            let f = b.node(OpKind::Flatten, &[&r], vec![("axis", AttrValue::Int(1))]);
            let w2 = b.constant(random_tensor(rng, vec![n2, n1]));
            let b2 = b.constant(random_tensor(rng, vec![n2]));
            let y = b.node(OpKind::Gemm, &[&f, &w2, &b2], vec![("transB", AttrValue::Int(1))]);
            (vec![1, k1], b.finish(y))
        }
        "matmul" => {
            let (m, kk, n) = (rng.random_range(1..=3), rng.random_range(1..=6), rng.random_range(1..=6));
            if rng.random_bool(0.5) {
                let mut b = GraphBuilder::new(vec![1, kk]);
                let wt = if rng.random_bool(0.25) { vec![kk] } else { vec![kk, n] };
                let wc = b.constant(random_tensor(rng, wt));
                let y = b.node(OpKind::MatMul, &["x", &wc], vec![]);
                (vec![1, kk], b.finish(y))
            } else {
                // Constant on the left: the encrypted (k, n) operand comes from a reshape.
                let mut b = GraphBuilder::new(vec![1, kk * n]);
                let s = b.constant(Tensor::from_vec(vec![kk as f64, n as f64]));
                let r = b.node(OpKind::Reshape, &["x", &s], vec![]);
                let wc = b.constant(random_tensor(rng, vec![m, kk]));
                let y = b.node(OpKind::MatMul, &[&wc, &r], vec![]);
                (vec![1, kk * n], b.finish(y))
            }
        }
        "add_plain" | "mul_plain" => {
            let mut b = GraphBuilder::new(image.clone());
            let cshape = match rng.random_range(0..4) {
                0 => vec![1],
                1 => vec![c, 1, 1],
                2 => vec![w],
                _ => image.clone(),
            };
            let cst = b.constant(random_tensor(rng, cshape));
            let op = if case == "add_plain" { OpKind::Add } else { OpKind::Mul };
            let y =
                if rng.random_bool(0.5) { b.node(op, &["x", &cst], vec![]) } else { b.node(op, &[&cst, "x"], vec![]) };
            (image, b.finish(y))
        }
        "add_ct" | "mul_ct" => {
            let mut b = GraphBuilder::new(image.clone());
            let r = b.node(OpKind::Relu, &["x"], vec![]);
            let op = if case == "add_ct" { OpKind::Add } else { OpKind::Mul };
            let y = b.node(op, &["x", &r], vec![]);
            (image, b.finish(y))
        }
        "relu" => {
            let mut b = GraphBuilder::new(image.clone());
            let y = b.node(OpKind::Relu, &["x"], vec![]);
            (image, b.finish(y))
        }
        "flatten" => {
            let mut b = GraphBuilder::new(image.clone());
            let y = b.node(OpKind::Flatten, &["x"], vec![("axis", AttrValue::Int(rng.random_range(0..=4)))]);
            (image, b.finish(y))
        }
        "reshape" => {
            let mut b = GraphBuilder::new(image.clone());
            let target = match rng.random_range(0..3) {
                0 => vec![1.0, -1.0],
                1 => vec![0.0, (c * h) as f64, w as f64],
                _ => vec![-1.0],
            };
            let s = b.constant(Tensor::from_vec(target));
            let y = b.node(OpKind::Reshape, &["x", &s], vec![]);
            (image, b.finish(y))
        }
        other => panic!("unknown soundness case {other}"),
    };
    let x = random_tensor(rng, shape);
    (g, x)
}

// ---------------------------------------------------------------------------
// Lookup-table folding

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldingReport {
    pub cases: usize,
    /// Cases where the deferred stack matched the single composed table bit
    /// for bit.
    pub identical: usize,
    /// Largest number of requantizations a single flush performed.
    pub max_quantizations_per_flush: u64,
    pub min_quantizations_per_flush: u64,
}

fn random_univariate(rng: &mut ChaCha8Rng) -> UnivariateFn {
    match rng.random_range(0..4) {
        0 => UnivariateFn::Relu,
        1 => UnivariateFn::Affine { a: rng.random_range(-3.0..3.0), b: rng.random_range(-2.0..2.0) },
        2 => UnivariateFn::Poly { coeffs: (0..rng.random_range(1..4)).map(|_| rng.random_range(-1.0..1.0)).collect() },
        _ => {
            let lo = rng.random_range(-5.0..0.0);
            let hi = lo + rng.random_range(0.5..10.0);
            UnivariateFn::Table {
                domain: Interval::new(lo, hi),
                samples: (0..64).map(|_| rng.random_range(-4.0..4.0)).collect(),
            }
        }
    }
}

fn tfhe_keyparams(shape: Vec<usize>, msg_bits: u32, interval: Interval) -> KeyParams {
    KeyParams {
        format_version: KEYPARAMS_VERSION,
        backend: BackendKind::Tfhe,
        lambda_bits: 128,
        input_shape: shape,
        ckks: None,
        tfhe: Some(TfheParams {
            rlwe_n: 4096,
            rlwe_sigma_log2: -62,
            lwe_k: 938,
            lwe_sigma_log2: -23,
            msg_bits,
            input_interval: interval,
        }),
    }
}

/// Random pending stacks of length 1..=5 on random intervals: deferring then
/// flushing against one table sampled from the composition.
pub fn folding_equivalence(cases: usize, msg_bits: u32, seed: u64) -> FoldingReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report =
        FoldingReport { cases, identical: 0, max_quantizations_per_flush: 0, min_quantizations_per_flush: u64::MAX };
    let levels = 1u32 << msg_bits;
    for _ in 0..cases {
        let lo = rng.random_range(-10.0..5.0);
        let iv = Interval::new(lo, lo + rng.random_range(0.1..10.0));
        let mut key_seed = [0u8; 32];
        rng.fill(&mut key_seed);
        let (sk, ek) = keygen(&tfhe_keyparams(vec![32], msg_bits, iv), key_seed);
        let ev = Evaluator::new(&ek);
        let x = Tensor::from_vec((0..32).map(|_| rng.random_range(iv.lo..=iv.hi)).collect());
        let ct = encrypt(&sk, &x).expect("fits");
        let fns: Vec<UnivariateFn> = (0..rng.random_range(1..=5)).map(|_| random_univariate(&mut rng)).collect();

        let mut deferred = ct.clone();
        for f in &fns {
            deferred = ev.lut(&deferred, f.clone(), None).expect("lut");
        }
        let before = ev.counters.snapshot();
        let deferred = ev.flush(&deferred).expect("flush");
        let q = ev.counters.snapshot().quantizations - before.quantizations;
        report.max_quantizations_per_flush = report.max_quantizations_per_flush.max(q);
        report.min_quantizations_per_flush = report.min_quantizations_per_flush.min(q);

        let step = iv.width() / (levels - 1) as f64;
        let samples = (0..levels).map(|q| fns.iter().fold(iv.lo + q as f64 * step, |acc, f| f.eval(acc))).collect();
        let table = UnivariateFn::Table { domain: iv, samples };
        let composed = ev.flush(&ev.lut(&ct, table, None).expect("lut")).expect("flush");
        let same = match (&deferred, &composed) {
            (Ciphertext::Tfhe(a), Ciphertext::Tfhe(b)) => a.cells == b.cells,
            _ => false,
        };
        report.identical += usize::from(same);
    }
    report
}

// ---------------------------------------------------------------------------
// End-to-end experiments through the file protocol

/// Output of running the five protocol steps on a batch of inputs.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub keyparams: KeyparamsSummary,
    pub outputs: Vec<Tensor>,
    pub reports: Vec<InferenceReport>,
    /// Data-owner-visible files of the first sample.
    pub visible_files: Vec<PathBuf>,
}

/// `keyparams` and `keygen` once, then `encrypt`, `inference` and `decrypt`
/// for every input (in parallel), all through files under `dir`.
pub fn run_pipeline(
    dir: &Path,
    model: &ModelGraph,
    calibration: &CalibrationSet,
    inputs: &[Tensor],
    opts: &KeyparamsOptions,
    key_seed: u64,
) -> Result<PipelineRun, ProtocolError> {
    let model_path = dir.join("model.onnx");
    let calib_path = dir.join("calibration.zip");
    let kp_path = dir.join("keyparams.json");
    let (sk_path, ek_path) = (dir.join("secret.key"), dir.join("eval.key"));
    write_atomic(&model_path, &to_onnx_bytes(model))?;
    let zip = calibration.to_zip().map_err(|e| ProtocolError::input(e.to_string()))?;
    write_atomic(&calib_path, &zip)?;
    let keyparams = cmd_keyparams(&model_path, &calib_path, &kp_path, opts)?;
    cmd_keygen(&kp_path, &sk_path, &ek_path, Some(key_seed))?;

    let results = inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let input = dir.join(format!("input-{i}.zip"));
            let ct = dir.join(format!("input-{i}.ct"));
            let out_ct = dir.join(format!("output-{i}.ct"));
            let out = dir.join(format!("output-{i}.zip"));
            write_tensor(&input, "input", x)?;
            cmd_encrypt(&sk_path, &input, &ct)?;
            let report = cmd_inference(&model_path, &ek_path, &ct, &out_ct)?;
            let y = cmd_decrypt(&sk_path, &out_ct, &out)?;
            Ok((y, report))
        })
        .collect::<Result<Vec<_>, ProtocolError>>()?;
    let (outputs, reports) = results.into_iter().unzip();
    let visible_files = vec![kp_path, ek_path, dir.join("input-0.ct"), dir.join("output-0.ct")];
    Ok(PipelineRun { keyparams, outputs, reports, visible_files })
}

/// A weight pattern found in a file the data owner sees.
#[derive(Debug, Clone, PartialEq)]
pub struct Leak {
    pub file: PathBuf,
    pub initializer: String,
    pub offset: usize,
}

/// Search `files` for any two consecutive `f32` little-endian weights of
/// `model` (8-byte windows, so accidental matches are negligible) and for
/// node names in text files.
pub fn scan_for_weights(model: &ModelGraph, files: &[PathBuf]) -> std::io::Result<Vec<Leak>> {
    let mut patterns = std::collections::HashMap::new();
    for (name, t) in &model.initializers {
        let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        for w in bytes.chunks_exact(4).collect::<Vec<_>>().windows(2) {
            let key: [u8; 8] = [w[0], w[1]].concat().try_into().expect("two f32 words");
            // Runs of zeros or repeated constants are not identifying.
            if w[0] != w[1] {
                patterns.entry(key).or_insert_with(|| name.clone());
            }
        }
    }
    let mut leaks = Vec::new();
    for f in files {
        let bytes = std::fs::read(f)?;
        for (offset, w) in bytes.windows(8).enumerate() {
            if let Some(name) = patterns.get(w) {
                leaks.push(Leak { file: f.clone(), initializer: name.clone(), offset });
            }
        }
        if let Ok(text) = std::str::from_utf8(&bytes) {
            for n in &model.nodes {
                if let Some(offset) = text.find(&format!("\"{}\"", n.name)) {
                    leaks.push(Leak { file: f.clone(), initializer: format!("node name {}", n.name), offset });
                }
            }
        }
    }
    Ok(leaks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    fn from_samples(mut ms: Vec<f64>) -> Self {
        ms.sort_by(f64::total_cmp);
        let n = ms.len().max(1) as f64;
        Self {
            mean_ms: ms.iter().sum::<f64>() / n,
            median_ms: ms.get(ms.len() / 2).copied().unwrap_or(0.0),
            max_ms: ms.last().copied().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub model: String,
    pub backend: BackendKind,
    pub samples: usize,
    /// Fraction of samples whose encrypted argmax equals the cleartext one.
    pub agreement_rate: f64,
    pub mean_abs_logit_error: f64,
    /// Largest `max|y - y_enc| / max|y|` over samples.
    pub max_relative_error: f64,
    pub latency: LatencyStats,
    pub d_m: u32,
    pub log2_n: Option<u32>,
    pub levels_consumed: u32,
    pub mean_flushes: f64,
    pub mean_quantizations: f64,
    pub total_clamped: u64,
}

impl fmt::Display for AgreementReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model                 {}", self.model)?;
        writeln!(f, "backend               {}", self.backend)?;
        writeln!(f, "samples               {}", self.samples)?;
        writeln!(f, "agreement             {:.4}", self.agreement_rate)?;
        writeln!(f, "mean |logit error|    {:.3e}", self.mean_abs_logit_error)?;
        writeln!(f, "max relative error    {:.3e}", self.max_relative_error)?;
        writeln!(
            f,
            "latency ms            mean {:.2}  median {:.2}  max {:.2}",
            self.latency.mean_ms, self.latency.median_ms, self.latency.max_ms
        )?;
        writeln!(f, "d_m                   {}", self.d_m)?;
        if let Some(n) = self.log2_n {
            writeln!(f, "log2 N                {n}")?;
        }
        writeln!(f, "levels consumed       {}", self.levels_consumed)?;
        writeln!(f, "flushes / sample      {:.1}", self.mean_flushes)?;
        writeln!(f, "quantizations/sample  {:.1}", self.mean_quantizations)?;
        write!(f, "clamped values        {}", self.total_clamped)
    }
}

fn max_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Encrypted-path outputs against the cleartext forward pass.
pub fn agreement_experiment(
    model: &ModelGraph,
    calibration: &CalibrationSet,
    inputs: &[Tensor],
    opts: &KeyparamsOptions,
    key_seed: u64,
) -> Result<AgreementReport, ProtocolError> {
    evaluate(model, calibration, inputs, opts, key_seed).map(|(report, _, _)| report)
}

/// Report plus the cleartext and decrypted outputs.
fn evaluate(
    model: &ModelGraph,
    calibration: &CalibrationSet,
    inputs: &[Tensor],
    opts: &KeyparamsOptions,
    key_seed: u64,
) -> Result<(AgreementReport, Vec<Tensor>, Vec<Tensor>), ProtocolError> {
    if inputs.is_empty() {
        return Err(ProtocolError::input("an experiment needs at least one sample"));
    }
    let dir = tempfile::tempdir().map_err(|e| ProtocolError::input(format!("temporary directory: {e}")))?;
    let run = run_pipeline(dir.path(), model, calibration, inputs, opts, key_seed)?;
    let clear: Vec<Tensor> = inputs
        .par_iter()
        .map(|x| cleartext_forward(model, x).map(|(y, _)| y))
        .collect::<Result<_, _>>()
        .map_err(|e| ProtocolError::input(e.to_string()))?;

    let n = inputs.len() as f64;
    let agree = clear.iter().zip(&run.outputs).filter(|(a, b)| a.argmax() == b.argmax()).count();
    let mean_abs_logit_error = clear
        .iter()
        .zip(&run.outputs)
        .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
        .sum::<f64>()
        / n;
    let max_relative_error = clear
        .iter()
        .zip(&run.outputs)
        .map(|(a, b)| a.max_abs_diff(b) / max_abs(a).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    let report = AgreementReport {
        model: model.name.clone(),
        backend: opts.backend,
        samples: inputs.len(),
        agreement_rate: agree as f64 / n,
        mean_abs_logit_error,
        max_relative_error,
        latency: LatencyStats::from_samples(run.reports.iter().map(|r| r.latency_ms).collect()),
        d_m: run.keyparams.depth.d_m,
        log2_n: run.keyparams.keyparams.ckks.as_ref().map(|c| c.log2_n),
        levels_consumed: run.reports.iter().map(|r| r.levels_consumed).max().unwrap_or(0),
        mean_flushes: run.reports.iter().map(|r| r.flushes as f64).sum::<f64>() / n,
        mean_quantizations: run.reports.iter().map(|r| r.quantizations as f64).sum::<f64>() / n,
        total_clamped: run.reports.iter().map(|r| r.clamped).sum(),
    };
    Ok((report, clear, run.outputs))
}

/// Agreement on `samples` fresh inputs drawn from the fixture's calibration
/// distribution.
pub fn fixture_agreement(
    fx: &Fixture,
    opts: &KeyparamsOptions,
    samples: usize,
    input_seed: u64,
) -> Result<AgreementReport, ProtocolError> {
    let inputs = fx.sample_inputs(samples, input_seed);
    agreement_experiment(&fx.graph, &fx.calibration, &inputs, opts, fx.seed)
}

// ---------------------------------------------------------------------------
// Real data

/// Images and labels from an MNIST-format (IDX) directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Mnist {
    pub rows: usize,
    pub cols: usize,
    /// Pixel bytes, one image after another.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Mnist {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Image `i` scaled to `[0, 1]`, zero-padded symmetrically to `shape`'s
    /// trailing height and width.
    pub fn image(&self, i: usize, shape: &[usize]) -> Tensor {
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let (top, left) = ((h.saturating_sub(self.rows)) / 2, (w.saturating_sub(self.cols)) / 2);
        let mut t = Tensor::zeros(shape.to_vec());
        let img = &self.pixels[i * self.rows * self.cols..(i + 1) * self.rows * self.cols];
        for r in 0..self.rows.min(h) {
            for c in 0..self.cols.min(w) {
                t.data_mut()[(top + r) * w + left + c] = img[r * self.cols + c] as f64 / 255.0;
            }
        }
        t
    }
}

fn be_u32(b: &[u8], at: usize) -> Option<usize> {
    b.get(at..at + 4).map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]) as usize)
}

/// Parse an IDX image file (magic 2051) and label file (magic 2049).
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Mnist, String> {
    if be_u32(images, 0) != Some(2051) {
        return Err("image file does not start with the IDX3 magic 2051".into());
    }
    if be_u32(labels, 0) != Some(2049) {
        return Err("label file does not start with the IDX1 magic 2049".into());
    }
    let (n, rows, cols) = match (be_u32(images, 4), be_u32(images, 8), be_u32(images, 12)) {
        (Some(n), Some(r), Some(c)) => (n, r, c),
        _ => return Err("truncated image header".into()),
    };
    let m = be_u32(labels, 4).ok_or("truncated label header")?;
    if n != m {
        return Err(format!("{n} images but {m} labels"));
    }
    let pixels = images.get(16..16 + n * rows * cols).ok_or("truncated image data")?.to_vec();
    let labels = labels.get(8..8 + n).ok_or("truncated label data")?.to_vec();
    Ok(Mnist { rows, cols, pixels, labels })
}

fn read_idx_pair(dir: &Path, prefix: &str) -> Result<Mnist, ProtocolError> {
    let images = crate::protocol::read_file(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let labels = crate::protocol::read_file(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    parse_idx(&images, &labels).map_err(|e| ProtocolError::input(format!("{}: {e}", dir.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealDataReport {
    pub samples: usize,
    pub cleartext_accuracy: f64,
    pub encrypted_accuracy: f64,
    pub agreement: AgreementReport,
}

/// Accuracy of a trained model on the first `samples` test images, in
/// cleartext and through the encrypted pipeline. Calibration uses the first
/// `calibration_samples` training images when present, otherwise test images
/// after the evaluated ones.
pub fn real_data_experiment(
    model_path: &Path,
    mnist_dir: &Path,
    opts: &KeyparamsOptions,
    samples: usize,
    calibration_samples: usize,
) -> Result<RealDataReport, ProtocolError> {
    let (g, _) = crate::protocol::load_graph(model_path)?;
    let input = g.data_input().ok_or_else(|| ProtocolError::input("model needs exactly one data input"))?.to_string();
    let shape = g.spec(&input).map(|s| s.shape.clone()).unwrap_or_default();
    if shape.len() < 2 {
        return Err(ProtocolError::input(format!("model input {shape:?} is not image shaped")));
    }
    let test = read_idx_pair(mnist_dir, "t10k")?;
    let samples = samples.min(test.len());
    let calib: Vec<Tensor> = match read_idx_pair(mnist_dir, "train") {
        Ok(train) => (0..calibration_samples.min(train.len())).map(|i| train.image(i, &shape)).collect(),
        Err(_) => (samples..test.len()).take(calibration_samples).map(|i| test.image(i, &shape)).collect(),
    };
    if calib.is_empty() {
        return Err(ProtocolError::input("no images left for calibration"));
    }
    let inputs: Vec<Tensor> = (0..samples).map(|i| test.image(i, &shape)).collect();
    let (agreement, clear, encrypted) = evaluate(&g, &CalibrationSet::new(input, calib), &inputs, opts, 0)?;
    let accuracy = |outs: &[Tensor]| {
        outs.iter().zip(&test.labels).filter(|(y, &l)| y.argmax() == l as usize).count() as f64 / samples.max(1) as f64
    };
    Ok(RealDataReport {
        samples,
        cleartext_accuracy: accuracy(&clear),
        encrypted_accuracy: accuracy(&encrypted),
        agreement,
    })
}
