//! Lowering of graph nodes onto backend primitives and encrypted execution.
//!
//! Every linear node becomes a [`LinearMapPlan`]. Zero-padding is always
//! folded into the linear maps that consume it; other adjacent linear maps
//! separated only by reshapes are composed when
//! [`PlanOptions::compose_linear`] is set. ReLU becomes a least-squares
//! polynomial under CKKS and an exact lookup table under TFHE.

mod lower;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lower::{avgpool_matrix, gemm_matrix, im2col_matrix, matmul_matrix, pad_matrix, LinearMapPlan};

use crate::approx::{fit_relu_polynomial, ApproxError, Polynomial, ReluDegree};
use crate::backend::{BackendError, Ciphertext, Evaluator, UnivariateFn};
use crate::calibration::{CalibratedModel, DomainMethod, Interval};
use crate::graph::{pads_of, topo_order, GraphError, ModelGraph, Node, OpKind, Window2d};
use crate::params::{feeds_only_linear, BackendKind, KeyParams};
use crate::tensor::{broadcast_to, Tensor};

pub const DEFAULT_MATRIX_CAP: usize = 1 << 26;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("ReLU node `{0}` needs a polynomial degree under CKKS")]
    UnconfiguredRelu(String),
    #[error("node `{node}`: {reason}")]
    Lowering { node: String, reason: String },
    #[error("node `{node}` lowers to a {rows}x{cols} matrix, above the cap of {cap} elements")]
    MatrixTooLarge { node: String, rows: usize, cols: usize, cap: usize },
    #[error("node `{node}`: {source}")]
    Approx { node: String, source: ApproxError },
    #[error("key parameters do not fit this model: {0}")]
    Params(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Failure inside an encrypted run, tagged with the node being executed.
#[derive(Debug, Error)]
#[error("node `{node}`: {source}")]
pub struct RuntimeError {
    pub node: String,
    pub source: BackendError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReluPolicy {
    /// `None` leaves CKKS ReLU unconfigured (planning fails).
    pub degree: Option<ReluDegree>,
    pub domain: DomainMethod,
}

impl Default for ReluPolicy {
    fn default() -> Self {
        Self { degree: Some(ReluDegree::Three), domain: DomainMethod::mean_std() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub relu: ReluPolicy,
    /// How TFHE quantization ranges are read from calibration statistics.
    pub tfhe_domain: DomainMethod,
    pub compose_linear: bool,
    pub matrix_cap: usize,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            relu: ReluPolicy::default(),
            tfhe_domain: DomainMethod::MinMax,
            compose_linear: true,
            matrix_cap: DEFAULT_MATRIX_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lowering {
    LinearMap(LinearMapPlan),
    AddPlain { values: Vec<f64> },
    MulPlain { values: Vec<f64> },
    AddCt,
    MulCt,
    Polynomial(Polynomial),
    Lut(UnivariateFn),
    ShapeOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub node: String,
    /// Encrypted operand edges.
    pub inputs: Vec<String>,
    pub output: String,
    pub out_shape: Vec<usize>,
    pub lowering: Lowering,
    /// Calibrated range of `output` (TFHE quantization hint).
    pub hint: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub backend: BackendKind,
    pub input: String,
    pub input_shape: Vec<usize>,
    pub output: String,
    pub steps: Vec<Step>,
}

impl ExecutionPlan {
    /// Fitted ReLU surrogates by node name.
    pub fn polynomials(&self) -> BTreeMap<String, Polynomial> {
        self.steps
            .iter()
            .filter_map(|s| match &s.lowering {
                Lowering::Polynomial(p) => Some((s.node.clone(), p.clone())),
                _ => None,
            })
            .collect()
    }

    pub fn linear_maps(&self) -> impl Iterator<Item = &LinearMapPlan> {
        self.steps.iter().filter_map(|s| match &s.lowering {
            Lowering::LinearMap(p) => Some(p),
            _ => None,
        })
    }
}

impl Lowering {
    /// Cleartext meaning of the lowered form applied to its encrypted operands.
    pub fn apply_plain(&self, args: &[&Tensor], out_shape: &[usize]) -> Tensor {
        let x = args[0];
        let zip = |f: fn(f64, f64) -> f64, other: &[f64]| {
            Tensor::new(out_shape.to_vec(), x.data().iter().zip(other).map(|(&a, &b)| f(a, b)).collect())
        };
        match self {
            Lowering::LinearMap(p) => p.apply(x),
            Lowering::AddPlain { values } => zip(|a, b| a + b, values),
            Lowering::MulPlain { values } => zip(|a, b| a * b, values),
            Lowering::AddCt => zip(|a, b| a + b, args[1].data()),
            Lowering::MulCt => zip(|a, b| a * b, args[1].data()),
            Lowering::Polynomial(p) => x.map(|v| p.eval(v)).reshaped(out_shape.to_vec()),
            Lowering::Lut(f) => x.map(|v| f.eval(v)).reshaped(out_shape.to_vec()),
            Lowering::ShapeOnly => x.reshaped(out_shape.to_vec()),
        }
    }
}

impl ExecutionPlan {
    /// Run the plan on cleartext values.
    pub fn run_plain(&self, x: &Tensor) -> Tensor {
        let mut values: HashMap<&str, Tensor> = HashMap::new();
        values.insert(self.input.as_str(), x.clone());
        for s in &self.steps {
            let args: Vec<&Tensor> = s.inputs.iter().map(|e| &values[e.as_str()]).collect();
            let y = s.lowering.apply_plain(&args, &s.out_shape);
            values.insert(s.output.as_str(), y);
        }
        values.remove(self.output.as_str()).expect("plan computes its output")
    }
}

pub fn plan(cm: &CalibratedModel, kp: &KeyParams, opts: &PlanOptions) -> Result<ExecutionPlan, PlanError> {
    let g = &cm.graph;
    let input = g.data_input().ok_or_else(|| GraphError::Structure("graph needs exactly one data input".into()))?;
    let input_shape = g.spec(input).map(|s| s.shape.clone()).unwrap_or_default();
    if input_shape != kp.input_shape {
        return Err(PlanError::Params(format!(
            "model input shape {input_shape:?}, key parameters {:?}",
            kp.input_shape
        )));
    }
    let output = g.outputs.first().cloned().ok_or_else(|| GraphError::Structure("graph has no output".into()))?;

    let mut steps = Vec::new();
    for idx in topo_order(g)? {
        steps.push(lower_node(cm, &g.nodes[idx], kp.backend, opts)?);
    }
    let steps = fuse_linear(g, steps, opts);
    for s in &steps {
        if let Lowering::LinearMap(p) = &s.lowering {
            if p.matrix.dense_len() > opts.matrix_cap {
                return Err(PlanError::MatrixTooLarge {
                    node: s.node.clone(),
                    rows: p.matrix.rows(),
                    cols: p.matrix.cols(),
                    cap: opts.matrix_cap,
                });
            }
        }
    }
    Ok(ExecutionPlan { backend: kp.backend, input: input.to_string(), input_shape, output, steps })
}

fn lower_node(cm: &CalibratedModel, node: &Node, backend: BackendKind, opts: &PlanOptions) -> Result<Step, PlanError> {
    let g = &cm.graph;
    let fail = |reason: String| PlanError::Lowering { node: node.name.clone(), reason };
    let kind = node.kind().ok_or_else(|| fail(format!("unsupported operator {}", node.op)))?;
    let output = node.outputs[0].clone();
    let out_shape = g.spec(&output).ok_or_else(|| fail("output shape not inferred".into()))?.shape.clone();
    let data_inputs: Vec<String> = node.present_inputs().filter(|e| !g.is_initializer(e)).map(String::from).collect();
    let shape_of = |e: &str| g.spec(e).map(|s| s.shape.clone()).ok_or_else(|| fail(format!("edge `{e}` has no shape")));
    let constant = |i: usize| node.input(i).and_then(|e| g.initializers.get(e));
    let hint = cm.edge_interval(&output, opts.tfhe_domain);

    let lowering = match kind {
        OpKind::Conv => {
            let w = constant(1).ok_or_else(|| fail("weights must be constant".into()))?;
            let win = Window2d::from_node(node, Some([w.shape()[2], w.shape()[3]]))?;
            let group = node.attr_int("group").unwrap_or(1) as usize;
            Lowering::LinearMap(im2col_matrix(&shape_of(&data_inputs[0])?, w, &win, group, constant(2)).map_err(fail)?)
        }
        OpKind::AveragePool => {
            let win = Window2d::from_node(node, None)?;
            let cip = node.attr_int("count_include_pad").unwrap_or(0) != 0;
            Lowering::LinearMap(avgpool_matrix(&shape_of(&data_inputs[0])?, &win, cip).map_err(fail)?)
        }
        OpKind::Pad => Lowering::LinearMap(pad_matrix(&shape_of(&data_inputs[0])?, &pads_of(g, node)?).map_err(fail)?),
        OpKind::Gemm => Lowering::LinearMap(
            gemm_matrix(
                &shape_of(&data_inputs[0])?,
                constant(1).ok_or_else(|| fail("B must be constant".into()))?,
                constant(2),
                node.attr_float("alpha").unwrap_or(1.0),
                node.attr_float("beta").unwrap_or(1.0),
                node.attr_int("transA").unwrap_or(0) != 0,
                node.attr_int("transB").unwrap_or(0) != 0,
            )
            .map_err(fail)?,
        ),
        OpKind::MatMul => {
            let data_left = !g.is_initializer(node.input(0).unwrap_or_default());
            let c =
                constant(if data_left { 1 } else { 0 }).ok_or_else(|| fail("one operand must be constant".into()))?;
            Lowering::LinearMap(matmul_matrix(&shape_of(&data_inputs[0])?, c, data_left, &out_shape).map_err(fail)?)
        }
        OpKind::Add | OpKind::Mul => match data_inputs.len() {
            2 => {
                if shape_of(&data_inputs[0])? != out_shape || shape_of(&data_inputs[1])? != out_shape {
                    return Err(fail("encrypted operands must have identical shapes".into()));
                }
                if kind == OpKind::Add {
                    Lowering::AddCt
                } else {
                    Lowering::MulCt
                }
            }
            1 => {
                if shape_of(&data_inputs[0])? != out_shape {
                    return Err(fail("broadcasting the encrypted operand is not supported".into()));
                }
                let c = constant(0).or(constant(1)).ok_or_else(|| fail("constant operand missing".into()))?;
                let values = broadcast_to(c, &out_shape).into_data();
                if kind == OpKind::Add {
                    Lowering::AddPlain { values }
                } else {
                    Lowering::MulPlain { values }
                }
            }
            _ => return Err(fail("needs at least one encrypted operand".into())),
        },
        OpKind::Relu => match backend {
            BackendKind::Ckks => {
                let degree = opts.relu.degree.ok_or_else(|| PlanError::UnconfiguredRelu(node.name.clone()))?;
                let domain = cm
                    .edge_interval(&data_inputs[0], opts.relu.domain)
                    .ok_or_else(|| fail("no calibration statistics for the input".into()))?;
                let p = fit_relu_polynomial(domain, degree)
                    .map_err(|source| PlanError::Approx { node: node.name.clone(), source })?;
                Lowering::Polynomial(p)
            }
            BackendKind::Tfhe => Lowering::Lut(UnivariateFn::Relu),
        },
        OpKind::Flatten | OpKind::Reshape => Lowering::ShapeOnly,
    };
    let lowering = match lowering {
        Lowering::LinearMap(mut p) => {
            p.sources = vec![node.name.clone()];
            p.out_shape = out_shape.clone();
            Lowering::LinearMap(p)
        }
        other => other,
    };
    Ok(Step { node: node.name.clone(), inputs: data_inputs, output, out_shape, lowering, hint })
}

/// Fold zero-padding (always) and, when enabled, any other linear map into
/// the linear maps consuming it, then drop steps whose result is unused.
fn fuse_linear(g: &ModelGraph, mut steps: Vec<Step>, opts: &PlanOptions) -> Vec<Step> {
    let producer: HashMap<String, usize> = steps.iter().enumerate().map(|(i, s)| (s.output.clone(), i)).collect();
    let use_count = |steps: &[Step], edge: &str| -> usize {
        steps.iter().map(|s| s.inputs.iter().filter(|e| *e == edge).count()).sum::<usize>()
            + usize::from(g.outputs.iter().any(|o| o == edge))
    };

    for i in 0..steps.len() {
        if !matches!(steps[i].lowering, Lowering::LinearMap(_)) {
            continue;
        }
        // Walk back through reshapes to the producing linear map.
        let mut edge = steps[i].inputs[0].clone();
        let mut single_use = use_count(&steps, &edge) == 1;
        let mut via = None;
        while let Some(&p) = producer.get(&edge) {
            match &steps[p].lowering {
                Lowering::ShapeOnly => {
                    edge = steps[p].inputs[0].clone();
                    single_use &= use_count(&steps, &edge) == 1;
                }
                Lowering::LinearMap(_) => {
                    via = Some(p);
                    break;
                }
                _ => break,
            }
        }
        let Some(p) = via else { continue };
        let is_pad = g.nodes.iter().any(|n| n.name == steps[p].node && n.kind() == Some(OpKind::Pad));
        let allowed = if is_pad { feeds_only_linear(g, &steps[p].output) } else { opts.compose_linear && single_use };
        if !allowed {
            continue;
        }
        let (Lowering::LinearMap(outer), Lowering::LinearMap(inner)) = (&steps[i].lowering, &steps[p].lowering) else {
            unreachable!("both steps are linear maps");
        };
        let fused = outer.compose(inner);
        if fused.matrix.dense_len() > opts.matrix_cap && !is_pad {
            continue;
        }
        let new_input = steps[p].inputs[0].clone();
        steps[i].lowering = Lowering::LinearMap(fused);
        steps[i].inputs = vec![new_input];
    }

    // Dead-step elimination, last to first.
    let mut live = vec![true; steps.len()];
    for i in (0..steps.len()).rev() {
        let used_later = g.outputs.contains(&steps[i].output)
            || steps.iter().enumerate().any(|(j, s)| j > i && live[j] && s.inputs.contains(&steps[i].output));
        live[i] = used_later;
    }
    steps.into_iter().zip(live).filter_map(|(s, l)| l.then_some(s)).collect()
}

/// Per-run report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    /// CKKS levels used between input and output (0 under TFHE).
    pub levels_consumed: u32,
    pub flushes: u64,
    pub quantizations: u64,
    pub clamped: u64,
}

/// Execute `plan` on `ct_in`. The result has no pending lookup tables.
pub fn run_inference(
    plan: &ExecutionPlan,
    ev: &Evaluator,
    ct_in: &Ciphertext,
) -> Result<(Ciphertext, RunStats), RuntimeError> {
    if ct_in.shape() != plan.input_shape.as_slice() {
        return Err(at(&plan.input)(BackendError::Shape(format!(
            "ciphertext has shape {:?}, model input is {:?}",
            ct_in.shape(),
            plan.input_shape
        ))));
    }
    if ct_in.key_id() != &ev.key().key_id {
        return Err(at(&plan.input)(BackendError::Key(format!(
            "ciphertext key {} differs from evaluation key {}",
            ct_in.key_id().short(),
            ev.key().key_id.short()
        ))));
    }
    let before = ev.counters.snapshot();
    let mut values: HashMap<&str, Ciphertext> = HashMap::new();
    values.insert(plan.input.as_str(), ct_in.clone());

    for step in &plan.steps {
        let err = at(&step.node);
        let arg = |i: usize| -> Result<&Ciphertext, RuntimeError> {
            values
                .get(step.inputs[i].as_str())
                .ok_or_else(|| err(BackendError::Shape(format!("edge `{}` has no value", step.inputs[i]))))
        };
        let out = match &step.lowering {
            Lowering::LinearMap(p) => {
                ev.linear_map(arg(0)?, &p.matrix, p.bias.as_deref(), step.out_shape.clone(), step.hint)
            }
            Lowering::AddPlain { values } => ev.add_plain(arg(0)?, values),
            Lowering::MulPlain { values } => ev.mul_plain(arg(0)?, values),
            Lowering::AddCt => ev.add_ct(arg(0)?, arg(1)?),
            Lowering::MulCt => ev.mul_ct(arg(0)?, arg(1)?),
            Lowering::Polynomial(p) => eval_power_tree(ev, arg(0)?, &p.coeffs),
            Lowering::Lut(f) => ev.lut(arg(0)?, f.clone(), step.hint),
            Lowering::ShapeOnly => arg(0)?.clone().reshaped(step.out_shape.clone()),
        }
        .map_err(&err)?;
        values.insert(step.output.as_str(), out);
    }

    let out = values
        .remove(plan.output.as_str())
        .ok_or_else(|| at(&plan.output)(BackendError::Shape("graph output was not computed".into())))?;
    let out = ev.flush(&out).map_err(at(&plan.output))?;
    let after = ev.counters.snapshot();
    let levels_consumed = match (ct_in.level(), out.level()) {
        (Some(a), Some(b)) => a - b,
        _ => 0,
    };
    Ok((
        out,
        RunStats {
            levels_consumed,
            flushes: after.flushes - before.flushes,
            quantizations: after.quantizations - before.quantizations,
            clamped: after.clamped - before.clamped,
        },
    ))
}

fn at(node: &str) -> impl Fn(BackendError) -> RuntimeError + '_ {
    move |source| RuntimeError { node: node.to_string(), source }
}

/// `sum_k c_k x^k` with `x^(2^i)` built by repeated squaring. Each monomial
/// multiplies its coefficient into the shallowest factor first, so degree
/// `d` costs `bit_length(d)` levels. Zero coefficients are still evaluated,
/// keeping the level count a function of the degree alone.
pub fn eval_power_tree(ev: &Evaluator, x: &Ciphertext, coeffs: &[f64]) -> Result<Ciphertext, BackendError> {
    let d = coeffs.len().saturating_sub(1);
    let n = x.element_count();
    if d == 0 {
        let zero = ev.mul_plain(x, &vec![0.0; n])?;
        return ev.add_plain(&zero, &vec![coeffs.first().copied().unwrap_or(0.0); n]);
    }
    let mut powers = vec![x.clone()];
    while (1usize << powers.len()) <= d {
        let last = powers.last().expect("non-empty");
        powers.push(ev.mul_ct(last, last)?);
    }
    let mut acc: Option<Ciphertext> = None;
    for (k, &c) in coeffs.iter().enumerate().skip(1) {
        let factors: Vec<&Ciphertext> = (0..powers.len()).filter(|i| k >> i & 1 == 1).map(|i| &powers[i]).collect();
        let mut term = ev.mul_plain(factors[0], &vec![c; n])?;
        for f in &factors[1..] {
            term = ev.mul_ct(&term, f)?;
        }
        acc = Some(match acc {
            None => term,
            Some(a) => ev.add_ct(&a, &term)?,
        });
    }
    ev.add_plain(&acc.expect("degree >= 1"), &vec![coeffs[0]; n])
}
