//! Internal operator graph for the supported ONNX subset.
//!
//! A [`ModelGraph`] is produced by [`load_model`], checked by
//! [`validate_supported`], completed by [`infer_shapes`] and traversed in
//! [`topo_order`]. Initializers are held as canonical 64-bit tensors whatever
//! their ONNX element type.

mod onnx;
pub mod proto;
mod shape;
mod validate;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use onnx::{load_model, to_onnx_bytes};
pub(crate) use shape::pads_of;
pub use shape::{infer_shapes, Window2d};
pub use validate::{validate_supported, UnsupportedIssue, UnsupportedReport};

/// ONNX opset versions whose semantics for the supported operators are
/// identical (Pad takes `pads` as an input, AveragePool has no dilations).
pub const SUPPORTED_OPSETS: std::ops::RangeInclusive<i64> = 11..=17;

/// Opset written by [`to_onnx_bytes`].
pub const EXPORT_OPSET: i64 = 13;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed ONNX model: {0}")]
    Parse(String),
    #[error("shape error at node `{node}`: {reason}")]
    Shape { node: String, reason: String },
    #[error("graph error: {0}")]
    Structure(String),
    #[error("graph contains a cycle through node `{0}`")]
    Cycle(String),
}

impl GraphError {
    pub(crate) fn shape(node: &str, reason: impl Into<String>) -> Self {
        GraphError::Shape { node: node.to_string(), reason: reason.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Add,
    Mul,
    MatMul,
    Gemm,
    Conv,
    AveragePool,
    Relu,
    Pad,
    Flatten,
    Reshape,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::Add,
        OpKind::Mul,
        OpKind::MatMul,
        OpKind::Gemm,
        OpKind::Conv,
        OpKind::AveragePool,
        OpKind::Relu,
        OpKind::Pad,
        OpKind::Flatten,
        OpKind::Reshape,
    ];

    pub fn from_onnx(op_type: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == op_type)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Add => "Add",
            OpKind::Mul => "Mul",
            OpKind::MatMul => "MatMul",
            OpKind::Gemm => "Gemm",
            OpKind::Conv => "Conv",
            OpKind::AveragePool => "AveragePool",
            OpKind::Relu => "Relu",
            OpKind::Pad => "Pad",
            OpKind::Flatten => "Flatten",
            OpKind::Reshape => "Reshape",
        }
    }

    /// Operators that only relabel the shape of their input.
    pub fn is_shape_only(self) -> bool {
        matches!(self, OpKind::Flatten | OpKind::Reshape)
    }
}

/// Operator kind as read from the file; unknown kinds survive loading so that
/// validation can report them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Supported(OpKind),
    Unsupported(String),
}

impl Op {
    pub fn kind(&self) -> Option<OpKind> {
        match self {
            Op::Supported(k) => Some(*k),
            Op::Unsupported(_) => None,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Op::Supported(k) => k.as_str(),
            Op::Unsupported(s) => s,
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AttrValue {
    Int(i64),
    Float(f32),
    Ints(Vec<i64>),
    Floats(Vec<f32>),
    String(String),
    /// Attribute of a type this crate never interprets (kept for reporting).
    Opaque(i32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub attrs: BTreeMap<String, AttrValue>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Node {
    pub fn new(name: impl Into<String>, op: OpKind, inputs: &[&str], outputs: &[&str]) -> Self {
        Self {
            name: name.into(),
            op: Op::Supported(op),
            attrs: BTreeMap::new(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn with_attr(mut self, name: &str, value: AttrValue) -> Self {
        self.attrs.insert(name.to_string(), value);
        self
    }

    pub fn kind(&self) -> Option<OpKind> {
        self.op.kind()
    }

    pub fn attr_int(&self, name: &str) -> Option<i64> {
        match self.attrs.get(name) {
            Some(AttrValue::Int(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn attr_float(&self, name: &str) -> Option<f64> {
        match self.attrs.get(name) {
            Some(AttrValue::Float(v)) => Some(f64::from(*v)),
            _ => None,
        }
    }

    pub fn attr_ints(&self, name: &str) -> Option<&[i64]> {
        match self.attrs.get(name) {
            Some(AttrValue::Ints(v)) => Some(v),
            _ => None,
        }
    }

    pub fn attr_string(&self, name: &str) -> Option<&str> {
        match self.attrs.get(name) {
            Some(AttrValue::String(v)) => Some(v),
            _ => None,
        }
    }

    /// Non-empty input edge ids (ONNX marks omitted optional inputs with "").
    pub fn present_inputs(&self) -> impl Iterator<Item = &str> {
        self.inputs.iter().map(String::as_str).filter(|s| !s.is_empty())
    }

    pub fn input(&self, i: usize) -> Option<&str> {
        self.inputs.get(i).map(String::as_str).filter(|s| !s.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(shape: Vec<usize>) -> Self {
        Self { shape }
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub name: String,
    pub opset: i64,
    pub nodes: Vec<Node>,
    /// Edge shapes. After [`infer_shapes`] every edge is present.
    pub edges: BTreeMap<String, TensorSpec>,
    pub initializers: BTreeMap<String, Tensor>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl ModelGraph {
    pub fn is_initializer(&self, edge: &str) -> bool {
        self.initializers.contains_key(edge)
    }

    pub fn spec(&self, edge: &str) -> Option<&TensorSpec> {
        self.edges.get(edge)
    }

    /// The single non-initializer graph input.
    pub fn data_input(&self) -> Option<&str> {
        let mut it = self.inputs.iter().filter(|e| !self.is_initializer(e));
        match (it.next(), it.next()) {
            (Some(e), None) => Some(e),
            _ => None,
        }
    }

    /// Index of the node producing `edge`.
    pub fn producer(&self, edge: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.outputs.iter().any(|o| o == edge))
    }

    /// Indices of nodes consuming `edge`.
    pub fn consumers(&self, edge: &str) -> Vec<usize> {
        self.nodes.iter().enumerate().filter(|(_, n)| n.present_inputs().any(|i| i == edge)).map(|(i, _)| i).collect()
    }

    /// Largest element count over edges that carry data (initializers excluded).
    pub fn max_data_elements(&self) -> usize {
        self.edges.iter().filter(|(e, _)| !self.is_initializer(e)).map(|(_, s)| s.element_count()).max().unwrap_or(0)
    }

    /// Total number of initializer values consumed as weights or biases.
    pub fn parameter_count(&self) -> usize {
        let mut count = 0;
        for node in &self.nodes {
            let weight_inputs: &[usize] = match node.kind() {
                Some(OpKind::Conv) | Some(OpKind::Gemm) => &[1, 2],
                Some(OpKind::MatMul) | Some(OpKind::Add) | Some(OpKind::Mul) => &[0, 1],
                _ => &[],
            };
            for &i in weight_inputs {
                if let Some(t) = node.input(i).and_then(|e| self.initializers.get(e)) {
                    count += t.len();
                }
            }
        }
        count
    }
}

/// Deterministic topological order of node indices. Ties are broken by the
/// original node index.
pub fn topo_order(g: &ModelGraph) -> Result<Vec<usize>, GraphError> {
    let mut producer: HashMap<&str, usize> = HashMap::new();
    for (i, node) in g.nodes.iter().enumerate() {
        for out in &node.outputs {
            if g.is_initializer(out) {
                return Err(GraphError::Structure(format!("node `{}` writes initializer `{out}`", node.name)));
            }
            if producer.insert(out.as_str(), i).is_some() {
                return Err(GraphError::Structure(format!("edge `{out}` has more than one producer")));
            }
        }
    }

    let mut indegree = vec![0usize; g.nodes.len()];
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); g.nodes.len()];
    for (i, node) in g.nodes.iter().enumerate() {
        for input in node.present_inputs() {
            if let Some(&p) = producer.get(input) {
                indegree[i] += 1;
                dependents[p].push(i);
            } else if !g.is_initializer(input) && !g.inputs.iter().any(|e| e == input) {
                return Err(GraphError::Structure(format!("input `{input}` of node `{}` has no producer", node.name)));
            }
        }
    }

    let mut ready: BinaryHeap<Reverse<usize>> = (0..g.nodes.len()).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(g.nodes.len());
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &d in &dependents[i] {
            indegree[d] -= 1;
            if indegree[d] == 0 {
                ready.push(Reverse(d));
            }
        }
    }
    if order.len() != g.nodes.len() {
        let stuck = (0..g.nodes.len()).find(|&i| indegree[i] > 0).unwrap_or(0);
        return Err(GraphError::Cycle(g.nodes[stuck].name.clone()));
    }
    Ok(order)
}
