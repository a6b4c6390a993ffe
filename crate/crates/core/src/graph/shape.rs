use super::{topo_order, GraphError, ModelGraph, Node, OpKind, TensorSpec};
use crate::tensor::broadcast_shape;

/// Spatial window parameters shared by Conv and AveragePool (2-D only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window2d {
    pub kernel: [usize; 2],
    pub strides: [usize; 2],
    /// ONNX order: [h_begin, w_begin, h_end, w_end].
    pub pads: [usize; 4],
}

impl Window2d {
    /// Read kernel/strides/pads from `node`. For Conv the kernel comes from
    /// the weight shape when `kernel_shape` is absent.
    pub fn from_node(node: &Node, weight_kernel: Option<[usize; 2]>) -> Result<Self, GraphError> {
        let kernel = match node.attr_ints("kernel_shape") {
            Some(k) if k.len() == 2 => [to_usize(node, k[0])?, to_usize(node, k[1])?],
            Some(k) => return Err(GraphError::shape(&node.name, format!("expected 2-D kernel_shape, got {k:?}"))),
            None => weight_kernel.ok_or_else(|| GraphError::shape(&node.name, "missing kernel_shape"))?,
        };
        let strides = match node.attr_ints("strides") {
            Some(s) if s.len() == 2 => [to_usize(node, s[0])?, to_usize(node, s[1])?],
            Some(s) => return Err(GraphError::shape(&node.name, format!("expected 2 strides, got {s:?}"))),
            None => [1, 1],
        };
        let pads = match node.attr_string("auto_pad") {
            Some("VALID") => [0; 4],
            _ => match node.attr_ints("pads") {
                Some(p) if p.len() == 4 => {
                    [to_usize(node, p[0])?, to_usize(node, p[1])?, to_usize(node, p[2])?, to_usize(node, p[3])?]
                }
                Some(p) => return Err(GraphError::shape(&node.name, format!("expected 4 pads, got {p:?}"))),
                None => [0; 4],
            },
        };
        if strides.contains(&0) || kernel.contains(&0) {
            return Err(GraphError::shape(&node.name, "zero stride or kernel extent"));
        }
        Ok(Self { kernel, strides, pads })
    }

    /// Output spatial extent; `None` when the kernel does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<[usize; 2]> {
        let ph = h + self.pads[0] + self.pads[2];
        let pw = w + self.pads[1] + self.pads[3];
        if ph < self.kernel[0] || pw < self.kernel[1] {
            return None;
        }
        Some([(ph - self.kernel[0]) / self.strides[0] + 1, (pw - self.kernel[1]) / self.strides[1] + 1])
    }
}

fn to_usize(node: &Node, v: i64) -> Result<usize, GraphError> {
    usize::try_from(v).map_err(|_| GraphError::shape(&node.name, format!("negative attribute value {v}")))
}

/// Propagate concrete shapes to every edge using standard ONNX shape rules.
/// Idempotent.
pub fn infer_shapes(g: &ModelGraph) -> Result<ModelGraph, GraphError> {
    let mut out = g.clone();
    for input in &g.inputs {
        match g.edges.get(input) {
            None => {
                return Err(GraphError::shape(input, "graph input has no concrete shape"));
            }
            Some(spec) if spec.shape.len() >= 2 && spec.shape[0] != 1 => {
                return Err(GraphError::shape(input, format!("batch size must be 1, got shape {:?}", spec.shape)));
            }
            Some(spec) if spec.shape.contains(&0) => {
                return Err(GraphError::shape(input, "zero-sized dimension"));
            }
            _ => {}
        }
    }
    for idx in topo_order(g)? {
        let node = &g.nodes[idx];
        let shape = node_output_shape(&out, node)?;
        if shape.contains(&0) {
            return Err(GraphError::shape(&node.name, format!("empty output shape {shape:?}")));
        }
        let output = node.outputs.first().ok_or_else(|| GraphError::shape(&node.name, "node has no outputs"))?;
        out.edges.insert(output.clone(), TensorSpec::new(shape));
    }
    for o in &out.outputs {
        if !out.edges.contains_key(o) {
            return Err(GraphError::Structure(format!("graph output `{o}` is never produced")));
        }
    }
    Ok(out)
}

fn input_shape<'a>(g: &'a ModelGraph, node: &Node, i: usize) -> Result<&'a [usize], GraphError> {
    let edge = node.input(i).ok_or_else(|| GraphError::shape(&node.name, format!("missing input #{i}")))?;
    g.edges
        .get(edge)
        .map(|s| s.shape.as_slice())
        .ok_or_else(|| GraphError::shape(&node.name, format!("input `{edge}` has no shape")))
}

fn node_output_shape(g: &ModelGraph, node: &Node) -> Result<Vec<usize>, GraphError> {
    let kind = node.kind().ok_or_else(|| GraphError::shape(&node.name, format!("unsupported operator {}", node.op)))?;
    let err = |reason: String| GraphError::shape(&node.name, reason);
    match kind {
        OpKind::Relu => Ok(input_shape(g, node, 0)?.to_vec()),
        OpKind::Add | OpKind::Mul => {
            let a = input_shape(g, node, 0)?;
            let b = input_shape(g, node, 1)?;
            broadcast_shape(a, b).ok_or_else(|| err(format!("cannot broadcast {a:?} with {b:?}")))
        }
        OpKind::Conv => {
            let x = input_shape(g, node, 0)?;
            let w = input_shape(g, node, 1)?;
            if x.len() != 4 || w.len() != 4 {
                return Err(err(format!("Conv expects 4-D input and weights, got {x:?} and {w:?}")));
            }
            let group = node.attr_int("group").unwrap_or(1);
            if group < 1 {
                return Err(err(format!("invalid group {group}")));
            }
            let group = group as usize;
            if x[1] != w[1] * group || w[0] % group != 0 {
                return Err(err(format!("channel mismatch: input {} channels, weights {w:?}, group {group}", x[1])));
            }
            if let Some(b) = node.input(2) {
                let bs = g.edges.get(b).map(|s| s.element_count());
                if bs != Some(w[0]) {
                    return Err(err(format!("bias must have {} elements", w[0])));
                }
            }
            let win = Window2d::from_node(node, Some([w[2], w[3]]))?;
            if win.kernel != [w[2], w[3]] {
                return Err(err("kernel_shape disagrees with weights".into()));
            }
            let [oh, ow] = win
                .output_hw(x[2], x[3])
                .ok_or_else(|| err(format!("kernel {:?} larger than padded input {x:?}", win.kernel)))?;
            Ok(vec![x[0], w[0], oh, ow])
        }
        OpKind::AveragePool => {
            let x = input_shape(g, node, 0)?;
            if x.len() != 4 {
                return Err(err(format!("AveragePool expects 4-D input, got {x:?}")));
            }
            let win = Window2d::from_node(node, None)?;
            let [oh, ow] = win
                .output_hw(x[2], x[3])
                .ok_or_else(|| err(format!("kernel {:?} larger than padded input {x:?}", win.kernel)))?;
            Ok(vec![x[0], x[1], oh, ow])
        }
        OpKind::Gemm => {
            let a = input_shape(g, node, 0)?;
            let b = input_shape(g, node, 1)?;
            if a.len() != 2 || b.len() != 2 {
                return Err(err(format!("Gemm expects 2-D operands, got {a:?} and {b:?}")));
            }
            let (m, ka) = if node.attr_int("transA").unwrap_or(0) != 0 { (a[1], a[0]) } else { (a[0], a[1]) };
            let (kb, n) = if node.attr_int("transB").unwrap_or(0) != 0 { (b[1], b[0]) } else { (b[0], b[1]) };
            if ka != kb {
                return Err(err(format!("inner dimensions differ: {ka} vs {kb}")));
            }
            if node.input(2).is_some() {
                let c = input_shape(g, node, 2)?;
                if broadcast_shape(&[m, n], c).as_deref() != Some(&[m, n][..]) {
                    return Err(err(format!("bias shape {c:?} does not broadcast to [{m}, {n}]")));
                }
            }
            Ok(vec![m, n])
        }
        OpKind::MatMul => {
            let a = input_shape(g, node, 0)?;
            let b = input_shape(g, node, 1)?;
            matmul_shape(a, b).ok_or_else(|| err(format!("incompatible MatMul operands {a:?} and {b:?}")))
        }
        OpKind::Pad => {
            let x = input_shape(g, node, 0)?;
            let pads = pads_of(g, node)?;
            if pads.len() != 2 * x.len() {
                return Err(err(format!("expected {} pads, got {}", 2 * x.len(), pads.len())));
            }
            Ok(x.iter().enumerate().map(|(i, &d)| d + pads[i] + pads[i + x.len()]).collect())
        }
        OpKind::Flatten => {
            let x = input_shape(g, node, 0)?;
            let rank = x.len() as i64;
            let mut axis = node.attr_int("axis").unwrap_or(1);
            if axis < 0 {
                axis += rank;
            }
            if !(0..=rank).contains(&axis) {
                return Err(err(format!("axis {axis} out of range for rank {rank}")));
            }
            let axis = axis as usize;
            Ok(vec![x[..axis].iter().product(), x[axis..].iter().product()])
        }
        OpKind::Reshape => {
            let x = input_shape(g, node, 0)?;
            let target = node
                .input(1)
                .and_then(|e| g.initializers.get(e))
                .ok_or_else(|| err("Reshape target shape must be a constant".into()))?;
            reshape_target(x, target.data()).map_err(err)
        }
    }
}

/// Zero-padding amounts of a Pad node as `[begin..., end...]`.
pub(crate) fn pads_of(g: &ModelGraph, node: &Node) -> Result<Vec<usize>, GraphError> {
    let t = node
        .input(1)
        .and_then(|e| g.initializers.get(e))
        .ok_or_else(|| GraphError::shape(&node.name, "Pad amounts must be a constant input"))?;
    t.data()
        .iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 {
                Err(GraphError::shape(&node.name, format!("unsupported pad amount {v}")))
            } else {
                Ok(v as usize)
            }
        })
        .collect()
}

pub(crate) fn matmul_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    match (a.len(), b.len()) {
        (0, _) | (_, 0) => None,
        (1, 1) => (a[0] == b[0]).then(|| vec![1]),
        (1, 2) => (a[0] == b[0]).then(|| vec![b[1]]),
        (_, 1) => {
            let (k, lead) = (a[a.len() - 1], &a[..a.len() - 1]);
            (k == b[0]).then(|| lead.to_vec())
        }
        (_, 2) => {
            let k = a[a.len() - 1];
            if k != b[0] {
                return None;
            }
            let mut out = a[..a.len() - 1].to_vec();
            out.push(b[1]);
            Some(out)
        }
        _ => None,
    }
}

fn reshape_target(x: &[usize], target: &[f64]) -> Result<Vec<usize>, String> {
    let total: usize = x.iter().product();
    let mut out = Vec::with_capacity(target.len());
    let mut infer = None;
    for (i, &t) in target.iter().enumerate() {
        let t = t as i64;
        match t {
            -1 if infer.is_none() => {
                infer = Some(i);
                out.push(1);
            }
            0 => out.push(*x.get(i).ok_or_else(|| format!("shape entry 0 at {i} has no source dim"))?),
            t if t > 0 => out.push(t as usize),
            _ => return Err(format!("invalid reshape target {target:?}")),
        }
    }
    let known: usize = out.iter().product();
    if let Some(i) = infer {
        if known == 0 || !total.is_multiple_of(known) {
            return Err(format!("cannot infer -1 in {target:?} for {total} elements"));
        }
        out[i] = total / known;
    } else if known != total {
        return Err(format!("reshape {x:?} to {target:?} changes element count"));
    }
    Ok(out)
}
