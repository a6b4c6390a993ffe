use std::fmt;

use serde::{Deserialize, Serialize};

use super::{AttrValue, ModelGraph, Node, OpKind, SUPPORTED_OPSETS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnsupportedIssue {
    /// Offending node name, or `<graph>` for model-level problems.
    pub node: String,
    pub op: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UnsupportedReport {
    pub issues: Vec<UnsupportedIssue>,
}

impl fmt::Display for UnsupportedReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model uses {} unsupported construct(s):", self.issues.len())?;
        for i in &self.issues {
            writeln!(f, "  {} ({}): {}", i.node, i.op, i.reason)?;
        }
        Ok(())
    }
}

impl std::error::Error for UnsupportedReport {}

/// Check that every node and attribute combination can be executed
/// homomorphically. All problems are collected rather than stopping at the
/// first.
pub fn validate_supported(g: &ModelGraph) -> Result<(), UnsupportedReport> {
    let mut report = UnsupportedReport::default();
    let mut graph_issue =
        |reason: String| report.issues.push(UnsupportedIssue { node: "<graph>".into(), op: String::new(), reason });
    if !SUPPORTED_OPSETS.contains(&g.opset) {
        graph_issue(format!(
            "opset {} is outside the supported range {}..={}",
            g.opset,
            SUPPORTED_OPSETS.start(),
            SUPPORTED_OPSETS.end()
        ));
    }
    if g.data_input().is_none() {
        graph_issue(format!(
            "exactly one non-constant graph input is required, found {}",
            g.inputs.iter().filter(|e| !g.is_initializer(e)).count()
        ));
    }
    if g.outputs.len() != 1 {
        graph_issue(format!("exactly one graph output is required, found {}", g.outputs.len()));
    }

    for node in &g.nodes {
        let reasons = match node.kind() {
            None => vec![format!("operator `{}` is not supported", node.op)],
            Some(kind) => check_node(g, node, kind),
        };
        for reason in reasons {
            report.issues.push(UnsupportedIssue { node: node.name.clone(), op: node.op.to_string(), reason });
        }
    }

    if report.issues.is_empty() {
        Ok(())
    } else {
        Err(report)
    }
}

fn check_node(g: &ModelGraph, node: &Node, kind: OpKind) -> Vec<String> {
    let mut r = Vec::new();
    let is_const = |i: usize| node.input(i).is_some_and(|e| g.is_initializer(e));
    let has = |i: usize| node.input(i).is_some();
    if node.outputs.len() != 1 {
        r.push(format!("expected one output, found {}", node.outputs.len()));
    }
    if node.present_inputs().all(|e| g.is_initializer(e)) {
        r.push("all inputs are constant (constant folding is not supported)".into());
    }
    match kind {
        OpKind::Conv => {
            if !is_const(1) {
                r.push("weights must be a constant initializer".into());
            }
            if has(2) && !is_const(2) {
                r.push("bias must be a constant initializer".into());
            }
            if let Some(d) = node.attr_ints("dilations") {
                if d.iter().any(|&v| v != 1) {
                    r.push(format!("dilations {d:?} are not supported"));
                }
            }
            check_auto_pad(node, &mut r);
            if let Some(w) = node.input(1).and_then(|e| g.initializers.get(e)) {
                if w.shape().len() != 4 {
                    r.push(format!("only 2-D convolutions are supported, weights {:?}", w.shape()));
                }
            }
        }
        OpKind::AveragePool => {
            if node.attr_int("ceil_mode").unwrap_or(0) != 0 {
                r.push("ceil_mode=1 is not supported".into());
            }
            if let Some(d) = node.attr_ints("dilations") {
                if d.iter().any(|&v| v != 1) {
                    r.push(format!("dilations {d:?} are not supported"));
                }
            }
            match node.attr_ints("kernel_shape") {
                Some(k) if k.len() == 2 => {}
                other => r.push(format!("only 2-D kernel_shape is supported, got {other:?}")),
            }
            check_auto_pad(node, &mut r);
        }
        OpKind::Gemm => {
            if is_const(0) {
                r.push("operand A must be the encrypted input".into());
            }
            if !is_const(1) {
                r.push("operand B must be a constant initializer".into());
            }
            if has(2) && !is_const(2) {
                r.push("bias C must be a constant initializer".into());
            }
        }
        OpKind::MatMul => {
            if is_const(0) == is_const(1) {
                r.push("exactly one operand must be a constant initializer".into());
            }
            if is_const(0) {
                if let Some(t) = node.input(0).and_then(|e| g.initializers.get(e)) {
                    if t.shape().len() != 2 {
                        r.push("a constant left operand must be 2-D".into());
                    }
                }
            }
            if is_const(1) {
                if let Some(t) = node.input(1).and_then(|e| g.initializers.get(e)) {
                    if t.shape().len() > 2 {
                        r.push("a constant right operand must be 1-D or 2-D".into());
                    }
                }
            }
        }
        OpKind::Pad => {
            match node.attr_string("mode") {
                None | Some("constant") => {}
                Some(m) => r.push(format!("pad mode `{m}` is not supported")),
            }
            if !is_const(1) {
                r.push("pads must be a constant initializer".into());
            } else if let Some(t) = node.input(1).and_then(|e| g.initializers.get(e)) {
                if t.data().iter().any(|&v| v < 0.0) {
                    r.push("negative pads (cropping) are not supported".into());
                }
            }
            if has(2) {
                match node.input(2).and_then(|e| g.initializers.get(e)) {
                    Some(t) if t.data().iter().all(|&v| v == 0.0) => {}
                    _ => r.push("only zero constant_value is supported".into()),
                }
            }
            if has(3) {
                r.push("the axes input is not supported".into());
            }
        }
        OpKind::Reshape => {
            if !is_const(1) {
                r.push("target shape must be a constant initializer".into());
            }
            if node.attr_int("allowzero").unwrap_or(0) != 0 {
                r.push("allowzero=1 is not supported".into());
            }
        }
        OpKind::Add | OpKind::Mul | OpKind::Relu | OpKind::Flatten => {}
    }
    for (name, value) in &node.attrs {
        if let AttrValue::Opaque(ty) = value {
            r.push(format!("attribute `{name}` has unsupported type {ty}"));
        }
    }
    r
}

fn check_auto_pad(node: &Node, r: &mut Vec<String>) {
    match node.attr_string("auto_pad") {
        None | Some("NOTSET") | Some("VALID") => {}
        Some(other) => r.push(format!("auto_pad={other} is not supported")),
    }
}
