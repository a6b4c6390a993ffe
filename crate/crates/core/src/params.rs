//! Automatic encryption-parameter selection.
//!
//! CKKS parameters follow from the multiplicative depth of the network and
//! the largest tensor that must fit into one ciphertext; TFHE parameters are
//! fixed rows indexed by the security level. Both tables are static.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approx::{poly_depth, ReluDegree};
use crate::calibration::{CalibratedModel, DomainMethod, Interval};
use crate::graph::{topo_order, GraphError, ModelGraph, OpKind};

pub const KEYPARAMS_VERSION: u32 = 1;

/// `(log2 N, max log2 q)` pairs for 128-bit security.
pub const CKKS_MAX_Q_BITS: [(u32, u32); 4] = [(12, 109), (13, 218), (14, 438), (15, 881)];
/// Bit size of the first and last primes of the coefficient chain.
pub const CKKS_EDGE_BITS: u32 = 30;
pub const CKKS_MAX_SCALE_BITS: u32 = 40;
/// Below this many fractional bits the parameters are considered unusable.
pub const CKKS_MIN_SCALE_BITS: u32 = 16;

pub const DEFAULT_MSG_BITS: u32 = 6;
pub const DEFAULT_LAMBDA: u32 = 128;

/// One TFHE parameter row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TfheRow {
    pub lambda_bits: u32,
    pub rlwe_n: u32,
    pub rlwe_sigma_log2: i32,
    pub lwe_k: u32,
    pub lwe_sigma_log2: i32,
}

pub const TFHE_ROWS: [TfheRow; 2] = [
    TfheRow { lambda_bits: 80, rlwe_n: 2048, rlwe_sigma_log2: -60, lwe_k: 542, lwe_sigma_log2: -23 },
    TfheRow { lambda_bits: 128, rlwe_n: 4096, rlwe_sigma_log2: -62, lwe_k: 938, lwe_sigma_log2: -23 },
];

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("no {backend} parameter set for a {lambda}-bit security level")]
    UnsupportedLambda { backend: BackendKind, lambda: u32 },
    #[error("no CKKS parameters up to log2 N = 15: {0}")]
    Infeasible(String),
    #[error("invalid key parameters: {0}")]
    Invalid(String),
    #[error("key parameters JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Ckks,
    Tfhe,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::Ckks => "ckks",
            BackendKind::Tfhe => "tfhe",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CkksParams {
    pub log2_n: u32,
    /// Prime bit sizes, first to last.
    pub coeff_bit_chain: Vec<u32>,
    pub scale_bits: u32,
}

impl CkksParams {
    pub fn slots(&self) -> usize {
        1 << (self.log2_n - 1)
    }

    /// Rescaling levels available to a fresh ciphertext.
    pub fn levels(&self) -> u32 {
        self.coeff_bit_chain.len().saturating_sub(2) as u32
    }

    pub fn total_q_bits(&self) -> u32 {
        self.coeff_bit_chain.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TfheParams {
    pub rlwe_n: u32,
    pub rlwe_sigma_log2: i32,
    pub lwe_k: u32,
    pub lwe_sigma_log2: i32,
    pub msg_bits: u32,
    pub input_interval: Interval,
}

/// Public parameter record sent from model owner to data owner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyParams {
    pub format_version: u32,
    pub backend: BackendKind,
    pub lambda_bits: u32,
    pub input_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ckks: Option<CkksParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tfhe: Option<TfheParams>,
}

impl KeyParams {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("key parameters serialize")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ParamsError> {
        let kp: KeyParams = serde_json::from_slice(bytes)?;
        kp.validate()?;
        Ok(kp)
    }

    pub fn input_elements(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Re-check every invariant; used on load and after derivation.
    pub fn validate(&self) -> Result<(), ParamsError> {
        let invalid = |m: String| Err(ParamsError::Invalid(m));
        if self.format_version != KEYPARAMS_VERSION {
            return invalid(format!(
                "unsupported format_version {} (expected {KEYPARAMS_VERSION})",
                self.format_version
            ));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return invalid(format!("input_shape {:?} is not a concrete shape", self.input_shape));
        }
        match (self.backend, &self.ckks, &self.tfhe) {
            (BackendKind::Ckks, Some(c), None) => {
                if self.lambda_bits != 128 {
                    return Err(ParamsError::UnsupportedLambda {
                        backend: BackendKind::Ckks,
                        lambda: self.lambda_bits,
                    });
                }
                let Some(&(_, cap)) = CKKS_MAX_Q_BITS.iter().find(|(n, _)| *n == c.log2_n) else {
                    return invalid(format!("log2_n {} is not in the parameter table", c.log2_n));
                };
                if c.coeff_bit_chain.len() < 2 {
                    return invalid("coefficient chain needs at least two primes".into());
                }
                if c.total_q_bits() > cap {
                    return invalid(format!(
                        "chain totals {} bits, cap for log2_n {} is {cap}",
                        c.total_q_bits(),
                        c.log2_n
                    ));
                }
                if c.scale_bits == 0 || c.scale_bits > 60 {
                    return invalid(format!("scale_bits {} out of range", c.scale_bits));
                }
                if self.input_elements() > c.slots() {
                    return invalid(format!(
                        "input has {} elements but only {} slots",
                        self.input_elements(),
                        c.slots()
                    ));
                }
                Ok(())
            }
            (BackendKind::Tfhe, None, Some(t)) => {
                let row = tfhe_row(self.lambda_bits)?;
                if (t.rlwe_n, t.rlwe_sigma_log2, t.lwe_k, t.lwe_sigma_log2)
                    != (row.rlwe_n, row.rlwe_sigma_log2, row.lwe_k, row.lwe_sigma_log2)
                {
                    return invalid("TFHE parameters do not match the table row for this security level".into());
                }
                if !(1..=16).contains(&t.msg_bits) {
                    return invalid(format!("msg_bits {} out of range 1..=16", t.msg_bits));
                }
                let i = t.input_interval;
                if !(i.lo.is_finite() && i.hi.is_finite() && i.lo < i.hi) {
                    return invalid(format!("input interval [{}, {}] is not a finite non-empty interval", i.lo, i.hi));
                }
                Ok(())
            }
            _ => invalid(format!("backend `{}` must carry exactly its own parameter block", self.backend)),
        }
    }
}

pub fn tfhe_row(lambda_bits: u32) -> Result<TfheRow, ParamsError> {
    TFHE_ROWS
        .iter()
        .copied()
        .find(|r| r.lambda_bits == lambda_bits)
        .ok_or(ParamsError::UnsupportedLambda { backend: BackendKind::Tfhe, lambda: lambda_bits })
}

/// Multiplicative depth analysis of a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    pub d_m: u32,
    /// Levels each node adds on its own.
    pub node_cost: BTreeMap<String, u32>,
    /// Accumulated depth at each node's output.
    pub node_depth: BTreeMap<String, u32>,
    pub max_tensor_elements: usize,
}

/// True when every use of `edge` (looking through shape-only nodes) is a
/// linear operator, so a zero-padding producing it can be folded into them.
pub(crate) fn feeds_only_linear(g: &ModelGraph, edge: &str) -> bool {
    if g.outputs.iter().any(|o| o == edge) {
        return false;
    }
    let consumers = g.consumers(edge);
    !consumers.is_empty()
        && consumers.into_iter().all(|i| {
            let node = &g.nodes[i];
            match node.kind() {
                Some(OpKind::Conv | OpKind::Gemm | OpKind::MatMul | OpKind::AveragePool) => {
                    node.input(0) == Some(edge) || node.kind() == Some(OpKind::MatMul)
                }
                Some(k) if k.is_shape_only() => feeds_only_linear(g, &node.outputs[0]),
                _ => false,
            }
        })
}

/// Level cost of one node under leveled evaluation.
pub fn node_cost(g: &ModelGraph, idx: usize, relu_degree: ReluDegree) -> u32 {
    let node = &g.nodes[idx];
    match node.kind() {
        Some(OpKind::Conv | OpKind::Gemm | OpKind::MatMul | OpKind::AveragePool | OpKind::Mul) => 1,
        Some(OpKind::Relu) => poly_depth(relu_degree),
        Some(OpKind::Pad) => u32::from(!feeds_only_linear(g, &node.outputs[0])),
        Some(OpKind::Add | OpKind::Flatten | OpKind::Reshape) | None => 0,
    }
}

/// Longest level-weighted path from the data input to any output.
pub fn multiplicative_depth(g: &ModelGraph, relu_degree: ReluDegree) -> Result<DepthReport, GraphError> {
    let mut edge_depth: BTreeMap<&str, u32> = BTreeMap::new();
    if let Some(input) = g.data_input() {
        edge_depth.insert(input, 0);
    }
    let mut node_cost_map = BTreeMap::new();
    let mut node_depth = BTreeMap::new();
    for idx in topo_order(g)? {
        let node = &g.nodes[idx];
        let incoming = node.present_inputs().filter_map(|e| edge_depth.get(e).copied()).max();
        let Some(incoming) = incoming else {
            // Constant-only node: no ciphertext flows through it.
            continue;
        };
        let cost = node_cost(g, idx, relu_degree);
        node_cost_map.insert(node.name.clone(), cost);
        node_depth.insert(node.name.clone(), incoming + cost);
        for o in &node.outputs {
            edge_depth.insert(o, incoming + cost);
        }
    }
    let d_m = g.outputs.iter().filter_map(|o| edge_depth.get(o.as_str()).copied()).max().unwrap_or(0);
    Ok(DepthReport { d_m, node_cost: node_cost_map, node_depth, max_tensor_elements: g.max_data_elements() })
}

/// Pick the smallest ring dimension meeting both the slot and the depth
/// constraint. The chain is `edge + d_m * scale + edge` with
/// `scale = min(40, floor((cap - 2*edge) / d_m))`.
pub fn select_ckks(report: &DepthReport) -> Result<CkksParams, ParamsError> {
    let mut last_reason = String::new();
    for (log2_n, cap) in CKKS_MAX_Q_BITS {
        match ckks_candidate(log2_n, cap, report) {
            Ok(p) => return Ok(p),
            Err(reason) => last_reason = reason,
        }
    }
    Err(ParamsError::Infeasible(last_reason))
}

/// Parameters at one table row, or the violated constraint.
pub fn ckks_candidate(log2_n: u32, cap: u32, report: &DepthReport) -> Result<CkksParams, String> {
    let slots = 1usize << (log2_n - 1);
    if report.max_tensor_elements > slots {
        return Err(format!(
            "slot constraint: largest tensor has {} elements, log2 N = {log2_n} offers {slots} slots",
            report.max_tensor_elements
        ));
    }
    let budget = cap - 2 * CKKS_EDGE_BITS;
    let scale_bits = budget.checked_div(report.d_m).map_or(CKKS_MAX_SCALE_BITS, |b| b.min(CKKS_MAX_SCALE_BITS));
    if scale_bits < CKKS_MIN_SCALE_BITS {
        return Err(format!(
            "depth constraint: d_m = {} leaves {scale_bits} scale bits under max log2 q = {cap} (need {CKKS_MIN_SCALE_BITS})",
            report.d_m
        ));
    }
    let mut chain = vec![CKKS_EDGE_BITS];
    chain.extend(std::iter::repeat_n(scale_bits, report.d_m as usize));
    chain.push(CKKS_EDGE_BITS);
    Ok(CkksParams { log2_n, coeff_bit_chain: chain, scale_bits })
}

pub fn derive_ckks_params(
    cm: &CalibratedModel,
    relu_degree: ReluDegree,
    lambda_bits: u32,
) -> Result<KeyParams, ParamsError> {
    if lambda_bits != 128 {
        return Err(ParamsError::UnsupportedLambda { backend: BackendKind::Ckks, lambda: lambda_bits });
    }
    let report = multiplicative_depth(&cm.graph, relu_degree)?;
    let ckks = select_ckks(&report)?;
    let kp = KeyParams {
        format_version: KEYPARAMS_VERSION,
        backend: BackendKind::Ckks,
        lambda_bits,
        input_shape: input_shape(cm)?,
        ckks: Some(ckks),
        tfhe: None,
    };
    kp.validate()?;
    Ok(kp)
}

pub fn derive_tfhe_params(
    cm: &CalibratedModel,
    lambda_bits: u32,
    msg_bits: u32,
    input_method: DomainMethod,
) -> Result<KeyParams, ParamsError> {
    let row = tfhe_row(lambda_bits)?;
    let input =
        cm.graph.data_input().ok_or_else(|| ParamsError::Invalid("graph needs exactly one data input".into()))?;
    let input_interval = cm
        .edge_interval(input, input_method)
        .ok_or_else(|| ParamsError::Invalid(format!("no calibration statistics for input `{input}`")))?;
    let kp = KeyParams {
        format_version: KEYPARAMS_VERSION,
        backend: BackendKind::Tfhe,
        lambda_bits,
        input_shape: input_shape(cm)?,
        ckks: None,
        tfhe: Some(TfheParams {
            rlwe_n: row.rlwe_n,
            rlwe_sigma_log2: row.rlwe_sigma_log2,
            lwe_k: row.lwe_k,
            lwe_sigma_log2: row.lwe_sigma_log2,
            msg_bits,
            input_interval,
        }),
    };
    kp.validate()?;
    Ok(kp)
}

fn input_shape(cm: &CalibratedModel) -> Result<Vec<usize>, ParamsError> {
    cm.graph
        .data_input()
        .and_then(|e| cm.graph.edges.get(e))
        .map(|s| s.shape.clone())
        .ok_or_else(|| ParamsError::Invalid("graph input has no inferred shape".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(d_m: u32, elems: usize) -> DepthReport {
        DepthReport { d_m, node_cost: BTreeMap::new(), node_depth: BTreeMap::new(), max_tensor_elements: elems }
    }

    #[test]
    fn chain_rule_examples() {
        let p = select_ckks(&report(7, 1024)).unwrap();
        assert_eq!(p.log2_n, 13);
        assert_eq!(p.scale_bits, 22);
        assert!(p.total_q_bits() <= 218);
        assert_eq!(p.levels(), 7);

        let p = select_ckks(&report(15, 4704)).unwrap();
        assert_eq!((p.log2_n, p.scale_bits), (14, 25));

        let p = select_ckks(&report(2, 15680)).unwrap();
        assert_eq!((p.log2_n, p.scale_bits), (15, 40));
    }

    #[test]
    fn infeasible_names_the_constraint() {
        let err = select_ckks(&report(2, 20000)).unwrap_err();
        assert!(err.to_string().contains("slot constraint"), "{err}");
        let err = select_ckks(&report(60, 10)).unwrap_err();
        assert!(err.to_string().contains("depth constraint"), "{err}");
    }

    #[test]
    fn tfhe_rows() {
        assert_eq!(tfhe_row(128).unwrap().lwe_k, 938);
        assert_eq!(tfhe_row(80).unwrap().rlwe_n, 2048);
        assert!(matches!(tfhe_row(256), Err(ParamsError::UnsupportedLambda { lambda: 256, .. })));
    }

    #[test]
    fn keyparams_json_rejects_unknown_fields_and_versions() {
        let kp = KeyParams {
            format_version: KEYPARAMS_VERSION,
            backend: BackendKind::Ckks,
            lambda_bits: 128,
            input_shape: vec![1, 4],
            ckks: Some(select_ckks(&report(1, 4)).unwrap()),
            tfhe: None,
        };
        let json = kp.to_json();
        assert_eq!(KeyParams::from_json(json.as_bytes()).unwrap(), kp);

        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(KeyParams::from_json(v.to_string().as_bytes()).is_err());

        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["format_version"] = serde_json::json!(2);
        assert!(matches!(KeyParams::from_json(v.to_string().as_bytes()), Err(ParamsError::Invalid(_))));
    }
}
