//! Cleartext reference execution and per-edge value statistics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::CalibrationSet;
use crate::graph::{topo_order, GraphError, ModelGraph};
use crate::ops::eval_node;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration set is empty")]
    Empty,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("sample {index} has shape {found:?}, graph input expects {expected:?}")]
    SampleShape { index: usize, found: Vec<usize>, expected: Vec<usize> },
}

/// Closed real interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    /// Panics unless `lo <= hi` and both are finite.
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo.is_finite() && hi.is_finite() && lo <= hi, "invalid interval [{lo}, {hi}]");
        Self { lo, hi }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo <= hi).then_some(Interval { lo, hi })
    }

    /// Widen a zero-width interval by `2^-20 * max(1, |c|)` on each side.
    pub fn widened_if_degenerate(self) -> Self {
        if self.lo < self.hi {
            return self;
        }
        let eps = DEGENERATE_EPS * self.lo.abs().max(1.0);
        Interval { lo: self.lo - eps, hi: self.hi + eps }
    }
}

/// Relative half-width used to widen zero-width intervals.
pub const DEGENERATE_EPS: f64 = 1.0 / (1u64 << 20) as f64;

/// Streaming min/max/mean/variance over every element seen on one edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Sum of squared deviations from the mean.
    pub m2: f64,
    pub count: u64,
}

impl Default for EdgeStats {
    fn default() -> Self {
        Self { min: f64::INFINITY, max: f64::NEG_INFINITY, mean: 0.0, m2: 0.0, count: 0 }
    }
}

impl EdgeStats {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    pub fn extend(&mut self, values: &[f64]) {
        for &v in values {
            self.push(v);
        }
    }

    /// Pairwise combination of two partial aggregates.
    pub fn merge(&self, other: &EdgeStats) -> EdgeStats {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n = (self.count + other.count) as f64;
        let (na, nb) = (self.count as f64, other.count as f64);
        let delta = other.mean - self.mean;
        EdgeStats {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
            mean: self.mean + delta * nb / n,
            m2: self.m2 + other.m2 + delta * delta * na * nb / n,
            count: self.count + other.count,
        }
    }

    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }
}

/// How an approximation or quantization domain is derived from edge stats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum DomainMethod {
    MinMax,
    MeanStd { k: f64 },
}

impl DomainMethod {
    pub const DEFAULT_K: f64 = 3.0;

    pub fn mean_std() -> Self {
        DomainMethod::MeanStd { k: Self::DEFAULT_K }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMeta {
    pub sample_count: usize,
    /// Hex SHA-256 of the calibration samples.
    pub dataset_digest: String,
}

/// Shape-inferred graph plus statistics for every edge.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedModel {
    pub graph: ModelGraph,
    pub stats: BTreeMap<String, EdgeStats>,
    pub meta: CalibrationMeta,
}

impl CalibratedModel {
    pub fn edge_interval(&self, edge: &str, method: DomainMethod) -> Option<Interval> {
        self.stats.get(edge).map(|s| edge_interval(s, method))
    }
}

/// Values of every edge (inputs, initializers and node outputs) for one pass.
pub type Trace = BTreeMap<String, Tensor>;

/// Exact real-arithmetic forward pass. Returns the (single) graph output and
/// the value of every edge.
pub fn cleartext_forward(g: &ModelGraph, x: &Tensor) -> Result<(Tensor, Trace), GraphError> {
    let input = g.data_input().ok_or_else(|| GraphError::Structure("graph needs exactly one data input".into()))?;
    let spec = g.edges.get(input).ok_or_else(|| GraphError::shape(input, "graph input has no shape"))?;
    if spec.shape.as_slice() != x.shape() {
        return Err(GraphError::shape(input, format!("input has shape {:?}, expected {:?}", x.shape(), spec.shape)));
    }
    let mut trace: Trace = g.initializers.clone();
    trace.insert(input.to_string(), x.clone());
    for idx in topo_order(g)? {
        let node = &g.nodes[idx];
        let args: Vec<Option<&Tensor>> =
            node.inputs.iter().map(|e| if e.is_empty() { None } else { trace.get(e) }).collect();
        let out = eval_node(g, node, &args)?;
        trace.insert(node.outputs[0].clone(), out);
    }
    let output = g
        .outputs
        .first()
        .and_then(|o| trace.get(o))
        .cloned()
        .ok_or_else(|| GraphError::Structure("graph output was not computed".into()))?;
    Ok((output, trace))
}

fn check_samples(g: &ModelGraph, data: &CalibrationSet) -> Result<(), CalibrationError> {
    if data.samples.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let input = g.data_input().unwrap_or_default();
    let expected = g.edges.get(input).map(|s| s.shape.clone()).unwrap_or_default();
    for (index, s) in data.samples.iter().enumerate() {
        if s.shape() != expected.as_slice() {
            return Err(CalibrationError::SampleShape { index, found: s.shape().to_vec(), expected });
        }
    }
    Ok(())
}

fn trace_stats(trace: &Trace) -> BTreeMap<String, EdgeStats> {
    trace
        .iter()
        .map(|(e, t)| {
            let mut s = EdgeStats::default();
            s.extend(t.data());
            (e.clone(), s)
        })
        .collect()
}

fn merge_maps(mut a: BTreeMap<String, EdgeStats>, b: &BTreeMap<String, EdgeStats>) -> BTreeMap<String, EdgeStats> {
    for (e, s) in b {
        let merged = a.get(e).map_or(*s, |x| x.merge(s));
        a.insert(e.clone(), merged);
    }
    a
}

/// Sequential calibration: every element of every edge over every sample is
/// streamed into that edge's statistics in sample order.
pub fn calibrate(g: &ModelGraph, data: &CalibrationSet) -> Result<CalibratedModel, CalibrationError> {
    check_samples(g, data)?;
    let mut stats: BTreeMap<String, EdgeStats> = BTreeMap::new();
    for sample in &data.samples {
        let (_, trace) = cleartext_forward(g, sample)?;
        for (e, t) in &trace {
            stats.entry(e.clone()).or_default().extend(t.data());
        }
    }
    Ok(CalibratedModel { graph: g.clone(), stats, meta: data.meta() })
}

/// Parallel calibration. Equal to [`calibrate`] up to floating-point
/// rounding of the merged mean and `m2`; min, max and count are exact.
pub fn calibrate_parallel(g: &ModelGraph, data: &CalibrationSet) -> Result<CalibratedModel, CalibrationError> {
    check_samples(g, data)?;
    let partials = data
        .samples
        .par_iter()
        .map(|s| cleartext_forward(g, s).map(|(_, t)| trace_stats(&t)))
        .collect::<Result<Vec<_>, _>>()?;
    let stats = partials.iter().fold(BTreeMap::new(), merge_maps);
    Ok(CalibratedModel { graph: g.clone(), stats, meta: data.meta() })
}

/// Domain of an edge under `method`; zero-width results are widened.
pub fn edge_interval(stats: &EdgeStats, method: DomainMethod) -> Interval {
    let (lo, hi) = match method {
        DomainMethod::MinMax => (stats.min, stats.max),
        DomainMethod::MeanStd { k } => {
            let half = k * stats.std_dev();
            (stats.mean - half, stats.mean + half)
        }
    };
    Interval::new(lo, hi).widened_if_degenerate()
}
