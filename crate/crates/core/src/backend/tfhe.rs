//! Per-value quantized simulation with deferred lookup tables.
//!
//! Every element is a `msg_bits`-bit code over its own interval. Univariate
//! functions are pushed on a per-tensor stack and only applied when a
//! non-univariate operation (or decryption) needs the value; all stacked
//! functions then become one sampled table and one requantization, which is
//! the simulated counterpart of a single programmable bootstrap.

use std::collections::HashMap;

use super::{Counters, KeyId, UnivariateFn};
use crate::calibration::Interval;
use crate::linalg::SparseMatrix;
use crate::params::TfheParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub q: u32,
    pub interval: Interval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfheCiphertext {
    pub key_id: KeyId,
    pub shape: Vec<usize>,
    pub msg_bits: u32,
    pub cells: Vec<Cell>,
    pub pending: Vec<UnivariateFn>,
    /// Calibrated range for the result of the pending stack, if known.
    pub pending_hint: Option<Interval>,
}

impl TfheCiphertext {
    pub fn max_code(&self) -> u32 {
        max_code(self.msg_bits)
    }

    pub fn dequantize(&self, cell: &Cell) -> f64 {
        dequantize(cell, self.msg_bits)
    }

    /// Dequantized cell values, ignoring any pending functions.
    pub fn decode(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.cells.iter().map(|c| self.dequantize(c)).collect())
    }
}

fn max_code(msg_bits: u32) -> u32 {
    (1u32 << msg_bits) - 1
}

fn dequantize(cell: &Cell, msg_bits: u32) -> f64 {
    cell.interval.lo + cell.q as f64 * cell.interval.width() / max_code(msg_bits) as f64
}

/// Nearest code for `v` on `interval`; the flag reports clamping beyond the
/// quantization error.
pub(super) fn quantize(v: f64, interval: Interval, msg_bits: u32) -> (u32, bool) {
    let m = max_code(msg_bits);
    let pos = (v - interval.lo) / interval.width() * m as f64;
    // Within half a step of the ends the code is as accurate as any other.
    let slack = 0.5 * interval.width() / m as f64;
    let clamped = !(v >= interval.lo - slack && v <= interval.hi + slack);
    let q = if pos.is_nan() { 0 } else { pos.round().clamp(0.0, m as f64) as u32 };
    (q, clamped)
}

fn requantize(
    values: &[f64],
    intervals: impl Iterator<Item = Interval>,
    msg_bits: u32,
    counters: &Counters,
) -> Vec<Cell> {
    let mut clamped = 0;
    let cells = values
        .iter()
        .zip(intervals)
        .map(|(&v, interval)| {
            let (q, c) = quantize(v, interval, msg_bits);
            clamped += u64::from(c);
            Cell { q, interval }
        })
        .collect();
    Counters::bump(&counters.quantizations, 1);
    Counters::bump(&counters.clamped, clamped);
    cells
}

fn ct_with(c: &TfheCiphertext, cells: Vec<Cell>, shape: Vec<usize>) -> TfheCiphertext {
    TfheCiphertext { key_id: c.key_id, shape, msg_bits: c.msg_bits, cells, pending: Vec::new(), pending_hint: None }
}

pub(super) fn encrypt(p: &TfheParams, key_id: &KeyId, x: &Tensor, counters: &Counters) -> TfheCiphertext {
    let interval = p.input_interval.widened_if_degenerate();
    let mut clamped = 0;
    let cells = x
        .data()
        .iter()
        .map(|&v| {
            let (q, c) = quantize(v, interval, p.msg_bits);
            clamped += u64::from(c);
            Cell { q, interval }
        })
        .collect();
    Counters::bump(&counters.clamped, clamped);
    TfheCiphertext {
        key_id: *key_id,
        shape: x.shape().to_vec(),
        msg_bits: p.msg_bits,
        cells,
        pending: Vec::new(),
        pending_hint: None,
    }
}

pub(super) fn lut(c: &TfheCiphertext, f: UnivariateFn, hint: Option<Interval>) -> TfheCiphertext {
    let mut out = c.clone();
    out.pending.push(f);
    out.pending_hint = hint;
    out
}

/// Apply the composed pending stack as one table per distinct cell interval.
/// `hint` overrides the stored calibrated range.
pub(super) fn flush(c: &TfheCiphertext, hint: Option<Interval>, counters: &Counters) -> TfheCiphertext {
    if c.pending.is_empty() {
        return c.clone();
    }
    let hint = hint.or(c.pending_hint);
    let compose = |x: f64| c.pending.iter().fold(x, |acc, f| f.eval(acc));
    let levels = c.max_code() as usize + 1;

    let mut tables: HashMap<(u64, u64), (Vec<f64>, Interval)> = HashMap::new();
    let mut clamped = 0;
    let mut cells = Vec::with_capacity(c.cells.len());
    for cell in &c.cells {
        let key = (cell.interval.lo.to_bits(), cell.interval.hi.to_bits());
        let (samples, out) = tables.entry(key).or_insert_with(|| {
            let samples: Vec<f64> = (0..levels)
                .map(|q| compose(dequantize(&Cell { q: q as u32, interval: cell.interval }, c.msg_bits)))
                .collect();
            let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = Interval { lo, hi };
            let out = hint.and_then(|h| range.intersect(&h)).unwrap_or(range).widened_if_degenerate();
            (samples, out)
        });
        let (q, cl) = quantize(samples[cell.q as usize], *out, c.msg_bits);
        clamped += u64::from(cl);
        cells.push(Cell { q, interval: *out });
    }
    Counters::bump(&counters.flushes, 1);
    Counters::bump(&counters.quantizations, 1);
    Counters::bump(&counters.clamped, clamped);
    ct_with(c, cells, c.shape.clone())
}

/// `x + p` or `x * p` elementwise, with exact interval arithmetic.
pub(super) fn affine_plain(c: &TfheCiphertext, p: &[f64], mul: bool, counters: &Counters) -> TfheCiphertext {
    let c = flush(c, None, counters);
    let (values, intervals): (Vec<f64>, Vec<Interval>) = c
        .cells
        .iter()
        .zip(p)
        .map(|(cell, &p)| {
            let v = c.dequantize(cell);
            let Interval { lo, hi } = cell.interval;
            if mul {
                (v * p, Interval { lo: (lo * p).min(hi * p), hi: (lo * p).max(hi * p) }.widened_if_degenerate())
            } else {
                (v + p, Interval { lo: lo + p, hi: hi + p })
            }
        })
        .unzip();
    let cells = requantize(&values, intervals.into_iter(), c.msg_bits, counters);
    ct_with(&c, cells, c.shape.clone())
}

pub(super) fn add_ct(a: &TfheCiphertext, b: &TfheCiphertext, counters: &Counters) -> TfheCiphertext {
    let a = flush(a, None, counters);
    let b = flush(b, None, counters);
    let values: Vec<f64> = a.cells.iter().zip(&b.cells).map(|(x, y)| a.dequantize(x) + b.dequantize(y)).collect();
    let intervals = a
        .cells
        .iter()
        .zip(&b.cells)
        .map(|(x, y)| Interval { lo: x.interval.lo + y.interval.lo, hi: x.interval.hi + y.interval.hi });
    let cells = requantize(&values, intervals, a.msg_bits, counters);
    ct_with(&a, cells, a.shape.clone())
}

pub(super) fn linear_map(
    c: &TfheCiphertext,
    w: &SparseMatrix,
    b: Option<&[f64]>,
    out_shape: Vec<usize>,
    hint: Option<Interval>,
    counters: &Counters,
) -> TfheCiphertext {
    let c = flush(c, None, counters);
    let x: Vec<f64> = c.cells.iter().map(|cell| c.dequantize(cell)).collect();
    let bias = |r: usize| b.map_or(0.0, |b| b[r]);
    let values: Vec<f64> = (0..w.rows()).map(|r| w.row(r).map(|(j, v)| v * x[j]).sum::<f64>() + bias(r)).collect();
    let cells = match hint {
        Some(h) => requantize(&values, std::iter::repeat(h.widened_if_degenerate()), c.msg_bits, counters),
        None => {
            let intervals = (0..w.rows()).map(|r| {
                let (mut lo, mut hi) = (bias(r), bias(r));
                for (j, v) in w.row(r) {
                    let Interval { lo: a, hi: z } = c.cells[j].interval;
                    lo += (v * a).min(v * z);
                    hi += (v * a).max(v * z);
                }
                Interval { lo, hi }.widened_if_degenerate()
            });
            requantize(&values, intervals, c.msg_bits, counters)
        }
    };
    ct_with(&c, cells, out_shape)
}
