//! Encrypted-tensor backends.
//!
//! Both backends are deterministic simulations of scheme *semantics*: CKKS-sim
//! models fixed-point rounding, slot capacity and the level budget of a
//! leveled scheme; TFHE-sim models per-value quantization to a small message
//! space and programmable lookup tables with deferred (folded) bootstraps.
//! Neither performs any cryptography. Ciphertext files are readable by anyone
//! who knows the format.

mod ckks;
pub mod format;
mod keys;
mod tfhe;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approx::eval_poly_reference;
use crate::calibration::Interval;
use crate::linalg::SparseMatrix;
use crate::params::BackendKind;
use crate::tensor::Tensor;

pub use ckks::CkksCiphertext;
pub use keys::{keygen, EvalKey, KeyId, SecretKey};
pub use tfhe::{Cell, TfheCiphertext};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("key mismatch: {0}")]
    Key(String),
    #[error("multiplicative depth exhausted: {0}")]
    Depth(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported by the {backend} backend: {what}")]
    Unsupported { backend: BackendKind, what: String },
}

pub type Result<T> = std::result::Result<T, BackendError>;

/// Per-run operation counters. Shared across threads.
#[derive(Debug, Default)]
pub struct Counters {
    pub flushes: AtomicU64,
    pub quantizations: AtomicU64,
    pub clamped: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub flushes: u64,
    pub quantizations: u64,
    pub clamped: u64,
}

impl Counters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            flushes: self.flushes.load(Ordering::Relaxed),
            quantizations: self.quantizations.load(Ordering::Relaxed),
            clamped: self.clamped.load(Ordering::Relaxed),
        }
    }

    pub(crate) fn bump(c: &AtomicU64, n: u64) {
        c.fetch_add(n, Ordering::Relaxed);
    }
}

/// Univariate function evaluable as a lookup table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "lowercase")]
pub enum UnivariateFn {
    Relu,
    Affine {
        a: f64,
        b: f64,
    },
    Poly {
        coeffs: Vec<f64>,
    },
    /// Samples on an evenly spaced grid over `domain`; evaluated by nearest
    /// grid point (clamped at the ends).
    Table {
        domain: Interval,
        samples: Vec<f64>,
    },
}

impl UnivariateFn {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            UnivariateFn::Relu => x.max(0.0),
            UnivariateFn::Affine { a, b } => a * x + b,
            UnivariateFn::Poly { coeffs } => eval_poly_reference(coeffs, x),
            UnivariateFn::Table { domain, samples } => {
                let last = samples.len() - 1;
                let pos = (x - domain.lo) / domain.width() * last as f64;
                samples[(pos.round().max(0.0) as usize).min(last)]
            }
        }
    }
}

/// An encrypted tensor of either backend.
#[derive(Debug, Clone, PartialEq)]
pub enum Ciphertext {
    Ckks(CkksCiphertext),
    Tfhe(TfheCiphertext),
}

impl Ciphertext {
    pub fn backend(&self) -> BackendKind {
        match self {
            Ciphertext::Ckks(_) => BackendKind::Ckks,
            Ciphertext::Tfhe(_) => BackendKind::Tfhe,
        }
    }

    pub fn key_id(&self) -> &KeyId {
        match self {
            Ciphertext::Ckks(c) => &c.key_id,
            Ciphertext::Tfhe(c) => &c.key_id,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Ciphertext::Ckks(c) => &c.shape,
            Ciphertext::Tfhe(c) => &c.shape,
        }
    }

    pub fn element_count(&self) -> usize {
        self.shape().iter().product()
    }

    /// Relabel the logical shape; element count must be preserved.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.element_count() {
            return Err(BackendError::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape())));
        }
        match &mut self {
            Ciphertext::Ckks(c) => c.shape = shape,
            Ciphertext::Tfhe(c) => c.shape = shape,
        }
        Ok(self)
    }

    /// Remaining CKKS levels; `None` for TFHE.
    pub fn level(&self) -> Option<u32> {
        match self {
            Ciphertext::Ckks(c) => Some(c.level),
            Ciphertext::Tfhe(_) => None,
        }
    }
}

pub fn encrypt(sk: &SecretKey, x: &Tensor) -> Result<Ciphertext> {
    encrypt_counted(sk, x, &Counters::default())
}

/// Encrypt, recording TFHE input clamping in `counters`.
pub fn encrypt_counted(sk: &SecretKey, x: &Tensor, counters: &Counters) -> Result<Ciphertext> {
    let p = &sk.params;
    if let Some(c) = p.ckks.as_ref().filter(|c| x.len() > c.slots()) {
        return Err(BackendError::Capacity(format!("input has {} elements but only {} slots", x.len(), c.slots())));
    }
    if x.shape() != p.input_shape.as_slice() {
        return Err(BackendError::Shape(format!(
            "input has shape {:?}, key parameters expect {:?}",
            x.shape(),
            p.input_shape
        )));
    }
    match p.backend {
        BackendKind::Ckks => {
            let c = p.ckks.as_ref().expect("validated ckks block");
            ckks::encrypt(c, &sk.key_id, x).map(Ciphertext::Ckks)
        }
        BackendKind::Tfhe => {
            let t = p.tfhe.as_ref().expect("validated tfhe block");
            Ok(Ciphertext::Tfhe(tfhe::encrypt(t, &sk.key_id, x, counters)))
        }
    }
}

pub fn decrypt(sk: &SecretKey, ct: &Ciphertext) -> Result<Tensor> {
    check_key(&sk.key_id, ct)?;
    match ct {
        Ciphertext::Ckks(c) => Ok(c.decode()),
        Ciphertext::Tfhe(c) => Ok(tfhe::flush(c, None, &Counters::default()).decode()),
    }
}

fn check_key(expected: &KeyId, ct: &Ciphertext) -> Result<()> {
    if ct.key_id() != expected {
        return Err(BackendError::Key(format!(
            "ciphertext was encrypted under key {}, operation uses key {}",
            ct.key_id().short(),
            expected.short()
        )));
    }
    Ok(())
}

/// Homomorphic operations under an evaluation key.
#[derive(Debug)]
pub struct Evaluator<'k> {
    key: &'k EvalKey,
    pub counters: Counters,
}

impl<'k> Evaluator<'k> {
    pub fn new(key: &'k EvalKey) -> Self {
        Self { key, counters: Counters::default() }
    }

    pub fn key(&self) -> &EvalKey {
        self.key
    }

    fn check(&self, ct: &Ciphertext) -> Result<()> {
        check_key(&self.key.key_id, ct)?;
        if ct.backend() != self.key.params.backend {
            return Err(BackendError::Key(format!(
                "{} ciphertext used with a {} evaluation key",
                ct.backend(),
                self.key.params.backend
            )));
        }
        Ok(())
    }

    fn unsupported(&self, what: &str) -> BackendError {
        BackendError::Unsupported { backend: self.key.params.backend, what: what.into() }
    }

    pub fn add_ct(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.check(a)?;
        self.check(b)?;
        same_shape(a.shape(), b.shape())?;
        match (a, b) {
            (Ciphertext::Ckks(a), Ciphertext::Ckks(b)) => ckks::add_ct(a, b).map(Ciphertext::Ckks),
            (Ciphertext::Tfhe(a), Ciphertext::Tfhe(b)) => Ok(Ciphertext::Tfhe(tfhe::add_ct(a, b, &self.counters))),
            _ => unreachable!("backend checked against key"),
        }
    }

    /// Elementwise addition of a plaintext with the ciphertext's shape.
    pub fn add_plain(&self, ct: &Ciphertext, p: &[f64]) -> Result<Ciphertext> {
        self.check(ct)?;
        plain_len(ct, p)?;
        match ct {
            Ciphertext::Ckks(c) => ckks::add_plain(c, p).map(Ciphertext::Ckks),
            Ciphertext::Tfhe(c) => Ok(Ciphertext::Tfhe(tfhe::affine_plain(c, p, false, &self.counters))),
        }
    }

    /// Elementwise product with a plaintext; one level under CKKS.
    pub fn mul_plain(&self, ct: &Ciphertext, p: &[f64]) -> Result<Ciphertext> {
        self.check(ct)?;
        plain_len(ct, p)?;
        match ct {
            Ciphertext::Ckks(c) => ckks::mul_plain(c, p).map(Ciphertext::Ckks),
            Ciphertext::Tfhe(c) => Ok(Ciphertext::Tfhe(tfhe::affine_plain(c, p, true, &self.counters))),
        }
    }

    pub fn mul_ct(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.check(a)?;
        self.check(b)?;
        same_shape(a.shape(), b.shape())?;
        match (a, b) {
            (Ciphertext::Ckks(a), Ciphertext::Ckks(b)) => ckks::mul_ct(a, b).map(Ciphertext::Ckks),
            _ => {
                Err(self
                    .unsupported("ciphertext-ciphertext multiplication; only plaintext-weight products are available"))
            }
        }
    }

    /// `y = W x + b` with output logical shape `out_shape`. `hint` is the
    /// calibrated interval of the output edge (TFHE quantization range).
    pub fn linear_map(
        &self,
        ct: &Ciphertext,
        w: &SparseMatrix,
        b: Option<&[f64]>,
        out_shape: Vec<usize>,
        hint: Option<Interval>,
    ) -> Result<Ciphertext> {
        self.check(ct)?;
        if w.cols() != ct.element_count() {
            return Err(BackendError::Shape(format!(
                "matrix has {} columns, ciphertext holds {} elements",
                w.cols(),
                ct.element_count()
            )));
        }
        if out_shape.iter().product::<usize>() != w.rows() || b.is_some_and(|b| b.len() != w.rows()) {
            return Err(BackendError::Shape(format!("matrix has {} rows, output shape {out_shape:?}", w.rows())));
        }
        match ct {
            Ciphertext::Ckks(c) => ckks::linear_map(c, w, b, out_shape).map(Ciphertext::Ckks),
            Ciphertext::Tfhe(c) => Ok(Ciphertext::Tfhe(tfhe::linear_map(c, w, b, out_shape, hint, &self.counters))),
        }
    }

    /// Defer `f` until the next flush (TFHE only). `hint` bounds the output
    /// range of the composed table.
    pub fn lut(&self, ct: &Ciphertext, f: UnivariateFn, hint: Option<Interval>) -> Result<Ciphertext> {
        self.check(ct)?;
        match ct {
            Ciphertext::Tfhe(c) => Ok(Ciphertext::Tfhe(tfhe::lut(c, f, hint))),
            Ciphertext::Ckks(_) => Err(self.unsupported("lookup tables")),
        }
    }

    pub fn flush(&self, ct: &Ciphertext) -> Result<Ciphertext> {
        self.check(ct)?;
        match ct {
            Ciphertext::Tfhe(c) => Ok(Ciphertext::Tfhe(tfhe::flush(c, None, &self.counters))),
            Ciphertext::Ckks(_) => Ok(ct.clone()),
        }
    }
}

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(BackendError::Shape(format!("operand shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn plain_len(ct: &Ciphertext, p: &[f64]) -> Result<()> {
    if p.len() != ct.element_count() {
        return Err(BackendError::Shape(format!(
            "plaintext has {} values, ciphertext {} elements",
            p.len(),
            ct.element_count()
        )));
    }
    Ok(())
}
