//! Leveled fixed-point simulation.
//!
//! A slot holds `round(v * 2^scale_bits)` as an `i64`. Every multiplication
//! is done exactly in `i128` and rescaled back to the grid by a rounding
//! shift, which is where approximation error enters. Each rescale consumes a
//! level; a ciphertext at level 0 cannot be multiplied again.

use rayon::prelude::*;

use super::{BackendError, KeyId, Result};
use crate::linalg::SparseMatrix;
use crate::params::CkksParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CkksCiphertext {
    pub key_id: KeyId,
    pub shape: Vec<usize>,
    pub scale_bits: u32,
    pub level: u32,
    /// Full slot vector; entries past the logical element count are zero.
    pub slots: Vec<i64>,
}

impl CkksCiphertext {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn decode(&self) -> Tensor {
        let step = (-(self.scale_bits as f64)).exp2();
        let data = self.slots[..self.element_count()].iter().map(|&v| v as f64 * step).collect();
        Tensor::new(self.shape.clone(), data)
    }

    fn with_values(&self, values: Vec<i64>, shape: Vec<usize>, level: u32) -> Self {
        let mut slots = values;
        slots.resize(self.slots.len(), 0);
        CkksCiphertext { key_id: self.key_id, shape, scale_bits: self.scale_bits, level, slots }
    }

    fn values(&self) -> &[i64] {
        &self.slots[..self.element_count()]
    }

    fn next_level(&self, op: &str) -> Result<u32> {
        self.level
            .checked_sub(1)
            .ok_or_else(|| BackendError::Depth(format!("{op} needs one level, ciphertext has none left")))
    }
}

pub(super) fn encode(v: f64, scale_bits: u32) -> Result<i64> {
    let r = (v * (scale_bits as f64).exp2()).round();
    // 2^63 is exactly representable; anything at or above it overflows.
    if r.is_nan() || r.abs() >= 9_223_372_036_854_775_808.0 {
        return Err(overflow(v, scale_bits));
    }
    Ok(r as i64)
}

fn rescale(p: i128, scale_bits: u32) -> Result<i64> {
    let r = (p + (1i128 << (scale_bits - 1))) >> scale_bits;
    i64::try_from(r)
        .map_err(|_| BackendError::Capacity(format!("product exceeds the 64-bit slot range at scale 2^{scale_bits}")))
}

fn overflow(v: f64, scale_bits: u32) -> BackendError {
    BackendError::Capacity(format!("value {v} does not fit a 64-bit slot at scale 2^{scale_bits}"))
}

fn checked_add(a: i64, b: i64) -> Result<i64> {
    a.checked_add(b).ok_or_else(|| BackendError::Capacity("sum exceeds the 64-bit slot range".into()))
}

pub(super) fn encrypt(p: &CkksParams, key_id: &KeyId, x: &Tensor) -> Result<CkksCiphertext> {
    let slots = p.slots();
    if x.len() > slots {
        return Err(BackendError::Capacity(format!(
            "tensor has {} elements, log2 N = {} offers {slots} slots",
            x.len(),
            p.log2_n
        )));
    }
    let mut values = x.data().iter().map(|&v| encode(v, p.scale_bits)).collect::<Result<Vec<_>>>()?;
    values.resize(slots, 0);
    Ok(CkksCiphertext {
        key_id: *key_id,
        shape: x.shape().to_vec(),
        scale_bits: p.scale_bits,
        level: p.levels(),
        slots: values,
    })
}

pub(super) fn add_ct(a: &CkksCiphertext, b: &CkksCiphertext) -> Result<CkksCiphertext> {
    scales_match(a, b)?;
    let values = a.values().iter().zip(b.values()).map(|(&x, &y)| checked_add(x, y)).collect::<Result<_>>()?;
    Ok(a.with_values(values, a.shape.clone(), a.level.min(b.level)))
}

pub(super) fn add_plain(a: &CkksCiphertext, p: &[f64]) -> Result<CkksCiphertext> {
    let values =
        a.values().iter().zip(p).map(|(&x, &y)| checked_add(x, encode(y, a.scale_bits)?)).collect::<Result<_>>()?;
    Ok(a.with_values(values, a.shape.clone(), a.level))
}

pub(super) fn mul_plain(a: &CkksCiphertext, p: &[f64]) -> Result<CkksCiphertext> {
    let level = a.next_level("plaintext multiplication")?;
    let values = a
        .values()
        .iter()
        .zip(p)
        .map(|(&x, &y)| rescale(x as i128 * encode(y, a.scale_bits)? as i128, a.scale_bits))
        .collect::<Result<_>>()?;
    Ok(a.with_values(values, a.shape.clone(), level))
}

pub(super) fn mul_ct(a: &CkksCiphertext, b: &CkksCiphertext) -> Result<CkksCiphertext> {
    scales_match(a, b)?;
    let level = a.level.min(b.level).checked_sub(1).ok_or_else(|| {
        BackendError::Depth(format!(
            "ciphertext multiplication at levels {} and {} needs one level on both",
            a.level, b.level
        ))
    })?;
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| rescale(x as i128 * y as i128, a.scale_bits))
        .collect::<Result<_>>()?;
    Ok(a.with_values(values, a.shape.clone(), level))
}

pub(super) fn linear_map(
    a: &CkksCiphertext,
    w: &SparseMatrix,
    b: Option<&[f64]>,
    out_shape: Vec<usize>,
) -> Result<CkksCiphertext> {
    let level = a.next_level("linear map")?;
    if w.rows() > a.slots.len() {
        return Err(BackendError::Capacity(format!(
            "linear map produces {} elements, ciphertext has {} slots",
            w.rows(),
            a.slots.len()
        )));
    }
    let s = a.scale_bits;
    let x = a.values();
    let values = (0..w.rows())
        .into_par_iter()
        .map(|r| {
            let mut acc: i128 = 0;
            for (c, v) in w.row(r) {
                acc += x[c] as i128 * encode(v, s)? as i128;
            }
            let y = rescale(acc, s)?;
            match b {
                Some(b) => checked_add(y, encode(b[r], s)?),
                None => Ok(y),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(a.with_values(values, out_shape, level))
}

fn scales_match(a: &CkksCiphertext, b: &CkksCiphertext) -> Result<()> {
    if a.scale_bits != b.scale_bits {
        return Err(BackendError::Shape(format!("scales 2^{} and 2^{} differ", a.scale_bits, b.scale_bits)));
    }
    Ok(())
}
