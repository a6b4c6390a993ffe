//! Least-squares polynomial surrogates for ReLU.
//!
//! The fit is the continuous L2 projection of `max(x, 0)` onto polynomials
//! on the interval. Normal equations are formed in a Legendre basis on
//! `[-1, 1]` (nearly diagonal Gram matrix) by composite Simpson quadrature
//! with [`GRID_POINTS`] nodes. The right-hand side is integrated only over
//! the part where ReLU is positive, so every panel sees a smooth integrand.
//! The result is returned as monomial coefficients in `x`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::Interval;

pub const GRID_POINTS: usize = 4097;

#[derive(Debug, Error, PartialEq)]
pub enum ApproxError {
    #[error("ReLU approximation degree must be 1, 3 or 7, got {0}")]
    Degree(u32),
    #[error("approximation domain [{lo}, {hi}] is empty")]
    Domain { lo: f64, hi: f64 },
    #[error("normal equations are singular")]
    Singular,
}

/// Supported surrogate degrees with their power-tree depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum ReluDegree {
    One,
    Three,
    Seven,
}

impl ReluDegree {
    pub fn degree(self) -> u32 {
        match self {
            ReluDegree::One => 1,
            ReluDegree::Three => 3,
            ReluDegree::Seven => 7,
        }
    }
}

impl TryFrom<u32> for ReluDegree {
    type Error = ApproxError;

    fn try_from(d: u32) -> Result<Self, ApproxError> {
        match d {
            1 => Ok(ReluDegree::One),
            3 => Ok(ReluDegree::Three),
            7 => Ok(ReluDegree::Seven),
            other => Err(ApproxError::Degree(other)),
        }
    }
}

impl From<ReluDegree> for u32 {
    fn from(d: ReluDegree) -> u32 {
        d.degree()
    }
}

impl fmt::Display for ReluDegree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.degree())
    }
}

/// Multiplicative depth of evaluating a polynomial of this degree with a
/// power tree: `ceil(log2(degree + 1))`.
pub fn poly_depth(degree: ReluDegree) -> u32 {
    power_tree_depth(degree.degree())
}

pub(crate) fn power_tree_depth(degree: u32) -> u32 {
    u32::BITS - degree.leading_zeros()
}

/// Univariate polynomial, ascending coefficients, fitted on `domain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub coeffs: Vec<f64>,
    pub domain: Interval,
}

impl Polynomial {
    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn eval(&self, x: f64) -> f64 {
        eval_poly_reference(&self.coeffs, x)
    }
}

/// Horner evaluation.
pub fn eval_poly_reference(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

pub fn fit_relu_polynomial(domain: Interval, degree: ReluDegree) -> Result<Polynomial, ApproxError> {
    if domain.lo.is_nan() || domain.hi.is_nan() || domain.lo >= domain.hi {
        return Err(ApproxError::Domain { lo: domain.lo, hi: domain.hi });
    }
    let d = degree.degree() as usize;
    let mid = 0.5 * (domain.lo + domain.hi);
    let half = 0.5 * (domain.hi - domain.lo);

    let mut gram = DMatrix::<f64>::zeros(d + 1, d + 1);
    let mut rhs = DVector::<f64>::zeros(d + 1);
    let mut basis = vec![0.0; d + 1];
    for (t, w) in simpson_nodes(-1.0, 1.0) {
        legendre_values(t, &mut basis);
        for r in 0..=d {
            for c in 0..=r {
                gram[(r, c)] += w * basis[r] * basis[c];
            }
        }
    }
    // ReLU is zero left of the kink at t = -mid / half.
    let kink = (-mid / half).clamp(-1.0, 1.0);
    if kink < 1.0 {
        for (t, w) in simpson_nodes(kink, 1.0) {
            let y = (mid + half * t).max(0.0);
            legendre_values(t, &mut basis);
            for r in 0..=d {
                rhs[r] += w * basis[r] * y;
            }
        }
    }
    for r in 0..=d {
        for c in r + 1..=d {
            gram[(r, c)] = gram[(c, r)];
        }
    }
    let legendre_coeffs = gram.cholesky().ok_or(ApproxError::Singular)?.solve(&rhs);

    // Legendre -> monomials in t -> monomials in x = mid + half * t.
    let in_t = legendre_to_monomial(legendre_coeffs.as_slice());
    let coeffs = substitute_affine(&in_t, -mid / half, 1.0 / half);
    Ok(Polynomial { coeffs, domain })
}

/// Composite Simpson nodes and weights on `[a, b]`.
fn simpson_nodes(a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> {
    let n = GRID_POINTS - 1;
    let h = (b - a) / n as f64;
    (0..=n).map(move |i| {
        let m = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        (a + h * i as f64, m * h / 3.0)
    })
}

fn legendre_values(t: f64, out: &mut [f64]) {
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = t;
    }
    for n in 1..out.len().saturating_sub(1) {
        let nf = n as f64;
        out[n + 1] = ((2.0 * nf + 1.0) * t * out[n] - nf * out[n - 1]) / (nf + 1.0);
    }
}

fn legendre_to_monomial(c: &[f64]) -> Vec<f64> {
    let d = c.len();
    // polys[n] = monomial coefficients of P_n.
    let mut polys: Vec<Vec<f64>> = vec![vec![0.0; d]; d];
    polys[0][0] = 1.0;
    if d > 1 {
        polys[1][1] = 1.0;
    }
    for n in 1..d.saturating_sub(1) {
        let nf = n as f64;
        for k in 0..d {
            let shifted = if k > 0 { polys[n][k - 1] } else { 0.0 };
            polys[n + 1][k] = ((2.0 * nf + 1.0) * shifted - nf * polys[n - 1][k]) / (nf + 1.0);
        }
    }
    (0..d).map(|k| (0..d).map(|n| c[n] * polys[n][k]).sum()).collect()
}

/// Coefficients of `p(offset + scale * x)` given coefficients of `p(t)`.
fn substitute_affine(p: &[f64], offset: f64, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    // (offset + scale x)^k expanded incrementally.
    let mut power = vec![0.0; p.len()];
    power[0] = 1.0;
    for (k, &ck) in p.iter().enumerate() {
        if k > 0 {
            for j in (0..=k).rev() {
                let from_lower = if j > 0 { power[j - 1] * scale } else { 0.0 };
                power[j] = power[j] * offset + from_lower;
            }
        }
        for j in 0..=k {
            out[j] += ck * power[j];
        }
    }
    out
}
