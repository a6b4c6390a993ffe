#![allow(clippy::needless_range_loop)]

use heinfer_core::approx::{eval_poly_reference, fit_relu_polynomial, poly_depth, ApproxError, Polynomial, ReluDegree};
use heinfer_core::calibration::Interval;
use proptest::prelude::*;

const DEGREES: [ReluDegree; 3] = [ReluDegree::One, ReluDegree::Three, ReluDegree::Seven];

/// Continuous least-squares fit of `max(x, 0)` on `[lo, hi]` from exact
/// moment integrals, solved in `t = x / s` and mapped back to `x`.
fn continuous_fit(lo: f64, hi: f64, degree: usize) -> Vec<f64> {
    let s = lo.abs().max(hi.abs());
    let (a, b) = (lo / s, hi / s);
    let n = degree + 1;
    let moment = |k: usize, from: f64, to: f64| (to.powi(k as i32 + 1) - from.powi(k as i32 + 1)) / (k + 1) as f64;
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| moment(i + j, a, b)).collect();
            // relu(s t) = s relu(t); fit relu(t) and rescale afterwards.
            row.push(if b > 0.0 { moment(i + 1, a.max(0.0), b) } else { 0.0 });
            row
        })
        .collect();
    // Gaussian elimination with partial pivoting.
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).unwrap();
        m.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..=n {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    (0..n).map(|k| m[k][n] / m[k][k] * s / s.powi(k as i32)).collect()
}

fn fit(lo: f64, hi: f64, degree: ReluDegree) -> Polynomial {
    fit_relu_polynomial(Interval::new(lo, hi), degree).unwrap()
}

/// Coefficients compared in the unit variable, relative to the largest.
fn scaled_gap(p: &[f64], q: &[f64], s: f64) -> f64 {
    let ps: Vec<f64> = p.iter().enumerate().map(|(k, c)| c * s.powi(k as i32)).collect();
    let qs: Vec<f64> = q.iter().enumerate().map(|(k, c)| c * s.powi(k as i32)).collect();
    let norm = qs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gap = ps.iter().zip(&qs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if norm == 0.0 {
        gap
    } else {
        gap / norm
    }
}

#[test]
fn degree_one_on_symmetric_ten() {
    let p = fit(-10.0, 10.0, ReluDegree::One);
    let expected = [2.5, 0.5];
    assert_eq!(p.coeffs.len(), 2);
    for (c, e) in p.coeffs.iter().zip(expected) {
        assert!((c - e).abs() <= 1e-6, "{:?}", p.coeffs);
    }
    let oracle = continuous_fit(-10.0, 10.0, 1);
    for (c, e) in p.coeffs.iter().zip(&oracle) {
        assert!((c - e).abs() <= 1e-6);
    }
}

#[test]
fn degree_three_on_symmetric_ten() {
    let p = fit(-10.0, 10.0, ReluDegree::Three);
    let expected = [0.9375, 0.5, 0.046875, 0.0];
    for (c, e) in p.coeffs.iter().zip(expected) {
        assert!((c - e).abs() <= 1e-6, "{:?}", p.coeffs);
    }
    let oracle = continuous_fit(-10.0, 10.0, 3);
    for (c, e) in oracle.iter().zip(expected) {
        assert!((c - e).abs() <= 1e-9, "oracle {oracle:?}");
    }
}

#[test]
fn symmetric_closed_forms_for_other_widths() {
    for a in [0.5, 3.0, 37.0] {
        let p1 = fit(-a, a, ReluDegree::One);
        assert!((p1.coeffs[0] - a / 4.0).abs() <= 1e-6 * a.max(1.0));
        let p3 = fit(-a, a, ReluDegree::Three);
        let closed = [3.0 * a / 32.0, 0.5, 15.0 / (32.0 * a), 0.0];
        assert!(scaled_gap(&p3.coeffs, &closed, a) <= 1e-6, "a={a}: {:?}", p3.coeffs);
    }
}

#[test]
fn nonnegative_domain_gives_identity() {
    let p = fit(0.0, 5.0, ReluDegree::One);
    assert!((p.coeffs[0]).abs() <= 1e-9 && (p.coeffs[1] - 1.0).abs() <= 1e-9, "{:?}", p.coeffs);
    let residual: f64 = (0..=100).map(|i| i as f64 * 0.05).map(|x| (p.eval(x) - x).abs()).fold(0.0, f64::max);
    assert!(residual <= 1e-9);
}

#[test]
fn nonpositive_domain_gives_zero() {
    let p = fit(-5.0, -1.0, ReluDegree::Three);
    assert!(p.coeffs.iter().all(|c| c.abs() <= 1e-9), "{:?}", p.coeffs);
}

#[test]
fn depth_of_each_degree() {
    assert_eq!(DEGREES.map(poly_depth), [1, 2, 3]);
}

#[test]
fn degree_must_be_supported() {
    assert_eq!(ReluDegree::try_from(5), Err(ApproxError::Degree(5)));
    assert_eq!(ReluDegree::try_from(7), Ok(ReluDegree::Seven));
}

#[test]
fn evaluation_examples() {
    let p = Polynomial { coeffs: vec![2.5, 0.5], domain: Interval::new(-10.0, 10.0) };
    assert_eq!(p.eval(10.0), 7.5);
    let q = Polynomial { coeffs: vec![-1.25, 3.0, 7.0], domain: Interval::new(-1.0, 1.0) };
    assert_eq!(q.eval(0.0), -1.25);
    let zero = Polynomial { coeffs: vec![0.0; 4], domain: Interval::new(-1.0, 1.0) };
    assert_eq!(zero.eval(123.0), 0.0);
    assert_eq!(eval_poly_reference(&q.coeffs, 2.0), -1.25 + 6.0 + 28.0);
}

#[test]
fn residual_decreases_with_degree() {
    for (lo, hi) in [(-10.0, 10.0), (-3.0, 7.0), (-0.2, 0.05)] {
        let residual = |d: ReluDegree| {
            let p = fit(lo, hi, d);
            (0..=10_000)
                .map(|i| lo + (hi - lo) * i as f64 / 10_000.0)
                .map(|x| (p.eval(x) - x.max(0.0)).powi(2))
                .sum::<f64>()
        };
        let r = DEGREES.map(residual);
        assert!(r[0] >= r[1] && r[1] >= r[2], "[{lo}, {hi}]: {r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_continuous_oracle(lo in -50.0f64..-0.01, width in 0.02f64..100.0, d in 0usize..3) {
        let hi = lo + width;
        let degree = DEGREES[d];
        let p = fit(lo, hi, degree);
        let oracle = continuous_fit(lo, hi, degree.degree() as usize);
        let s = lo.abs().max(hi.abs());
        prop_assert!(scaled_gap(&p.coeffs, &oracle, s) <= 1e-5, "{:?} vs {:?}", p.coeffs, oracle);
    }

    #[test]
    fn odd_part_is_half_x_on_symmetric_domains(a in 0.01f64..100.0, seven in any::<bool>()) {
        let degree = if seven { ReluDegree::Seven } else { ReluDegree::Three };
        let p = fit(-a, a, degree);
        // In the unit variable the odd part of relu is t/2.
        for (k, c) in p.coeffs.iter().enumerate().filter(|(k, _)| k % 2 == 1) {
            let unit = c * a.powi(k as i32) / a;
            let expected = if k == 1 { 0.5 } else { 0.0 };
            prop_assert!((unit - expected).abs() <= 1e-6, "k={k}: {unit}");
        }
    }

    #[test]
    fn fit_is_scale_covariant(a in 0.1f64..20.0, s in 0.1f64..10.0, d in 0usize..3) {
        let degree = DEGREES[d];
        let base = fit(-a, a, degree);
        let scaled = fit(-s * a, s * a, degree);
        // relu(x) = s relu(x / s), so c'_k = s^(1-k) c_k.
        let mapped: Vec<f64> = base.coeffs.iter().enumerate().map(|(k, c)| c * s.powi(1 - k as i32)).collect();
        prop_assert!(scaled_gap(&scaled.coeffs, &mapped, s * a) <= 1e-6);
    }
}
