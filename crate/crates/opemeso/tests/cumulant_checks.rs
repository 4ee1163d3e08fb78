//! Exact-arithmetic oracles for the cumulant trace formula. Everything here
//! runs in rationals (or in hand-derived closed forms), so agreement with the
//! floating routes pins the combinatorial coefficients, not just rounding.

use ndarray::{arr2, Array2, ArrayView2};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};

use opemeso::cumulants::{fredholm_cumulants, trace_cumulants_batch};

type Q = BigRational;

fn q(n: i64, d: i64) -> Q {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

fn factorial(n: usize) -> i64 {
    (1..=n as i64).product::<i64>().max(1)
}

/// The alternating sum over compositions that makes every coefficient of
/// order >= 2 cancel for commuting kernels:
/// sum_j (-1)^{j+1}/j sum_{l_1+..+l_j = m} prod 1/l_i! = [m = 1].
///
/// Two independent enumerations of the compositions (cut bitmasks and a
/// recursive generator) must also produce identical per-j aggregates.
#[test]
fn alternating_composition_identity() {
    for m in 1..=10usize {
        let mut by_j_mask = vec![Q::zero(); m + 1];
        for mask in 0u32..(1 << (m - 1)) {
            let mut parts = Vec::new();
            let mut last = 0usize;
            for b in 0..m - 1 {
                if mask >> b & 1 == 1 {
                    parts.push(b + 1 - last);
                    last = b + 1;
                }
            }
            parts.push(m - last);
            let mut w = q(1, 1);
            for &l in &parts {
                w *= q(1, factorial(l));
            }
            by_j_mask[parts.len()] += w;
        }

        let mut by_j_rec = vec![Q::zero(); m + 1];
        fn descend(remaining: usize, depth: usize, weight: Q, out: &mut [Q]) {
            if remaining == 0 {
                out[depth] += weight;
                return;
            }
            for l in 1..=remaining {
                descend(
                    remaining - l,
                    depth + 1,
                    weight.clone() * q(1, factorial(l)),
                    out,
                );
            }
        }
        descend(m, 0, q(1, 1), &mut by_j_rec);
        assert_eq!(
            by_j_mask, by_j_rec,
            "composition enumerations differ at m = {m}"
        );

        let mut total = Q::zero();
        for (j, w) in by_j_mask.iter().enumerate().skip(1) {
            let sign = if j % 2 == 0 {
                q(-1, j as i64)
            } else {
                q(1, j as i64)
            };
            total += sign * w.clone();
        }
        let expected = if m == 1 { q(1, 1) } else { Q::zero() };
        assert_eq!(total, expected, "identity fails at m = {m}");
    }
}

// Truncated power series over Q, index = power of t, orders 0..=4.
const ORD: usize = 5;

fn pzero() -> Vec<Q> {
    vec![Q::zero(); ORD]
}

fn pmul(a: &[Q], b: &[Q]) -> Vec<Q> {
    let mut out = pzero();
    for i in 0..ORD {
        for j in 0..ORD - i {
            let prod = a[i].clone() * b[j].clone();
            out[i + j] += prod;
        }
    }
    out
}

fn matmul3(a: &[Vec<Q>], b: &[Vec<Q>]) -> Vec<Vec<Q>> {
    let mut out = vec![vec![Q::zero(); 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            for j in 0..3 {
                let prod = a[i][j].clone() * b[j][k].clone();
                out[i][k] += prod;
            }
        }
    }
    out
}

/// Coefficients of log det(I_p + (e^{tF} - 1) restricted to the first p
/// coordinates) through t^4, computed entirely in rationals.
fn rational_logdet_coefficients(f: &[Vec<Q>], p: usize) -> Vec<Q> {
    // Series of the projected block of e^{tF} - 1.
    let mut b = vec![vec![pzero(); p]; p];
    let mut power = vec![vec![Q::zero(); 3]; 3];
    for (i, row) in power.iter_mut().enumerate() {
        row[i] = q(1, 1);
    }
    for k in 1..ORD {
        power = matmul3(&power, f);
        for i in 0..p {
            for j in 0..p {
                b[i][j][k] = power[i][j].clone() * q(1, factorial(k));
            }
        }
    }
    // det(I + B) for blocks of size 1 or 2, minus one: no constant term.
    let mut d = match p {
        1 => b[0][0].clone(),
        2 => {
            let mut d = pzero();
            for (k, v) in b[0][0].iter().enumerate() {
                d[k] += v.clone();
            }
            for (k, v) in b[1][1].iter().enumerate() {
                d[k] += v.clone();
            }
            let diag = pmul(&b[0][0], &b[1][1]);
            let off = pmul(&b[0][1], &b[1][0]);
            for k in 0..ORD {
                d[k] += diag[k].clone() - off[k].clone();
            }
            d
        }
        _ => panic!("blocks of size 1 or 2 only"),
    };
    d[0] = Q::zero();

    // log(1 + d) through t^4.
    let mut out = pzero();
    let mut dk = d.clone();
    for j in 1..ORD {
        let sign = if j % 2 == 0 {
            q(-1, j as i64)
        } else {
            q(1, j as i64)
        };
        for k in 0..ORD {
            let term = sign.clone() * dk[k].clone();
            out[k] += term;
        }
        dk = pmul(&dk, &d);
    }
    out
}

fn to_f64_matrix(f: &[Vec<Q>]) -> Array2<f64> {
    let mut out = Array2::zeros((3, 3));
    for i in 0..3 {
        for j in 0..3 {
            out[(i, j)] = f[i][j].to_f64().expect("small rational");
        }
    }
    out
}

fn assert_matches_rational(fmat: ArrayView2<f64>, p: usize, exact: &[Q]) {
    let trace = trace_cumulants_batch(fmat, p, &[1, 2, 3, 4]).unwrap();
    let fred = fredholm_cumulants(fmat, p, 4, None).unwrap();
    for m in 1..ORD {
        let want = exact[m].to_f64().expect("small rational");
        let scale = want.abs().max(1e-3);
        assert!(
            (trace[m - 1] - want).abs() <= 1e-13 * scale,
            "trace route order {m}: {} vs exact {want}",
            trace[m - 1]
        );
        assert!(
            (fred[m - 1] - want).abs() <= 1e-8 * scale,
            "determinant route order {m}: {} vs exact {want}",
            fred[m - 1]
        );
    }
}

/// Both floating routes against the rational log-det series on
/// non-commuting 3x3 kernels, for one- and two-dimensional projections.
#[test]
fn rational_series_pins_both_routes() {
    let kernels = [
        [
            [q(1, 2), q(-1, 3), q(1, 5)],
            [q(-1, 3), q(2, 7), q(-3, 4)],
            [q(1, 5), q(-3, 4), q(1, 6)],
        ],
        [
            [q(-2, 5), q(3, 7), q(0, 1)],
            [q(3, 7), q(1, 9), q(-1, 2)],
            [q(0, 1), q(-1, 2), q(5, 8)],
        ],
    ];
    for f in &kernels {
        let fq: Vec<Vec<Q>> = f.iter().map(|r| r.to_vec()).collect();
        let fmat = to_f64_matrix(&fq);
        for p in [1usize, 2] {
            let exact = rational_logdet_coefficients(&fq, p);
            assert_matches_rational(fmat.view(), p, &exact);
        }
    }
}

/// Hand-derived closed forms for a 2x2 kernel with a rank-one projection:
/// C1 = a, C2 = b^2/2, C3 = b^2 (c - a)/6.
#[test]
fn closed_form_two_by_two() {
    for (a, b, c) in [(0.5, 0.25, -0.75), (-0.3, 0.6, 0.2), (0.0, 1.0, 0.0)] {
        let f = arr2(&[[a, b], [b, c]]);
        let got = trace_cumulants_batch(f.view(), 1, &[1, 2, 3]).unwrap();
        assert!((got[0] - a).abs() <= 1e-15);
        assert!((got[1] - b * b / 2.0).abs() <= 1e-14);
        assert!((got[2] - b * b * (c - a) / 6.0).abs() <= 1e-14);
    }
}

/// Commuting kernels have no fluctuation: every coefficient of order >= 2
/// vanishes for diagonal F, at any projection size.
#[test]
fn diagonal_kernels_have_linear_log_moments() {
    let f = Array2::from_diag(&ndarray::arr1(&[0.7, -0.4, 0.9, 0.1, -1.3]));
    for n in 1..5 {
        let got = trace_cumulants_batch(f.view(), n, &[2, 3, 4]).unwrap();
        for (k, v) in got.iter().enumerate() {
            assert!(v.abs() <= 1e-14, "order {} at n = {n}: {v}", k + 2);
        }
    }
}

/// The rational identity test and the series oracle both use signed
/// rationals; keep the helper honest about sign handling.
#[test]
fn rational_helpers_sanity() {
    assert_eq!(q(1, 2) + q(1, 3), q(5, 6));
    assert!(q(-1, 2).is_negative());
    assert_eq!(
        pmul(
            &[q(0, 1), q(1, 1), q(0, 1), q(0, 1), q(0, 1)],
            &[q(0, 1), q(1, 1), q(0, 1), q(0, 1), q(0, 1)]
        )[2],
        q(1, 1)
    );
}
