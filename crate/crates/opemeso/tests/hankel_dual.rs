//! A second, self-contained route to Hankel trace norms: cyclic complex
//! Jacobi iteration on the Hermitian dilation of the matrix, no external
//! linear algebra. Pins both the closed-form finite-size norm and the SVD
//! route.

use ndarray::Array2;
use num_complex::Complex64;

use opemeso::hankel::{build_hankel, geometric_trace_norm_exact, trace_norm};

/// Eigenvalues of a Hermitian matrix by cyclic Jacobi rotations. The 2x2
/// subproblem at (p, q) is diagonalized exactly; convergence is quadratic,
/// and the sweep count below is far beyond what size <= 20 needs.
fn jacobi_eigenvalues(mut a: Array2<Complex64>) -> Vec<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let scale: f64 = a.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-300);
    for _sweep in 0..40 {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a[(p, q)].norm_sqr())
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                let mag = apq.norm();
                if mag <= 1e-18 * scale {
                    continue;
                }
                let phase = apq / mag;
                let tau = (a[(q, q)].re - a[(p, p)].re) / (2.0 * mag);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // G has G[p][p] = G[q][q] = c, G[p][q] = s*phase,
                // G[q][p] = -s*conj(phase); apply A <- G^H A G.
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    let new_p = c * akp - s * phase.conj() * akq;
                    let new_q = s * phase * akp + c * akq;
                    a[(k, p)] = new_p;
                    a[(k, q)] = new_q;
                    a[(p, k)] = new_p.conj();
                    a[(q, k)] = new_q.conj();
                }
                let app = a[(p, p)].re;
                let aqq = a[(q, q)].re;
                a[(p, p)] = Complex64::new(app - t * mag, 0.0);
                a[(q, q)] = Complex64::new(aqq + t * mag, 0.0);
                a[(p, q)] = Complex64::new(0.0, 0.0);
                a[(q, p)] = Complex64::new(0.0, 0.0);
            }
        }
    }
    (0..n).map(|i| a[(i, i)].re).collect()
}

fn jacobi_trace_norm(h: &Array2<Complex64>) -> f64 {
    // Hermitian dilation [[0, H], [H^H, 0]]: eigenvalues come in +-sigma_k
    // pairs. The Gram matrix would square the conditioning and turn rounding
    // on null directions into sqrt-of-noise singular values.
    let n = h.nrows();
    let mut d = Array2::from_elem((2 * n, 2 * n), Complex64::new(0.0, 0.0));
    for i in 0..n {
        for j in 0..n {
            d[(i, n + j)] = h[(i, j)];
            d[(n + j, i)] = h[(i, j)].conj();
        }
    }
    jacobi_eigenvalues(d).into_iter().map(f64::abs).sum::<f64>() / 2.0
}

#[test]
fn rotation_route_agrees_with_closed_form_and_svd() {
    let qs = [
        Complex64::new(0.3, 0.0),
        Complex64::from_polar(0.6, std::f64::consts::FRAC_PI_3),
        Complex64::from_polar(0.85, 2.1),
        Complex64::new(0.1, 0.05),
    ];
    for &q in &qs {
        for size in [3usize, 8, 17] {
            let h = build_hankel(q, size).unwrap();
            let rotated = jacobi_trace_norm(&h);
            let exact = geometric_trace_norm_exact(q, size).unwrap();
            let svd = trace_norm(&h.view()).unwrap();
            assert!(
                (rotated - exact).abs() <= 1e-9 * exact.max(1.0),
                "rotations {rotated} vs closed form {exact} at |q| = {}, size {size}",
                q.norm()
            );
            assert!(
                (rotated - svd).abs() <= 1e-9 * svd.max(1.0),
                "rotations {rotated} vs svd {svd} at |q| = {}, size {size}",
                q.norm()
            );
        }
    }
}

/// The rotation route is exact on a matrix with known spectrum: a rank-one
/// Hermitian projector scaled by 3 has eigenvalues {3, 0, ..., 0}.
#[test]
fn rotation_route_exact_on_rank_one() {
    let n = 6;
    let v: Vec<Complex64> = (0..n)
        .map(|k| Complex64::from_polar(1.0, 0.7 * k as f64))
        .collect();
    let norm2: f64 = v.iter().map(|x| x.norm_sqr()).sum();
    let mut a = Array2::from_elem((n, n), Complex64::new(0.0, 0.0));
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = 3.0 * v[i] * v[j].conj() / norm2;
        }
    }
    let mut eigs = jacobi_eigenvalues(a);
    eigs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    for &e in &eigs[..n - 1] {
        assert!(e.abs() <= 1e-13);
    }
    assert!((eigs[n - 1] - 3.0).abs() <= 1e-13);
}
