//! Thin wrappers around the LAPACK drivers this crate needs.
//!
//! ndarray is row-major while LAPACK expects column-major; the wrappers
//! exploit that a row-major buffer read column-major is the transpose, which
//! leaves singular values unchanged and symmetric eigenproblems untouched.

use ndarray::prelude::*;
use num_complex::Complex64;

use crate::{Error, Result};

/// Singular values of a dense complex matrix, descending (zgesdd, values only).
pub(crate) fn singular_values(m: &ArrayView2<Complex64>) -> Result<Vec<f64>> {
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("singular values of an empty matrix"));
    }
    // Column-major buffer of m^T = row-major buffer of m; zgesdd(m^T) has the
    // same singular values. LAPACK then sees an (cols x rows) matrix.
    let mut a: Vec<Complex64> = m.iter().copied().collect();
    let (mm, nn) = (cols, rows);
    let (mi, ni) = (mm as i32, nn as i32);
    let minmn = mm.min(nn);
    let mut s = vec![0.0f64; minmn];
    let mut u = [Complex64::new(0.0, 0.0); 1];
    let mut vt = [Complex64::new(0.0, 0.0); 1];
    let mut rwork = vec![0.0f64; (7 * minmn).max(1)];
    let mut iwork = vec![0i32; 8 * minmn];
    let mut info = 0i32;

    let mut work_query = [Complex64::new(0.0, 0.0); 1];
    unsafe {
        lapack::zgesdd(
            b'N',
            mi,
            ni,
            &mut a,
            mi,
            &mut s,
            &mut u,
            1,
            &mut vt,
            1,
            &mut work_query,
            -1,
            &mut rwork,
            &mut iwork,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::numerical(format!(
            "zgesdd workspace query failed with info = {info}"
        )));
    }
    let lwork = work_query[0].re as usize;
    let mut work = vec![Complex64::new(0.0, 0.0); lwork.max(1)];
    unsafe {
        lapack::zgesdd(
            b'N',
            mi,
            ni,
            &mut a,
            mi,
            &mut s,
            &mut u,
            1,
            &mut vt,
            1,
            &mut work,
            lwork as i32,
            &mut rwork,
            &mut iwork,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::numerical(format!(
            "zgesdd failed with info = {info}"
        )));
    }
    Ok(s)
}

/// Full eigendecomposition of a dense symmetric matrix (dsyevd): ascending
/// eigenvalues and orthonormal eigenvectors in the columns of the returned
/// matrix.
pub(crate) fn eigh(m: &ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let (rows, cols) = m.dim();
    if rows != cols || rows == 0 {
        return Err(Error::invalid(format!(
            "symmetric eigendecomposition needs a nonempty square matrix, got {rows} x {cols}"
        )));
    }
    let n = rows;
    let ni = n as i32;
    // Row-major read column-major is the transpose; the matrix is symmetric.
    let mut a: Vec<f64> = m.iter().copied().collect();
    let mut w = vec![0.0f64; n];
    let mut info = 0i32;

    let mut work_query = [0.0f64; 1];
    let mut iwork_query = [0i32; 1];
    unsafe {
        lapack::dsyevd(
            b'V',
            b'L',
            ni,
            &mut a,
            ni,
            &mut w,
            &mut work_query,
            -1,
            &mut iwork_query,
            -1,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::numerical(format!(
            "dsyevd workspace query failed with info = {info}"
        )));
    }
    let lwork = work_query[0] as usize;
    let liwork = iwork_query[0] as usize;
    let mut work = vec![0.0f64; lwork.max(1)];
    let mut iwork = vec![0i32; liwork.max(1)];
    unsafe {
        lapack::dsyevd(
            b'V',
            b'L',
            ni,
            &mut a,
            ni,
            &mut w,
            &mut work,
            lwork as i32,
            &mut iwork,
            liwork as i32,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::numerical(format!(
            "dsyevd failed with info = {info}"
        )));
    }
    let q = Array2::from_shape_vec((n, n).f(), a)
        .map_err(|e| Error::numerical(format!("eigenvector reshape failed: {e}")))?;
    Ok((w, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn singular_values_of_known_matrix() {
        // diag(3, 4i) has singular values {4, 3}; padding a zero column makes
        // it rectangular and exercises the transpose trick.
        let mut m = Array2::from_elem((2, 3), Complex64::new(0.0, 0.0));
        m[(0, 0)] = Complex64::new(3.0, 0.0);
        m[(1, 1)] = Complex64::new(0.0, 4.0);
        let s = singular_values(&m.view()).unwrap();
        assert_eq!(s.len(), 2);
        assert_relative_eq!(s[0], 4.0, epsilon = 1e-14);
        assert_relative_eq!(s[1], 3.0, epsilon = 1e-14);
    }

    #[test]
    fn eigh_of_known_matrix() {
        let m = array![[2.0, 1.0], [1.0, 2.0]];
        let (vals, q) = eigh(&m.view()).unwrap();
        assert_relative_eq!(vals[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(vals[1], 3.0, epsilon = 1e-14);
        let rec = q.dot(&Array2::from_diag(&Array1::from(vals))).dot(&q.t());
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(rec[(i, j)], m[(i, j)], epsilon = 1e-14);
            }
        }
    }
}
