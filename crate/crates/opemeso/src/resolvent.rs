//! Resolvents at mesoscopically shifted spectral points.
//!
//! A mesoscopic scale `(gamma, x0)` looks at the spectrum through the window
//! `x0 + s / n^gamma`; resolvents are evaluated at `z_n = x0 + eta / n^gamma`
//! with `Im eta != 0`. At such points the resolvent of a Jacobi operator
//! decays exponentially away from the diagonal with rate `~ n^-gamma`, which
//! is what makes spatial decoupling and low-rank comparisons work: everything
//! in this module either computes a resolvent window, measures that decay, or
//! exploits it.

use ndarray::prelude::*;
use num_complex::Complex64;

use crate::jacobi::{ProjectionWindow, TruncatedJacobi};
use crate::{Error, Result};

/// Condition-number estimates above this are treated as numerical failure.
pub const CONDITION_LIMIT: f64 = 1e14;

/// Max-norm residual allowed for a numerically solved resolvent column.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;

/// A spectral point family `z_n = x0 + eta / n^gamma`.
#[derive(Clone, Copy, Debug)]
pub struct SpectralShift {
    x0: f64,
    eta: Complex64,
    gamma: f64,
}

impl SpectralShift {
    pub fn new(x0: f64, eta: Complex64, gamma: f64) -> Result<Self> {
        if !x0.is_finite() {
            return Err(Error::invalid(format!("x0 must be finite, got {x0}")));
        }
        if !eta.re.is_finite() || !eta.im.is_finite() || eta.im == 0.0 {
            return Err(Error::invalid(format!(
                "eta must be finite with Im(eta) != 0, got {eta}"
            )));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!(
                "gamma must lie in (0,1), got {gamma}"
            )));
        }
        Ok(SpectralShift { x0, eta, gamma })
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn eta(&self) -> Complex64 {
        self.eta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// The spectral point at size `n`.
    pub fn at(&self, n: u64) -> Complex64 {
        Complex64::new(self.x0, 0.0) + self.eta / (n as f64).powf(self.gamma)
    }

    /// Sites per unit of mesoscopic energy, `n^gamma`.
    pub fn mesoscopic_unit(&self, n: u64) -> f64 {
        (n as f64).powf(self.gamma)
    }

    /// Asymptotic decay length (in sites) of the free resolvent at `z_n`:
    /// `n^gamma sqrt(4 - x0^2) / |Im eta|`. `None` outside the free bulk.
    pub fn free_decay_length(&self, n: u64) -> Option<f64> {
        if self.x0.abs() >= 2.0 {
            return None;
        }
        let speed = (4.0 - self.x0 * self.x0).sqrt();
        Some(self.mesoscopic_unit(n) * speed / self.eta.im.abs())
    }
}

fn distance_to_band(zeta: Complex64) -> f64 {
    if zeta.re.abs() <= 2.0 {
        zeta.im.abs()
    } else {
        Complex64::new(zeta.re.abs() - 2.0, zeta.im).norm()
    }
}

/// The bounded branch of the inverse Joukowski map: the root of
/// `w^2 - zeta w + 1 = 0` with `|w| < 1`.
///
/// Both roots sit on the unit circle exactly when `zeta` lies on the spectral
/// band `[-2, 2]`, where no bounded branch exists; points within `1e-12` of
/// the band are rejected.
pub fn phi(zeta: Complex64) -> Result<Complex64> {
    if !zeta.re.is_finite() || !zeta.im.is_finite() {
        return Err(Error::invalid(format!("non-finite spectral point {zeta}")));
    }
    if distance_to_band(zeta) < 1e-12 {
        return Err(Error::invalid(format!(
            "spectral point {zeta} is within 1e-12 of the band [-2, 2]"
        )));
    }
    let s = (zeta * zeta - 4.0).sqrt();
    let r1 = (zeta + s) / 2.0;
    let r2 = (zeta - s) / 2.0;
    // The roots multiply to 1; dividing out the large one avoids the
    // cancellation the small one suffers for large |zeta|.
    let big = if r1.norm() >= r2.norm() { r1 } else { r2 };
    Ok(1.0 / big)
}

/// `base^exp` for `|base| < 1` with `u64` exponents, flushing to zero once the
/// magnitude underflows.
fn cpow(base: Complex64, exp: u64) -> Complex64 {
    let mag = base.norm();
    if mag == 0.0 {
        return if exp == 0 {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        };
    }
    // ln(5e-324) ~ -744.4; anything below is a subnormal-or-zero result.
    if (exp as f64) * mag.ln() < -745.0 {
        return Complex64::new(0.0, 0.0);
    }
    let mut result = Complex64::new(1.0, 0.0);
    let mut acc = base;
    let mut e = exp;
    while e > 0 {
        if e & 1 == 1 {
            result *= acc;
        }
        acc *= acc;
        e >>= 1;
    }
    result
}

/// Resolvent entry `(J0 - z)^-1 [j, k]` of the free half-line operator at
/// 1-based sites: `(phi^|j-k| - phi^(j+k)) / (phi - 1/phi)`.
pub fn free_resolvent_entry(j: u64, k: u64, z: Complex64) -> Result<Complex64> {
    if j == 0 || k == 0 {
        return Err(Error::invalid("sites are 1-based"));
    }
    let w = phi(z)?;
    let denom = w - 1.0 / w;
    let bulk = cpow(w, j.abs_diff(k));
    let boundary = cpow(w, j + k);
    Ok((bulk - boundary) / denom)
}

/// A square matrix indexed by a contiguous block of operator sites.
#[derive(Clone, Debug)]
pub struct WindowMatrix {
    origin: u64,
    data: Array2<Complex64>,
}

impl WindowMatrix {
    pub fn new(origin: u64, data: Array2<Complex64>) -> Result<Self> {
        if origin == 0 {
            return Err(Error::invalid("sites are 1-based; origin must be >= 1"));
        }
        let (r, c) = data.dim();
        if r == 0 || r != c {
            return Err(Error::invalid(format!(
                "window matrix must be square and nonempty, got {r} x {c}"
            )));
        }
        Ok(WindowMatrix { origin, data })
    }

    pub fn origin(&self) -> u64 {
        self.origin
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn window(&self) -> ProjectionWindow {
        ProjectionWindow::new(self.origin, self.origin + self.dim() as u64 - 1)
            .expect("window matrix construction keeps origin valid")
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<Complex64> {
        self.data
    }

    /// Entry by operator sites.
    pub fn at(&self, site_row: u64, site_col: u64) -> Result<Complex64> {
        let i = self.index_of(site_row)?;
        let j = self.index_of(site_col)?;
        Ok(self.data[(i, j)])
    }

    fn index_of(&self, site: u64) -> Result<usize> {
        if site < self.origin || site >= self.origin + self.dim() as u64 {
            return Err(Error::invalid(format!(
                "site {site} outside window [{}, {}]",
                self.origin,
                self.origin + self.dim() as u64 - 1
            )));
        }
        Ok((site - self.origin) as usize)
    }

    /// Entrywise difference of two windows over the same site block.
    pub fn diff(&self, other: &WindowMatrix) -> Result<WindowMatrix> {
        if self.origin != other.origin || self.dim() != other.dim() {
            return Err(Error::invalid(format!(
                "window mismatch: [{} + {}] vs [{} + {}]",
                self.origin,
                self.dim(),
                other.origin,
                other.dim()
            )));
        }
        Ok(WindowMatrix {
            origin: self.origin,
            data: &self.data - &other.data,
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.norm()))
    }
}

/// Closed-form free resolvent on a window.
pub fn free_resolvent_window(z: Complex64, window: &ProjectionWindow) -> Result<WindowMatrix> {
    let w = phi(z)?;
    let denom = w - 1.0 / w;
    let size = window.len();
    let lo = window.lo;
    let data = Array2::from_shape_fn((size, size), |(i, j)| {
        let (sj, sk) = (lo + i as u64, lo + j as u64);
        (cpow(w, sj.abs_diff(sk)) - cpow(w, sj + sk)) / denom
    });
    WindowMatrix::new(lo, data)
}

/// `(T - z)^-1` restricted to a window of a finite section, by tridiagonal LU
/// with partial pivoting. Columns are solved for the window sites only; the
/// result is checked against [`RESIDUAL_TOLERANCE`] and [`CONDITION_LIMIT`].
pub fn numeric_resolvent(
    t: &TruncatedJacobi,
    z: Complex64,
    window: &ProjectionWindow,
) -> Result<WindowMatrix> {
    let range = window.index_range(t)?;
    let n = t.size();
    let ni = n as i32;
    let zero = Complex64::new(0.0, 0.0);

    let mut dl: Vec<Complex64> = t
        .offdiag()
        .iter()
        .map(|&a| Complex64::new(a, 0.0))
        .collect();
    let mut d: Vec<Complex64> = t
        .diag()
        .iter()
        .map(|&b| Complex64::new(b, 0.0) - z)
        .collect();
    let mut du = dl.clone();
    let mut du2 = vec![zero; n.saturating_sub(2)];
    let mut ipiv = vec![0i32; n];
    let mut info = 0i32;
    unsafe {
        lapack::zgttrf(ni, &mut dl, &mut d, &mut du, &mut du2, &mut ipiv, &mut info);
    }
    if info != 0 {
        return Err(Error::numerical(format!(
            "tridiagonal factorization failed with info = {info} (z on spectrum of the section?)"
        )));
    }

    let nrhs = range.len();
    let mut b = vec![zero; n * nrhs];
    for (col, i) in range.clone().enumerate() {
        b[col * n + i] = Complex64::new(1.0, 0.0);
    }
    unsafe {
        lapack::zgttrs(
            b'N',
            ni,
            nrhs as i32,
            &dl,
            &d,
            &du,
            &du2,
            &ipiv,
            &mut b,
            ni,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::numerical(format!(
            "tridiagonal solve failed with info = {info}"
        )));
    }

    // Residual and condition checks on the computed columns. The 1-norm of
    // the solved columns lower-bounds ||(T-z)^-1||_1.
    let mut resolvent_norm1: f64 = 0.0;
    let mut residual: f64 = 0.0;
    for (col, i) in range.clone().enumerate() {
        let x = &b[col * n..(col + 1) * n];
        resolvent_norm1 = resolvent_norm1.max(x.iter().map(|v| v.norm()).sum());
        for row in 0..n {
            let mut acc = (Complex64::new(t.diag()[row], 0.0) - z) * x[row];
            if row > 0 {
                acc += Complex64::new(t.offdiag()[row - 1], 0.0) * x[row - 1];
            }
            if row + 1 < n {
                acc += Complex64::new(t.offdiag()[row], 0.0) * x[row + 1];
            }
            if row == i {
                acc -= 1.0;
            }
            residual = residual.max(acc.norm());
        }
    }
    if residual > RESIDUAL_TOLERANCE {
        return Err(Error::numerical(format!(
            "resolvent residual {residual:.3e} exceeds {RESIDUAL_TOLERANCE:.0e}"
        )));
    }
    let matrix_norm1 = {
        let mut best: f64 = 0.0;
        for i in 0..n {
            let mut col = (Complex64::new(t.diag()[i], 0.0) - z).norm();
            if i > 0 {
                col += t.offdiag()[i - 1].abs();
            }
            if i + 1 < n {
                col += t.offdiag()[i].abs();
            }
            best = best.max(col);
        }
        best
    };
    let condition = matrix_norm1 * resolvent_norm1;
    if condition > CONDITION_LIMIT {
        return Err(Error::numerical(format!(
            "condition estimate {condition:.3e} exceeds {CONDITION_LIMIT:.0e}"
        )));
    }

    let size = nrhs;
    let data = Array2::from_shape_fn((size, size), |(i, j)| b[j * n + range.start + i]);
    WindowMatrix::new(window.lo, data)
}

/// Least-squares fit of `ln |R[j,k]| = ln c - d |j - k|` over all window
/// pairs separated by at least `min_separation` sites.
#[derive(Clone, Copy, Debug)]
pub struct DecayFit {
    /// Prefactor estimate `c`.
    pub c_hat: f64,
    /// Decay rate per site, positive when the window really decays.
    pub d_hat: f64,
    pub r_squared: f64,
    pub pairs_used: usize,
}

pub fn combes_thomas_fit(w: &WindowMatrix, min_separation: usize) -> Result<DecayFit> {
    let size = w.dim();
    if min_separation >= size {
        return Err(Error::invalid(format!(
            "min separation {min_separation} leaves no pairs in a {size}-window"
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..size {
        for j in 0..size {
            let sep = i.abs_diff(j);
            if sep < min_separation {
                continue;
            }
            let mag = w.data()[(i, j)].norm();
            // Underflowed entries carry no slope information.
            if mag > 0.0 {
                xs.push(sep as f64);
                ys.push(mag.ln());
            }
        }
    }
    if xs.len() < 4 {
        return Err(Error::invalid(format!(
            "decay fit needs at least 4 usable pairs, got {}",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let syy: f64 = ys.iter().map(|y| (y - ym) * (y - ym)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid(
            "decay fit needs at least two distinct separations",
        ));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy) / (sxx * syy)
    };
    Ok(DecayFit {
        c_hat: intercept.exp(),
        d_hat: -slope,
        r_squared,
        pairs_used: xs.len(),
    })
}

/// A decoupled finite section: couplings severed at two cut bonds around a
/// bulk position.
#[derive(Clone, Debug)]
pub struct DecoupledSection {
    pub section: TruncatedJacobi,
    /// The severed bonds `(c, c+1)` at sites `c = floor(n -+ 2 m n^beta)`.
    pub cuts: (u64, u64),
}

/// Zeroes the couplings at `floor(n - 2 m n^beta)` and `floor(n + 2 m n^beta)`,
/// keeping all rows. The section must cover one site beyond each cut.
pub fn decouple(t: &TruncatedJacobi, n: u64, m_mult: f64, beta: f64) -> Result<DecoupledSection> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid(format!(
            "beta must lie in (0,1), got {beta}"
        )));
    }
    if !(m_mult > 0.0) || !m_mult.is_finite() {
        return Err(Error::invalid(format!(
            "cut multiplier must be positive, got {m_mult}"
        )));
    }
    let spread = 2.0 * m_mult * (n as f64).powf(beta);
    let lo = (n as f64) - spread;
    if lo < 1.0 {
        return Err(Error::invalid(format!(
            "lower cut floor({lo}) is below site 1; n too small for these cuts"
        )));
    }
    let c_lo = lo.floor() as u64;
    let c_hi = ((n as f64) + spread).floor() as u64;
    let mut section = t.clone();
    for c in [c_lo, c_hi] {
        // Bond (c, c+1) is offdiag index c - origin; both endpoints must be
        // inside the section.
        let i = section
            .index_of(c)
            .ok_or_else(|| Error::invalid(format!("cut site {c} not covered by the section")))?;
        if section.index_of(c + 1).is_none() {
            return Err(Error::invalid(format!(
                "cut bond ({c}, {}) reaches past the section",
                c + 1
            )));
        }
        section.offdiag_mut()[i] = 0.0;
    }
    Ok(DecoupledSection {
        section,
        cuts: (c_lo, c_hi),
    })
}

/// Trace-norm envelope for the effect of decoupling, seen from the inner
/// window at exponent `beta_prime < beta`:
/// `4 m^2 n^(2 beta) c^2 d^-2 exp(-2 d m (n^beta - n^beta'))`.
///
/// Deliberately slack (single-traversal exponent, full outer-window area
/// factor); its job is to dominate the measured norm while vanishing with the
/// cut separation.
pub fn decoupling_bound(n: u64, m_mult: f64, beta: f64, beta_prime: f64, fit: &DecayFit) -> f64 {
    let nf = n as f64;
    let area = 4.0 * m_mult * m_mult * nf.powf(2.0 * beta);
    let prefactor = fit.c_hat * fit.c_hat / (fit.d_hat * fit.d_hat);
    let separation = m_mult * (nf.powf(beta) - nf.powf(beta_prime));
    area * prefactor * (-2.0 * fit.d_hat * separation).exp()
}

/// Sherman-Morrison prediction for the effect of a single diagonal coupling:
/// given the unperturbed window `r0` and the perturbation `lambda` at `site`,
/// returns the predicted difference `R_unperturbed - R_perturbed`, i.e.
/// `lambda r0[:, site] r0[site, :] / (1 + lambda r0[site, site])`.
pub fn rank_one_resolvent_diff(r0: &WindowMatrix, site: u64, lambda: f64) -> Result<WindowMatrix> {
    let ri = r0.index_of(site)?;
    if !lambda.is_finite() {
        return Err(Error::invalid(format!(
            "coupling must be finite, got {lambda}"
        )));
    }
    let pivot = 1.0 + lambda * r0.data()[(ri, ri)];
    if pivot.norm() < 1e-12 {
        return Err(Error::numerical(format!(
            "resonant coupling: |1 + lambda R0[site,site]| = {:.3e}",
            pivot.norm()
        )));
    }
    let scale = lambda / pivot;
    let col = r0.data().column(ri).to_owned();
    let row = r0.data().row(ri).to_owned();
    let size = r0.dim();
    let data = Array2::from_shape_fn((size, size), |(i, j)| scale * col[i] * row[j]);
    WindowMatrix::new(r0.origin(), data)
}

/// Inner observation window `[n - 2 m n^beta', n + 2 m n^beta']` as sites,
/// the `P` on both sides of every window comparison below.
pub fn comparison_window(n: u64, m_mult: f64, beta_prime: f64) -> Result<ProjectionWindow> {
    if !(beta_prime > 0.0 && beta_prime < 1.0) {
        return Err(Error::invalid(format!(
            "beta' must lie in (0,1), got {beta_prime}"
        )));
    }
    let spread = 2.0 * m_mult * (n as f64).powf(beta_prime);
    ProjectionWindow::from_real_levels((n as f64) - spread, (n as f64) + spread)
}

fn rank_one_amplitude(q: Complex64, site: u64, lambda: f64) -> Complex64 {
    let denom = q - 1.0 / q;
    let r0_diag = (1.0 - cpow(q, 2 * site)) / denom;
    (1.0 / (denom * denom)) / (1.0 + lambda * r0_diag)
}

/// The two sides of the window comparison for one perturbation site, all in
/// closed form from the free resolvent:
///
/// * `g`: exact resolvent difference `R_free - R_perturbed` on the window,
/// * `t`: the translation-invariant rank-one kernel `A u u^T` with
///   `u_j = phi^|site - j|`,
/// * `residual = g - lambda t`: boundary corrections only, trace norm
///   vanishing exponentially in `n`.
#[derive(Clone, Debug)]
pub struct ComparisonMatrices {
    pub g: WindowMatrix,
    pub t: WindowMatrix,
    pub residual: WindowMatrix,
    pub amplitude: Complex64,
}

pub fn build_comparison_matrices(
    n: u64,
    m_mult: f64,
    beta_prime: f64,
    shift: &SpectralShift,
    site: u64,
    lambda: f64,
) -> Result<ComparisonMatrices> {
    let window = comparison_window(n, m_mult, beta_prime)?;
    if !window.contains(site) {
        return Err(Error::invalid(format!(
            "perturbation site {site} outside comparison window [{}, {}]",
            window.lo, window.hi
        )));
    }
    let z = shift.at(n);
    let q = phi(z)?;
    let denom = q - 1.0 / q;
    let size = window.len();
    let lo = window.lo;

    // Exact Sherman-Morrison difference from closed-form free entries.
    let entry = |s: u64| (cpow(q, s.abs_diff(site)) - cpow(q, s + site)) / denom;
    let r0_diag = (1.0 - cpow(q, 2 * site)) / denom;
    let pivot = 1.0 + lambda * r0_diag;
    if pivot.norm() < 1e-12 {
        return Err(Error::numerical(format!(
            "resonant coupling: |1 + lambda R0[site,site]| = {:.3e}",
            pivot.norm()
        )));
    }
    let scale = lambda / pivot;
    let col: Vec<Complex64> = (0..size).map(|i| entry(lo + i as u64)).collect();
    let g_data = Array2::from_shape_fn((size, size), |(i, j)| scale * col[i] * col[j]);

    let amplitude = rank_one_amplitude(q, site, lambda);
    let u: Vec<Complex64> = (0..size)
        .map(|i| cpow(q, (lo + i as u64).abs_diff(site)))
        .collect();
    let t_data = Array2::from_shape_fn((size, size), |(i, j)| amplitude * u[i] * u[j]);

    let residual = Array2::from_shape_fn((size, size), |(i, j)| {
        g_data[(i, j)] - lambda * t_data[(i, j)]
    });

    Ok(ComparisonMatrices {
        g: WindowMatrix::new(lo, g_data)?,
        t: WindowMatrix::new(lo, t_data)?,
        residual: WindowMatrix::new(lo, residual)?,
        amplitude,
    })
}

/// The same rank-one kernel as [`build_comparison_matrices`] returns in `t`,
/// assembled from four index-mapped blocks of one geometric Hankel matrix:
/// shift the Hankel by `site - 1` on the upper block, reflect it across the
/// site on the lower block, and glue with the two mixed blocks. Exercises the
/// operator-string route; the direct route is the oracle it must reproduce.
pub fn assemble_t_from_hankel(
    n: u64,
    m_mult: f64,
    beta_prime: f64,
    shift: &SpectralShift,
    site: u64,
    lambda: f64,
) -> Result<WindowMatrix> {
    let window = comparison_window(n, m_mult, beta_prime)?;
    if !window.contains(site) {
        return Err(Error::invalid(format!(
            "perturbation site {site} outside comparison window [{}, {}]",
            window.lo, window.hi
        )));
    }
    let z = shift.at(n);
    let q = phi(z)?;
    let amplitude = rank_one_amplitude(q, site, lambda);

    // 0-based ambient index of a site is site - 1; r marks the perturbation.
    let r = site as usize - 1;
    let lo = window.lo as usize - 1;
    let hi = window.hi as usize - 1;
    // Largest Hankel index read below: r - lo on the reflected side,
    // hi - r on the shifted side.
    let h_size = (r - lo).max(hi - r) + 1;
    let h = crate::hankel::build_hankel(q, h_size)?;

    let size = window.len();
    let mut data = Array2::from_elem((size, size), Complex64::new(0.0, 0.0));
    for wi in 0..size {
        let i = lo + wi;
        for wj in 0..size {
            let j = lo + wj;
            // Four blocks of the ambient composition
            //   P> S^(r) H S^T^(r) P>  +  P< E (S^T H S) E P<
            // + P< E S^T H S^T^(r) P>  +  P> S^(r) H S E P<,
            // each reading one Hankel entry at shifted/reflected indices.
            let v = if i >= r && j >= r {
                h[(i - r, j - r)]
            } else if i < r && j < r {
                h[(r - i, r - j)]
            } else if i < r {
                h[(r - i, j - r)]
            } else {
                h[(i - r, r - j)]
            };
            data[(wi, wj)] = amplitude * v;
        }
    }
    WindowMatrix::new(window.lo, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jacobi::JacobiOperator;
    use approx::assert_relative_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn phi_frozen_value() {
        // zeta = 5/2 gives roots 1/2 and 2 exactly.
        let w = phi(c(2.5, 0.0)).unwrap();
        assert_relative_eq!(w.re, 0.5, epsilon = 1e-15);
        assert_relative_eq!(w.im, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn phi_rejects_band() {
        assert!(phi(c(1.0, 0.0)).is_err());
        assert!(phi(c(-2.0, 1e-13)).is_err());
        assert!(phi(c(2.0 + 5e-13, 0.0)).is_err());
        assert!(phi(c(2.1, 0.0)).is_ok());
    }

    #[test]
    fn phi_solves_quadratic_inside_disc() {
        for &zeta in &[c(0.3, 0.7), c(-1.5, 0.2), c(3.0, -0.4), c(0.0, 1e-4)] {
            let w = phi(zeta).unwrap();
            assert!(w.norm() < 1.0);
            let res = (w * w - zeta * w + 1.0).norm();
            assert!(res < 1e-12, "residual {res} at {zeta}");
        }
    }

    #[test]
    fn free_entry_corner_is_minus_phi() {
        // (1,1): (phi^0 - phi^2)/(phi - 1/phi) = -phi.
        for &zeta in &[c(0.1, 0.5), c(2.5, 0.0), c(-0.7, -0.3)] {
            let w = phi(zeta).unwrap();
            let r11 = free_resolvent_entry(1, 1, zeta).unwrap();
            assert_relative_eq!((r11 + w).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn free_entry_is_symmetric() {
        let z = c(0.2, 0.4);
        for (j, k) in [(3u64, 9u64), (1, 20), (14, 14)] {
            let a = free_resolvent_entry(j, k, z).unwrap();
            let b = free_resolvent_entry(k, j, z).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn cpow_underflow_flushes_to_zero() {
        let w = c(0.5, 0.0);
        assert_eq!(cpow(w, 1 << 40), c(0.0, 0.0));
        assert_relative_eq!((cpow(w, 10) - w.powi(10)).norm(), 0.0, epsilon = 1e-18);
    }

    #[test]
    fn numeric_resolvent_matches_closed_form_in_the_bulk() {
        // Free section big enough that truncation effects stay below 1e-12
        // on a central window.
        let j0 = JacobiOperator::free();
        let t = j0.truncate(1, 400).unwrap();
        // Im z = 0.3 keeps the far-edge reflection below e^-50 at this size.
        let z = c(0.0, 0.3);
        let window = ProjectionWindow::new(180, 220).unwrap();
        let numeric = numeric_resolvent(&t, z, &window).unwrap();
        let exact = free_resolvent_window(z, &window).unwrap();
        let err = numeric.diff(&exact).unwrap().max_abs();
        assert!(err < 1e-12, "bulk mismatch {err}");
    }

    #[test]
    fn numeric_resolvent_sees_the_boundary() {
        // Near site 1 the half-line closed form (with its image term) must
        // match including the boundary correction.
        let j0 = JacobiOperator::free();
        let t = j0.truncate(1, 500).unwrap();
        let z = c(0.3, 0.08);
        let window = ProjectionWindow::new(1, 30).unwrap();
        let numeric = numeric_resolvent(&t, z, &window).unwrap();
        let exact = free_resolvent_window(z, &window).unwrap();
        let err = numeric.diff(&exact).unwrap().max_abs();
        assert!(err < 1e-12, "boundary mismatch {err}");
    }

    #[test]
    fn numeric_resolvent_rejects_near_spectrum() {
        let j0 = JacobiOperator::free();
        let t = j0.truncate(1, 200).unwrap();
        let window = ProjectionWindow::new(90, 110).unwrap();
        // Distance ~1e-15 from an eigenvalue of the section is beyond the
        // condition limit.
        let eig = 2.0 * (std::f64::consts::PI / 201.0).cos();
        let err = numeric_resolvent(&t, c(eig + 1e-15, 0.0), &window);
        assert!(err.is_err());
    }

    #[test]
    fn decay_fit_recovers_free_rate() {
        let shift = SpectralShift::new(0.0, c(0.0, 1.0), 0.4).unwrap();
        let n = 500u64;
        let z = shift.at(n);
        let window = ProjectionWindow::new(400, 600).unwrap();
        let w = free_resolvent_window(z, &window).unwrap();
        let fit = combes_thomas_fit(&w, 3).unwrap();
        let expected = -phi(z).unwrap().norm().ln();
        assert!(fit.r_squared > 0.95, "r^2 = {}", fit.r_squared);
        assert_relative_eq!(fit.d_hat, expected, max_relative = 0.05);
        assert!(fit.pairs_used > 1000);
    }

    #[test]
    fn decouple_cuts_both_bonds() {
        let j0 = JacobiOperator::free();
        let n = 500u64;
        let t = j0.truncate(1, 800).unwrap();
        let dec = decouple(&t, n, 2.0, 0.6).unwrap();
        let (c_lo, c_hi) = dec.cuts;
        assert_eq!(c_lo, (500.0 - 4.0 * 500f64.powf(0.6)).floor() as u64);
        assert_eq!(c_hi, (500.0 + 4.0 * 500f64.powf(0.6)).floor() as u64);
        assert_eq!(dec.section.size(), t.size());
        let i_lo = dec.section.index_of(c_lo).unwrap();
        let i_hi = dec.section.index_of(c_hi).unwrap();
        assert_eq!(dec.section.offdiag()[i_lo], 0.0);
        assert_eq!(dec.section.offdiag()[i_hi], 0.0);
        // Every other coupling untouched.
        let touched = [i_lo, i_hi];
        for (i, &a) in dec.section.offdiag().iter().enumerate() {
            if !touched.contains(&i) {
                assert_eq!(a, 1.0);
            }
        }
    }

    #[test]
    fn decouple_rejects_uncovered_cuts() {
        let j0 = JacobiOperator::free();
        let t = j0.truncate(1, 520).unwrap();
        // Upper cut lands at 548 > 520.
        assert!(decouple(&t, 500, 2.0, 0.6).is_err());
    }

    #[test]
    fn rank_one_prediction_is_exact() {
        // Dense check on a small decoupled block: perturb one diagonal entry
        // and compare predicted vs actual inverse difference.
        let j0 = JacobiOperator::free();
        let t = j0.truncate(40, 80).unwrap();
        let z = c(0.1, 0.2);
        let window = ProjectionWindow::new(40, 80).unwrap();
        let r0 = numeric_resolvent(&t, z, &window).unwrap();

        let site = 61u64;
        let lambda = 0.3;
        let mut tp = t.clone();
        let i = tp.index_of(site).unwrap();
        tp.diag_mut()[i] += lambda;
        let r1 = numeric_resolvent(&tp, z, &window).unwrap();

        let predicted = rank_one_resolvent_diff(&r0, site, lambda).unwrap();
        let actual = r0.diff(&r1).unwrap();
        let err = predicted.diff(&actual).unwrap().max_abs();
        assert!(err < 1e-13, "Sherman-Morrison residual {err}");
    }

    #[test]
    fn comparison_matrices_are_consistent() {
        let shift = SpectralShift::new(0.0, c(0.0, 1.0), 0.4).unwrap();
        let n = 200u64;
        let cm = build_comparison_matrices(n, 2.0, 0.5, &shift, n, 0.3).unwrap();
        // g and lambda t agree up to boundary terms, so the residual is tiny
        // already at n = 200.
        assert!(cm.residual.max_abs() < 1e-8);
        // t is exactly rank one with the amplitude on the diagonal site.
        assert_relative_eq!(
            (cm.t.at(n, n).unwrap() - cm.amplitude).norm(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn hankel_assembly_reproduces_direct_kernel() {
        let shift = SpectralShift::new(0.0, c(0.0, 1.0), 0.4).unwrap();
        let n = 200u64;
        for site in [n, n - 5, n + 7] {
            let cm = build_comparison_matrices(n, 2.0, 0.5, &shift, site, 0.3).unwrap();
            let asm = assemble_t_from_hankel(n, 2.0, 0.5, &shift, site, 0.3).unwrap();
            let err = asm.diff(&cm.t).unwrap().max_abs();
            let scale = cm.t.max_abs();
            assert!(
                err <= 1e-12 * scale,
                "assembly mismatch {err} at site {site}"
            );
        }
    }

    #[test]
    fn free_resolvent_spectral_norm_bounded_by_gap() {
        // ||P R P|| <= ||R|| <= 1/dist(z, [-2,2]) by self-adjointness.
        let shift = SpectralShift::new(0.5, c(0.0, 2.0), 0.3).unwrap();
        let n = 300u64;
        let z = shift.at(n);
        let window = ProjectionWindow::new(250, 350).unwrap();
        let w = free_resolvent_window(z, &window).unwrap();
        let gap = z.im.abs();
        let top = crate::linalg::singular_values(&w.data().view()).unwrap()[0];
        assert!(top <= 1.0 / gap + 1e-9, "norm {top} vs {}", 1.0 / gap);
        // And the bound is within an O(1) factor of sharp at a bulk point.
        assert!(top >= 0.2 / gap);
    }
}
