//! Cumulants of mesoscopic linear statistics.
//!
//! A linear statistic sums a test function, recentred at `x0` and magnified
//! by `n^gamma`, over the points of the projection ensemble of size `n`.
//! Its cumulant generating function is the Fredholm log-determinant
//! `log det(I + (e^{tF} - 1) P)`, where `F` is the test function applied to
//! the (scaled) operator and `P` projects onto the first `n` sites. Expanding
//! the log-determinant in traces and collecting powers of `t` expresses each
//! cumulant coefficient as a sum over integer compositions of trace products
//! of the projected blocks `P F^l P`. This module provides both routes, the
//! trace formula ([`trace_cumulants_batch`]) and a direct numerical evaluation
//! of the log-determinant ([`fredholm_cumulants`]), so each can certify the
//! other, plus the quadrature for the universal variance target
//! ([`sigma_f_squared`]).
//!
//! Conventions: `C_m` denotes the coefficient of `t^m` in the expansion, so
//! the classical cumulant is `m! * C_m`. The first coefficient is the mean
//! `Tr F P` and by convention order `m = 1` always returns it, even though
//! the alternating composition sum telescopes to zero there.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use ndarray::prelude::*;
use num_complex::Complex64;

use crate::jacobi::{JacobiOperator, TruncatedJacobi};
use crate::{Error, Result};

/// Full eigendecomposition of a symmetric tridiagonal matrix via the LAPACK
/// divide-and-conquer driver. Returns ascending eigenvalues and the
/// orthogonal eigenvector matrix `Q` (eigenvectors in columns).
pub(crate) fn tridiagonal_eigh(diag: &[f64], offdiag: &[f64]) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = diag.len();
    if n == 0 {
        return Err(Error::invalid("empty tridiagonal matrix"));
    }
    if offdiag.len() + 1 != n {
        return Err(Error::invalid(format!(
            "{n} diagonal entries need {} couplings, got {}",
            n - 1,
            offdiag.len()
        )));
    }
    let ni = i32::try_from(n).map_err(|_| Error::invalid("matrix too large for LAPACK"))?;
    let mut d = diag.to_vec();
    let mut e = offdiag.to_vec();
    // dstedc with COMPZ = 'I' wants e of length n-1 but a flat z of n*n.
    let mut z = vec![0.0f64; n * n];
    let mut info = 0i32;

    // Workspace query.
    let mut work_query = [0.0f64; 1];
    let mut iwork_query = [0i32; 1];
    unsafe {
        lapack::dstedc(
            b'I',
            ni,
            &mut d,
            &mut e,
            &mut z,
            ni,
            &mut work_query,
            -1,
            &mut iwork_query,
            -1,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::numerical(format!(
            "dstedc workspace query failed with info = {info}"
        )));
    }
    let lwork = work_query[0] as usize;
    let liwork = iwork_query[0] as usize;
    let mut work = vec![0.0f64; lwork.max(1)];
    let mut iwork = vec![0i32; liwork.max(1)];
    unsafe {
        lapack::dstedc(
            b'I',
            ni,
            &mut d,
            &mut e,
            &mut z,
            ni,
            &mut work,
            lwork as i32,
            &mut iwork,
            liwork as i32,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::numerical(format!(
            "dstedc failed with info = {info}"
        )));
    }
    // z is column-major: column j is the eigenvector for d[j].
    let q = Array2::from_shape_vec((n, n).f(), z)
        .map_err(|e| Error::numerical(format!("eigenvector reshape failed: {e}")))?;
    Ok((d, q))
}

/// Tail length multiplier in the default truncation rule.
const TAIL_MULTIPLIER: f64 = 20.0;
/// Smallest tail ever used, so small `n` still get a safe buffer.
const TAIL_FLOOR: u64 = 200;

/// Default truncation size for an ensemble of `n` points at scale exponent
/// `gamma`: the projection window plus a tail of `max(ceil(20 n^gamma ln n),
/// 200)` extra sites. The tail grows faster than the mesoscopic resolution
/// `n^gamma`, which keeps the truncation error on the cumulants far below
/// the effects being measured.
pub fn default_truncation(gamma: f64, n: u64) -> u64 {
    let nf = n as f64;
    let tail = (TAIL_MULTIPLIER * nf.powf(gamma) * nf.ln()).ceil() as u64;
    n + tail.max(TAIL_FLOOR)
}

/// Scale parameters of a mesoscopic linear statistic: the test function is
/// evaluated as `f(n^gamma (x - x0))` on the spectrum, and the statistic sums
/// it over the `n`-point ensemble computed from a truncation of the operator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MesoscopicConfig {
    /// Scale exponent in `(0, 1)`; larger means a narrower spectral window.
    pub gamma: f64,
    /// Centre of the window, strictly inside the spectrum for convergence.
    pub x0: f64,
    /// Number of ensemble points (rank of the projection).
    pub n: u64,
    /// Size of the operator truncation used to approximate the semi-infinite
    /// matrix; must be at least `n`.
    pub truncation: u64,
}

impl MesoscopicConfig {
    /// Config with the [`default_truncation`] rule.
    pub fn auto(gamma: f64, x0: f64, n: u64) -> Result<Self> {
        Self::with_truncation(gamma, x0, n, default_truncation(gamma, n))
    }

    /// Config with an explicit truncation size.
    pub fn with_truncation(gamma: f64, x0: f64, n: u64, truncation: u64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!(
                "scale exponent must lie in (0, 1), got {gamma}"
            )));
        }
        if !x0.is_finite() {
            return Err(Error::invalid("window centre must be finite"));
        }
        if n == 0 {
            return Err(Error::invalid("ensemble size must be positive"));
        }
        if truncation < n {
            return Err(Error::invalid(format!(
                "truncation {truncation} cannot be smaller than the ensemble size {n}"
            )));
        }
        Ok(Self {
            gamma,
            x0,
            n,
            truncation,
        })
    }

    /// Argument seen by the test function for a spectral point `x`.
    pub fn scaled_argument(&self, x: f64) -> f64 {
        (self.n as f64).powf(self.gamma) * (x - self.x0)
    }

    /// Width of the spectral window, `n^{-gamma}`.
    pub fn mesoscopic_unit(&self) -> f64 {
        (self.n as f64).powf(-self.gamma)
    }

    /// Same parameters with the tail beyond the projection window doubled.
    /// Comparing results at the two sizes estimates the truncation error.
    pub fn doubled_tail(&self) -> Self {
        Self {
            truncation: self.n + 2 * (self.truncation - self.n),
            ..*self
        }
    }
}

/// Test function for linear statistics.
///
/// The workhorse variant is a combination of Cauchy kernels,
/// `f(x) = Im sum_j c_j / (x - eta_j)` with real weights and poles off the
/// real axis. Such functions tie the functional calculus directly to
/// resolvents: applying `f` at scale `(gamma, x0)` is a finite combination of
/// resolvents at the spectral points `x0 + eta_j n^{-gamma}`, which is what
/// makes perturbation arguments entrywise-explicit. Arbitrary `C^1` test
/// functions are supported through the [`TestFunction::generic`] variant.
#[derive(Clone)]
pub enum TestFunction {
    /// `f(x) = Im sum_j c_j / (x - eta_j)`, requiring `Im eta_j != 0`.
    RationalImag { terms: Vec<(f64, Complex64)> },
    /// Arbitrary pointwise evaluation with a human-readable label.
    Generic {
        f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        label: String,
    },
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::RationalImag { terms } => fm
                .debug_struct("RationalImag")
                .field("terms", terms)
                .finish(),
            Self::Generic { label, .. } => {
                fm.debug_struct("Generic").field("label", label).finish()
            }
        }
    }
}

impl TestFunction {
    /// Rational kernel `Im sum_j c_j / (x - eta_j)`. Every pole must sit off
    /// the real axis and every weight must be finite.
    pub fn rational_imag(terms: Vec<(f64, Complex64)>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::invalid("rational test function needs a pole"));
        }
        for &(c, eta) in &terms {
            if !c.is_finite() || !eta.re.is_finite() || !eta.im.is_finite() {
                return Err(Error::invalid("non-finite rational term"));
            }
            if eta.im == 0.0 {
                return Err(Error::invalid(format!("pole {eta} lies on the real axis")));
            }
        }
        Ok(Self::RationalImag { terms })
    }

    /// The Cauchy kernel `1 / (1 + x^2) = Im 1 / (x - i)`.
    pub fn cauchy() -> Self {
        Self::RationalImag {
            terms: vec![(1.0, Complex64::new(0.0, 1.0))],
        }
    }

    /// Wrap an arbitrary evaluation rule.
    pub fn generic(
        label: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::Generic {
            f: Arc::new(f),
            label: label.into(),
        }
    }

    /// Pointwise value.
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Self::RationalImag { terms } => terms
                .iter()
                .map(|&(c, eta)| (c / (Complex64::new(x, 0.0) - eta)).im)
                .sum(),
            Self::Generic { f, .. } => f(x),
        }
    }

    /// Pointwise derivative: exact for rational kernels, a central difference
    /// otherwise.
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Self::RationalImag { terms } => terms
                .iter()
                .map(|&(c, eta)| {
                    let d = Complex64::new(x, 0.0) - eta;
                    (-c / (d * d)).im
                })
                .sum(),
            Self::Generic { f, .. } => {
                let h = 1e-6 * (1.0 + x.abs());
                (f(x + h) - f(x - h)) / (2.0 * h)
            }
        }
    }

    /// The rational terms, if this is a rational kernel.
    pub fn poles(&self) -> Option<&[(f64, Complex64)]> {
        match self {
            Self::RationalImag { terms } => Some(terms),
            Self::Generic { .. } => None,
        }
    }
}

/// Evaluate `F = f(n^gamma (T - x0))` on a truncation `T` of the operator by
/// full diagonalization. The section must start at site 1 and have exactly
/// `cfg.truncation` rows, so that the projection in the cumulant formulas
/// aligns with the leading block.
///
/// Memory peaks at three dense `truncation^2` matrices.
pub fn apply_scaled_function(
    section: &TruncatedJacobi,
    f: &TestFunction,
    cfg: &MesoscopicConfig,
) -> Result<Array2<f64>> {
    if section.origin() != 1 {
        return Err(Error::invalid(
            "scaled-function sections must start at site 1",
        ));
    }
    if section.size() as u64 != cfg.truncation {
        return Err(Error::invalid(format!(
            "section has {} rows but the config asks for truncation {}",
            section.size(),
            cfg.truncation
        )));
    }
    let (lam, q) = tridiagonal_eigh(section.diag(), section.offdiag())?;
    let fv: Vec<f64> = lam
        .iter()
        .map(|&l| f.eval(cfg.scaled_argument(l)))
        .collect();
    if let Some(bad) = fv.iter().find(|v| !v.is_finite()) {
        return Err(Error::numerical(format!(
            "test function produced a non-finite value {bad}"
        )));
    }
    // F = Q diag(fv) Q^T; scale the columns of a copy of Q, then one GEMM.
    let mut qf = q.clone();
    for (mut col, &v) in qf.axis_iter_mut(Axis(1)).zip(&fv) {
        col *= v;
    }
    let mut fmat = qf.dot(&q.t());
    // The GEMM output is symmetric only up to rounding; make it exact so the
    // downstream eigensolver and trace identities see one consistent matrix.
    let nsz = fmat.nrows();
    for i in 0..nsz {
        for j in (i + 1)..nsz {
            let avg = 0.5 * (fmat[(i, j)] + fmat[(j, i)]);
            fmat[(i, j)] = avg;
            fmat[(j, i)] = avg;
        }
    }
    Ok(fmat)
}

/// Mean of the linear statistic: `Tr F P`, the trace of the leading
/// `n x n` block.
pub fn trace_mean(fmat: ArrayView2<f64>, n: usize) -> Result<f64> {
    check_projected(&fmat, n)?;
    Ok(fmat.diag().iter().take(n).sum())
}

fn check_projected(fmat: &ArrayView2<f64>, n: usize) -> Result<()> {
    if fmat.nrows() != fmat.ncols() {
        return Err(Error::invalid(format!(
            "matrix is {}x{}, expected square",
            fmat.nrows(),
            fmat.ncols()
        )));
    }
    if n == 0 || n > fmat.nrows() {
        return Err(Error::invalid(format!(
            "projection rank {n} outside 1..={}",
            fmat.nrows()
        )));
    }
    Ok(())
}

/// Ordered tuples of positive integers summing to `total`, with `parts`
/// entries each.
fn compositions(total: u32, parts: u32) -> Vec<Vec<u32>> {
    debug_assert!(parts >= 1 && parts <= total);
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 1..=(total - parts + 1) {
        for rest in compositions(total - first, parts - 1) {
            let mut tuple = Vec::with_capacity(parts as usize);
            tuple.push(first);
            tuple.extend(rest);
            out.push(tuple);
        }
    }
    out
}

/// Canonical representative of a tuple under rotation and reversal. Traces
/// of products of symmetric matrices are invariant under both, so trace
/// products are memoized by this key.
fn dihedral_canonical(parts: &[u32]) -> Vec<u32> {
    let m = parts.len();
    let mut best: Option<Vec<u32>> = None;
    for r in 0..m {
        let rot: Vec<u32> = (0..m).map(|i| parts[(i + r) % m]).collect();
        let mut rev = rot.clone();
        rev.reverse();
        for cand in [rot, rev] {
            if best.as_ref().map_or(true, |b| cand < *b) {
                best = Some(cand);
            }
        }
    }
    best.expect("nonempty tuple")
}

/// `Tr(A B)` without forming the product.
fn trace_dot<S1, S2>(a: &ArrayBase<S1, Ix2>, b: &ArrayBase<S2, Ix2>) -> f64
where
    S1: ndarray::Data<Elem = f64>,
    S2: ndarray::Data<Elem = f64>,
{
    a.iter().zip(b.t().iter()).map(|(x, y)| x * y).sum()
}

fn factorial(l: u32) -> f64 {
    (1..=l).map(|k| k as f64).product()
}

/// Cumulant coefficients of the linear statistic from the trace formula.
///
/// For each requested order `m >= 2`,
/// `C_m = sum_{j=1}^{m} ((-1)^{j+1}/j) sum_{l_1+..+l_j=m}
/// (Tr(C_{l_1} .. C_{l_j}) - Tr C_m) / (l_1! .. l_j!)`
/// where `C_l` is the leading `n x n` block of `F^l`. Order 1 returns the
/// mean `Tr F P`. The blocks are built by repeated matrix-panel products,
/// never forming full powers of `F`, and trace products are shared across
/// orders and across cyclically equivalent compositions.
pub fn trace_cumulants_batch(fmat: ArrayView2<f64>, n: usize, orders: &[u32]) -> Result<Vec<f64>> {
    check_projected(&fmat, n)?;
    if orders.is_empty() {
        return Err(Error::invalid("no cumulant orders requested"));
    }
    if orders.contains(&0) {
        return Err(Error::invalid("cumulant orders are 1-based"));
    }
    let mmax = *orders.iter().max().expect("nonempty") as usize;

    // blocks[l-1] = P F^l P, extracted from the N x n panel F^l [:, :n].
    let mut blocks: Vec<Array2<f64>> = Vec::with_capacity(mmax);
    let mut panel = fmat.slice(s![.., ..n]).to_owned();
    blocks.push(panel.slice(s![..n, ..]).to_owned());
    for _ in 2..=mmax {
        panel = fmat.dot(&panel);
        blocks.push(panel.slice(s![..n, ..]).to_owned());
    }
    drop(panel);
    let tr_single: Vec<f64> = blocks.iter().map(|b| b.diag().sum()).collect();

    let mut memo: HashMap<Vec<u32>, f64> = HashMap::new();
    let mut tr_product = |parts: &[u32]| -> f64 {
        let key = dihedral_canonical(parts);
        if let Some(&v) = memo.get(&key) {
            return v;
        }
        let block = |l: u32| &blocks[l as usize - 1];
        let v = match key.len() {
            1 => tr_single[key[0] as usize - 1],
            2 => trace_dot(block(key[0]), block(key[1])),
            _ => {
                let mut left = block(key[0]).clone();
                for &l in &key[1..key.len() - 1] {
                    left = left.dot(block(l));
                }
                trace_dot(&left, block(key[key.len() - 1]))
            }
        };
        memo.insert(key, v);
        v
    };

    let mut out = Vec::with_capacity(orders.len());
    for &m in orders {
        if m == 1 {
            out.push(tr_single[0]);
            continue;
        }
        let mut total = 0.0;
        for j in 1..=m {
            let coef = if j % 2 == 1 { 1.0 } else { -1.0 } / j as f64;
            for parts in compositions(m, j) {
                let denom: f64 = parts.iter().map(|&l| factorial(l)).product();
                total += coef * (tr_product(&parts) - tr_single[m as usize - 1]) / denom;
            }
        }
        out.push(total);
    }
    Ok(out)
}

/// Single cumulant coefficient; see [`trace_cumulants_batch`].
pub fn trace_cumulant(fmat: ArrayView2<f64>, n: usize, m: u32) -> Result<f64> {
    Ok(trace_cumulants_batch(fmat, n, &[m])?[0])
}

/// `expm1(x) - x - x^2/2 - x^3/6`: the series tail starting at `x^4/24`,
/// summed directly so it keeps full relative precision for small `x`.
fn em1_tail4(x: f64) -> f64 {
    let mut term = x * x * x * x / 24.0;
    let mut s = 0.0;
    let mut k = 4u32;
    loop {
        s += term;
        k += 1;
        term *= x / k as f64;
        if term.abs() <= 1e-30 * s.abs().max(1e-300) {
            return s;
        }
    }
}

/// `expm1(x) - x - x^2/2`, accurate for small `x`.
fn em1_tail2(x: f64) -> f64 {
    x * x * x / 6.0 + em1_tail4(x)
}

/// Lowest-order central difference stencil for the `m`-th derivative:
/// offsets in units of the step and the matching coefficients.
fn fd_stencil(m: u32) -> (&'static [i64], &'static [f64]) {
    match m {
        1 => (&[-1, 1], &[-0.5, 0.5]),
        2 => (&[-1, 0, 1], &[1.0, -2.0, 1.0]),
        3 => (&[-2, -1, 1, 2], &[-0.5, 1.0, -1.0, 0.5]),
        4 => (&[-2, -1, 0, 1, 2], &[1.0, -4.0, 6.0, -4.0, 1.0]),
        5 => (&[-3, -2, -1, 1, 2, 3], &[-0.5, 2.0, -2.5, 2.5, -2.0, 0.5]),
        6 => (
            &[-3, -2, -1, 0, 1, 2, 3],
            &[1.0, -6.0, 15.0, -20.0, 15.0, -6.0, 1.0],
        ),
        _ => unreachable!("stencils are defined for orders 1..=6"),
    }
}

/// Largest cumulant order [`fredholm_cumulants`] can certify.
pub const MAX_FREDHOLM_ORDER: u32 = 6;

/// Cumulant coefficients straight from the Fredholm determinant, as an
/// independent check on the trace formula.
///
/// Writes `L(t) = log det(I + (e^{t Lambda} - 1) M)` in the eigenbasis of
/// `F` (so `Lambda` is diagonal and `M` is the Gram matrix of the projected
/// eigenvectors), extracts the coefficients of `t`, `t^2`, `t^3` exactly from
/// the trace expansion of the log, and differentiates only the remainder
/// numerically. The remainder is assembled term by term so that every piece
/// is `O(t^4)`: the raw log-determinant would lose the high-order
/// coefficients to cancellation, the remainder does not. Central differences
/// at steps `h` and `2h` are combined by one Richardson extrapolation.
///
/// `step` overrides the default `h = 1e-3 / ||F||`. Orders up to
/// [`MAX_FREDHOLM_ORDER`] are supported; cost is a few dozen dense
/// eigendecomposition-sized matrix products, so keep `F` moderate.
pub fn fredholm_cumulants(
    fmat: ArrayView2<f64>,
    n: usize,
    m_max: u32,
    step: Option<f64>,
) -> Result<Vec<f64>> {
    check_projected(&fmat, n)?;
    if m_max < 1 || m_max > MAX_FREDHOLM_ORDER {
        return Err(Error::invalid(format!(
            "order {m_max} outside 1..={MAX_FREDHOLM_ORDER}"
        )));
    }
    let nsz = fmat.nrows();
    let mut asym = 0.0f64;
    let mut scale = 0.0f64;
    for i in 0..nsz {
        for j in (i + 1)..nsz {
            asym = asym.max((fmat[(i, j)] - fmat[(j, i)]).abs());
            scale = scale.max(fmat[(i, j)].abs());
        }
        scale = scale.max(fmat[(i, i)].abs());
    }
    if asym > 1e-9 * (1.0 + scale) {
        return Err(Error::invalid(
            "matrix is not symmetric; the determinant route needs a real spectrum",
        ));
    }

    let (lam, q) = crate::linalg::eigh(&fmat)?;
    let nrm = lam.iter().fold(0.0f64, |acc, &l| acc.max(l.abs()));
    if nrm == 0.0 {
        return Ok(vec![0.0; m_max as usize]);
    }
    let h = match step {
        Some(s) if s.is_finite() && s > 0.0 => s,
        Some(s) => {
            return Err(Error::invalid(format!(
                "differentiation step must be positive and finite, got {s}"
            )))
        }
        None => 1e-3 / nrm,
    };

    // Gram matrix of the projected eigenvectors: M = B^T B with B the top
    // n rows of Q. M is the projection P expressed in the eigenbasis.
    let b = q.slice(s![..n, ..]);
    let m_mat = b.t().dot(&b);
    let scale_rows = |v: &dyn Fn(f64) -> f64| -> Array2<f64> {
        let mut out = m_mat.clone();
        for (mut row, &l) in out.axis_iter_mut(Axis(0)).zip(&lam) {
            row *= v(l);
        }
        out
    };
    let lm = scale_rows(&|l| l);
    let l2m = scale_rows(&|l| l * l);
    let mdiag: Vec<f64> = m_mat.diag().to_vec();

    // Exact low-order coefficients of L(t) = sum_k (-1)^{k+1}/k Tr((D_t M)^k)
    // with D_t = diag(expm1(t lambda)).
    let c1: f64 = lam.iter().zip(&mdiag).map(|(&l, &d)| l * d).sum();
    let c2 = 0.5
        * (lam
            .iter()
            .zip(&mdiag)
            .map(|(&l, &d)| l * l * d)
            .sum::<f64>()
            - trace_dot(&lm, &lm));
    let lm2 = lm.dot(&lm);
    let c3 = lam
        .iter()
        .zip(&mdiag)
        .map(|(&l, &d)| l * l * l * d)
        .sum::<f64>()
        / 6.0
        - 0.5 * trace_dot(&l2m, &lm)
        + trace_dot(&lm2, &lm) / 3.0;

    // Remainder L(t) - c1 t - c2 t^2 - c3 t^3, built from pieces that are
    // individually O(t^4). Splitting D_t M = X + Y + W3 with X exactly
    // linear, Y exactly quadratic and W3 = O(t^3) lets each series term
    // shed its low-order part analytically instead of by subtraction.
    let lres = |t: f64| -> Result<f64> {
        let x: Vec<f64> = lam.iter().map(|&l| t * l).collect();
        let d: Vec<f64> = x.iter().map(|&xx| xx.exp_m1()).collect();
        if d.iter().any(|v| v.abs() >= 1.0) {
            return Err(Error::invalid(
                "differentiation step too large: expm1 amplification reached 1",
            ));
        }
        let xm = {
            let mut out = lm.clone();
            out *= t;
            out
        };
        let ym = {
            let mut out = l2m.clone();
            out *= 0.5 * t * t;
            out
        };
        let row_scaled = |g: &[f64]| -> Array2<f64> {
            let mut out = m_mat.clone();
            for (mut row, &v) in out.axis_iter_mut(Axis(0)).zip(g) {
                row *= v;
            }
            out
        };
        let g3: Vec<f64> = x.iter().map(|&xx| em1_tail2(xx)).collect();
        let w3 = row_scaled(&g3);
        let v = &ym + &w3;
        let e = row_scaled(&d);

        // k = 1 term minus its cubic part.
        let mut s: f64 = x
            .iter()
            .zip(&mdiag)
            .map(|(&xx, &md)| em1_tail4(xx) * md)
            .sum();
        // k = 2 term minus Tr X^2 (order t^2) and 2 Tr XY (order t^3).
        s -= 0.5
            * (2.0 * trace_dot(&xm, &w3)
                + trace_dot(&ym, &ym)
                + 2.0 * trace_dot(&ym, &w3)
                + trace_dot(&w3, &w3));
        // k = 3 term minus Tr X^3 / 3 (order t^3).
        let x2 = xm.dot(&xm);
        let v2 = v.dot(&v);
        s += trace_dot(&x2, &v);
        s += trace_dot(&xm, &v2);
        s += trace_dot(&v, &v2) / 3.0;
        // k >= 4 terms are already O(t^4); sum them until they vanish.
        let mut ek = e.dot(&e);
        ek = ek.dot(&e);
        let mut k = 3u32;
        loop {
            k += 1;
            ek = ek.dot(&e);
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            let term = sign * ek.diag().sum() / k as f64;
            s += term;
            if term.abs() < 1e-30 * s.abs().max(1.0) || k > 40 {
                return Ok(s);
            }
        }
    };

    // Evaluate the remainder once per needed grid point, shared across all
    // stencils and both Richardson grids.
    let mut needed: Vec<i64> = Vec::new();
    for m in 1..=m_max {
        let (offs, _) = fd_stencil(m);
        for &o in offs {
            needed.push(o);
            needed.push(2 * o);
        }
    }
    needed.sort_unstable();
    needed.dedup();
    let mut cache: HashMap<i64, f64> = HashMap::new();
    cache.insert(0, 0.0);
    for &o in &needed {
        if let std::collections::hash_map::Entry::Vacant(slot) = cache.entry(o) {
            slot.insert(lres(o as f64 * h)?);
        }
    }

    let exact = [c1, c2, c3];
    let mut out = Vec::with_capacity(m_max as usize);
    for m in 1..=m_max {
        let (offs, coefs) = fd_stencil(m);
        let diff = |grid: i64| -> f64 {
            let num: f64 = offs
                .iter()
                .zip(coefs)
                .map(|(&o, &c)| c * cache[&(o * grid)])
                .sum();
            num / (grid as f64 * h).powi(m as i32)
        };
        let richardson = (4.0 * diff(1) - diff(2)) / 3.0;
        let mut val = richardson / factorial(m);
        if (m as usize) <= exact.len() {
            // For these orders the remainder derivative vanishes by
            // construction; the stencil contributes only rounding noise.
            val += exact[m as usize - 1];
        }
        out.push(val);
    }
    Ok(out)
}

/// One row of a cumulant comparison between two operators at a common scale.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct CumulantReport {
    /// Cumulant order `m`.
    pub order: u32,
    /// Ensemble size the coefficients refer to.
    pub n: u64,
    /// Coefficient for the baseline operator.
    pub baseline: f64,
    /// Coefficient for the perturbed operator.
    pub perturbed: f64,
    /// `perturbed - baseline`.
    pub diff: f64,
    /// Worst change in either coefficient when the truncation tail is
    /// doubled; an a posteriori bound on the truncation error.
    pub truncation_error: f64,
}

/// Compare cumulant coefficients of two operators at the same scale.
///
/// Both operators are truncated to `cfg.truncation` sites, the scaled test
/// function is applied, and the requested orders are evaluated with the
/// trace formula. Everything is then repeated with the tail doubled to
/// estimate the truncation error. The four pipelines run sequentially, so
/// peak memory stays at a single dense truncation-sized problem.
pub fn compare_cumulants(
    baseline: &JacobiOperator,
    perturbed: &JacobiOperator,
    f: &TestFunction,
    cfg: &MesoscopicConfig,
    orders: &[u32],
) -> Result<Vec<CumulantReport>> {
    let values = |op: &JacobiOperator, c: &MesoscopicConfig| -> Result<Vec<f64>> {
        let section = op.truncate(1, c.truncation)?;
        let fmat = apply_scaled_function(&section, f, c)?;
        trace_cumulants_batch(fmat.view(), c.n as usize, orders)
    };
    let base = values(baseline, cfg)?;
    let pert = values(perturbed, cfg)?;
    let wide = cfg.doubled_tail();
    let (base_w, pert_w) = if wide.truncation > cfg.truncation {
        (values(baseline, &wide)?, values(perturbed, &wide)?)
    } else {
        (base.clone(), pert.clone())
    };
    Ok(orders
        .iter()
        .enumerate()
        .map(|(i, &m)| CumulantReport {
            order: m,
            n: cfg.n,
            baseline: base[i],
            perturbed: pert[i],
            diff: pert[i] - base[i],
            truncation_error: (base[i] - base_w[i]).abs().max((pert[i] - pert_w[i]).abs()),
        })
        .collect())
}

/// The limiting variance of a mesoscopic linear statistic together with the
/// quadrature error estimate from grid refinement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceTarget {
    /// Value of the double integral.
    pub sigma2: f64,
    /// Difference between the fine and coarse grids.
    pub quadrature_error: f64,
}

/// Universal variance target
/// `sigma_f^2 = (1/4 pi^2) iint ((f(x) - f(y)) / (x - y))^2 dx dy`,
/// the homogeneous half-order Sobolev seminorm of `f` (squared). This is the
/// limit of the second cumulant `2 C_2` for every admissible scale and every
/// operator in the universality class, which makes it the reference value
/// for variance experiments. For the Cauchy kernel the integral is exactly
/// `1/8`.
///
/// Both axes are mapped to a bounded interval through `x = tan u` and the
/// square is integrated with tensor Gauss-Legendre rules at two resolutions;
/// the diagonal is removable (`(f(x)-f(y))/(x-y) -> f'(x)`), handled
/// explicitly near `x = y`.
pub fn sigma_f_squared(f: &TestFunction) -> Result<VarianceTarget> {
    let coarse = h_half_seminorm(f, 300)?;
    let fine = h_half_seminorm(f, 600)?;
    Ok(VarianceTarget {
        sigma2: fine,
        quadrature_error: (fine - coarse).abs(),
    })
}

fn h_half_seminorm(f: &TestFunction, grid: usize) -> Result<f64> {
    let (nodes, weights) = gauss_legendre(grid);
    let half_pi = std::f64::consts::FRAC_PI_2;
    let us: Vec<f64> = nodes.iter().map(|&x| x * half_pi).collect();
    let ws: Vec<f64> = weights.iter().map(|&w| w * half_pi).collect();
    let xs: Vec<f64> = us.iter().map(|&u| u.tan()).collect();
    let fs: Vec<f64> = xs.iter().map(|&x| f.eval(x)).collect();
    // Jacobian of x = tan u on each axis.
    let sec2: Vec<f64> = us.iter().map(|&u| 1.0 / (u.cos() * u.cos())).collect();
    if fs.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(
            "test function produced a non-finite value on the quadrature grid",
        ));
    }
    let mut total = 0.0;
    for i in 0..grid {
        for j in 0..grid {
            let dx = xs[i] - xs[j];
            let ratio = if dx.abs() < 1e-9 * (1.0 + xs[i].abs()) {
                f.derivative(xs[i])
            } else {
                (fs[i] - fs[j]) / dx
            };
            total += ws[i] * ws[j] * ratio * ratio * sec2[i] * sec2[j];
        }
    }
    let val = total / (4.0 * std::f64::consts::PI * std::f64::consts::PI);
    if !val.is_finite() {
        return Err(Error::numerical("variance quadrature diverged"));
    }
    Ok(val)
}

/// Gauss-Legendre nodes and weights on `(-1, 1)` by Newton iteration on the
/// Legendre recurrence.
pub(crate) fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for k in 0..(m + 1) / 2 {
        // Standard initial guess; Newton converges to the nearest root.
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (m as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(m, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(m, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[k] = -x;
        nodes[m - 1 - k] = x;
        weights[k] = w;
        weights[m - 1 - k] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(m: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=m {
        let kf = k as f64;
        let pk = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = pk;
    }
    // Interior nodes only, so x^2 != 1.
    let dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}
