//! Jacobi operators in recurrence-coefficient form.
//!
//! A measure with finite moments is represented by its three-term recurrence
//! coefficients `(a_k, b_k)`: the associated Jacobi operator `J` is the
//! symmetric tridiagonal operator with `J[k,k] = b_k` and `J[k,k+1] =
//! J[k+1,k] = a_k`, sites labelled `1, 2, 3, ...`. Perturbed ensembles are
//! modelled as `J + D` with `D` a sparse diagonal supported on a power-law
//! spaced set of sites.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::{Error, Result};

/// Spacing checks ignore sites below this index: power-law spaced sequences
/// satisfy their defining inequality with the stated constant only once the
/// prefactor regime has settled.
pub const SPACING_CHECK_START: u64 = 100;

/// Positions are kept exactly representable in `f64` so that floating-point
/// site arithmetic (distances, spacing ratios) stays exact.
const MAX_POSITION: u64 = 1 << 53;

/// Recurrence coefficient sequences `k -> (a_k, b_k)`, `k >= 1`.
#[derive(Clone)]
pub enum CoefficientRule {
    /// `a = 1, b = 0`: spectrum `[-2, 2]`, semicircle spectral measure,
    /// orthonormal polynomials `p_k(x) = U_k(x/2)`.
    Free,
    /// Constant coefficients `a > 0`, `b`.
    Constant { a: f64, b: f64 },
    /// Arbitrary bounded sequences; `norm_bound` must dominate
    /// `2 sup |a_k| + sup |b_k|`.
    Custom {
        a: Arc<dyn Fn(u64) -> f64 + Send + Sync>,
        b: Arc<dyn Fn(u64) -> f64 + Send + Sync>,
        norm_bound: f64,
    },
}

impl fmt::Debug for CoefficientRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoefficientRule::Free => write!(f, "Free"),
            CoefficientRule::Constant { a, b } => write!(f, "Constant {{ a: {a}, b: {b} }}"),
            CoefficientRule::Custom { norm_bound, .. } => {
                write!(f, "Custom {{ norm_bound: {norm_bound} }}")
            }
        }
    }
}

/// A coefficient sequence plus the operator-norm bound it guarantees.
#[derive(Clone, Debug)]
pub struct RecurrenceCoefficients {
    rule: CoefficientRule,
}

impl RecurrenceCoefficients {
    pub fn free() -> Self {
        RecurrenceCoefficients {
            rule: CoefficientRule::Free,
        }
    }

    pub fn constant(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) || a <= 0.0 {
            return Err(Error::invalid(format!(
                "constant coefficients need finite a > 0 and finite b, got a = {a}, b = {b}"
            )));
        }
        Ok(RecurrenceCoefficients {
            rule: CoefficientRule::Constant { a, b },
        })
    }

    pub fn custom(
        a: Arc<dyn Fn(u64) -> f64 + Send + Sync>,
        b: Arc<dyn Fn(u64) -> f64 + Send + Sync>,
        norm_bound: f64,
    ) -> Result<Self> {
        if !norm_bound.is_finite() || norm_bound <= 0.0 {
            return Err(Error::invalid(format!(
                "custom coefficients need a finite positive norm bound, got {norm_bound}"
            )));
        }
        Ok(RecurrenceCoefficients {
            rule: CoefficientRule::Custom { a, b, norm_bound },
        })
    }

    /// Off-diagonal coefficient `a_k`, the coupling between sites `k` and `k+1`.
    pub fn a(&self, k: u64) -> f64 {
        match &self.rule {
            CoefficientRule::Free => 1.0,
            CoefficientRule::Constant { a, .. } => *a,
            CoefficientRule::Custom { a, .. } => a(k),
        }
    }

    /// Diagonal coefficient `b_k`.
    pub fn b(&self, k: u64) -> f64 {
        match &self.rule {
            CoefficientRule::Free => 0.0,
            CoefficientRule::Constant { b, .. } => *b,
            CoefficientRule::Custom { b, .. } => b(k),
        }
    }

    /// Upper bound on the operator norm of the associated Jacobi operator.
    pub fn norm_bound(&self) -> f64 {
        match &self.rule {
            CoefficientRule::Free => 2.0,
            CoefficientRule::Constant { a, b } => 2.0 * a.abs() + b.abs(),
            CoefficientRule::Custom { norm_bound, .. } => *norm_bound,
        }
    }

    pub fn rule(&self) -> &CoefficientRule {
        &self.rule
    }
}

/// Coupling-strength rules `k -> lambda_k` for the k-th perturbation site.
#[derive(Clone, Debug, PartialEq)]
pub enum LambdaRule {
    /// `1 / ln(k + 1)`.
    InvLog,
    /// `1 / sqrt(k)`.
    InvSqrt,
    /// `c / ln(k + 1)`.
    ConstTimesInvLog(f64),
    /// Identically zero; routes unperturbed runs through the perturbed code path.
    Zero,
}

impl LambdaRule {
    pub fn value(&self, k: u64) -> f64 {
        debug_assert!(k >= 1);
        match self {
            LambdaRule::InvLog => 1.0 / ((k + 1) as f64).ln(),
            LambdaRule::InvSqrt => 1.0 / (k as f64).sqrt(),
            LambdaRule::ConstTimesInvLog(c) => c / ((k + 1) as f64).ln(),
            LambdaRule::Zero => 0.0,
        }
    }
}

impl fmt::Display for LambdaRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaRule::InvLog => write!(f, "inv_log"),
            LambdaRule::InvSqrt => write!(f, "inv_sqrt"),
            LambdaRule::ConstTimesInvLog(c) => write!(f, "const_times_inv_log({c})"),
            LambdaRule::Zero => write!(f, "zero"),
        }
    }
}

impl FromStr for LambdaRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "inv_log" {
            return Ok(LambdaRule::InvLog);
        }
        if s == "inv_sqrt" {
            return Ok(LambdaRule::InvSqrt);
        }
        if s == "zero" {
            return Ok(LambdaRule::Zero);
        }
        if let Some(inner) = s
            .strip_prefix("const_times_inv_log(")
            .and_then(|r| r.strip_suffix(')'))
        {
            let c: f64 = inner
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad constant in lambda rule: {s:?}")))?;
            if !c.is_finite() {
                return Err(Error::invalid(format!("non-finite constant in {s:?}")));
            }
            return Ok(LambdaRule::ConstTimesInvLog(c));
        }
        Err(Error::invalid(format!(
            "unknown lambda rule {s:?}; expected inv_log, inv_sqrt, const_times_inv_log(c), or zero"
        )))
    }
}

/// Positions `n_k = floor(k^(1/(1-beta)+eps))` for `k = 1..`, deduplicated so
/// the result is strictly increasing. Gaps grow like `k^(p-1)` while windows
/// `n_k^beta` grow like `k^(p*beta)`; the exponent `p = 1/(1-beta) + eps`
/// makes the ratio diverge like `k^(eps(1-beta))`, so the sequence is
/// beta-spaced for every positive `eps`.
pub fn beta_spaced_sequence(beta: f64, eps: f64, count: usize) -> Result<Vec<u64>> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid(format!(
            "beta must lie in (0,1), got {beta}"
        )));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let p = 1.0 / (1.0 - beta) + eps;
    let mut out = Vec::with_capacity(count);
    let mut k = 1u64;
    while out.len() < count {
        let pos = (k as f64).powf(p);
        if !(pos < MAX_POSITION as f64) {
            return Err(Error::invalid(format!(
                "position floor({k}^{p}) exceeds 2^53; request fewer than {count} sites"
            )));
        }
        let pos = pos.floor() as u64;
        if out.last().map_or(true, |&last| pos > last) {
            out.push(pos);
        }
        k += 1;
    }
    Ok(out)
}

/// Outcome of a spacing check: gaps `n_{k+1} - n_k` compared against
/// `m_const * n_k^beta` for all sites at or above [`SPACING_CHECK_START`].
#[derive(Clone, Debug)]
pub struct SpacingReport {
    pub spaced: bool,
    /// First offending pair `(n_k, n_{k+1})`, if any.
    pub first_violation: Option<(u64, u64)>,
    /// Minimum of `gap / (m_const * n_k^beta)` over checked pairs;
    /// `> 1` iff spaced. Infinite when nothing was checked.
    pub margin: f64,
}

/// Checks whether a strictly increasing position slice is beta-spaced with the
/// given constant. The caller fixes the verification horizon by how many
/// positions it passes in.
pub fn is_beta_spaced(positions: &[u64], beta: f64, m_const: f64) -> Result<SpacingReport> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid(format!(
            "beta must lie in (0,1), got {beta}"
        )));
    }
    if !(m_const > 0.0) || !m_const.is_finite() {
        return Err(Error::invalid(format!(
            "spacing constant must be positive, got {m_const}"
        )));
    }
    let mut margin = f64::INFINITY;
    let mut first_violation = None;
    for w in positions.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi <= lo {
            return Err(Error::invalid(format!(
                "positions must be strictly increasing, got {lo} before {hi}"
            )));
        }
        if lo < SPACING_CHECK_START {
            continue;
        }
        let required = m_const * (lo as f64).powf(beta);
        let ratio = (hi - lo) as f64 / required;
        if ratio < margin {
            margin = ratio;
        }
        if ratio < 1.0 && first_violation.is_none() {
            first_violation = Some((lo, hi));
        }
    }
    Ok(SpacingReport {
        spaced: first_violation.is_none(),
        first_violation,
        margin,
    })
}

/// Sparse diagonal perturbation: couplings `values[i]` at 1-based sites
/// `positions[i]`, tagged with the spacing exponent the support is meant to
/// satisfy.
#[derive(Clone, Debug)]
pub struct SparsePerturbation {
    positions: Vec<u64>,
    values: Vec<f64>,
    beta: f64,
}

impl SparsePerturbation {
    pub fn new(positions: Vec<u64>, values: Vec<f64>, beta: f64) -> Result<Self> {
        if positions.len() != values.len() {
            return Err(Error::invalid(format!(
                "{} positions but {} values",
                positions.len(),
                values.len()
            )));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::invalid(format!(
                "beta must lie in (0,1], got {beta}"
            )));
        }
        for w in positions.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid(format!(
                    "positions must be strictly increasing, got {} before {}",
                    w[0], w[1]
                )));
            }
        }
        if positions.first().is_some_and(|&p| p == 0) {
            return Err(Error::invalid("sites are 1-based; position 0 is invalid"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("perturbation values must be finite"));
        }
        Ok(SparsePerturbation {
            positions,
            values,
            beta,
        })
    }

    /// Couplings `lambda_k = rule(k)` on the given support.
    pub fn from_rule(rule: &LambdaRule, positions: Vec<u64>, beta: f64) -> Result<Self> {
        let values = (1..=positions.len() as u64)
            .map(|k| rule.value(k))
            .collect();
        SparsePerturbation::new(positions, values, beta)
    }

    /// Support `floor(k^(1/(1-beta)+eps))` capped at `horizon`, couplings from
    /// `rule`.
    pub fn power_law(beta: f64, eps: f64, rule: &LambdaRule, horizon: u64) -> Result<Self> {
        // Generous first guess; the cap below trims to the horizon.
        let p = 1.0 / (1.0 - beta) + eps;
        let count = ((horizon as f64).powf(1.0 / p).ceil() as usize + 2).max(2);
        let mut positions = beta_spaced_sequence(beta, eps, count)?;
        positions.retain(|&pos| pos <= horizon);
        SparsePerturbation::from_rule(rule, positions, beta)
    }

    /// Doubly-exponential support `n_k = 2^(k^2)` with slowly decaying
    /// couplings `1/sqrt(ln(k+2))`: summable against no power of `n_k`, yet
    /// beta-spaced for every exponent. Capped at `horizon`.
    pub fn kls_singular(horizon: u64) -> Result<Self> {
        let mut positions = Vec::new();
        let mut values = Vec::new();
        let mut k = 1u64;
        loop {
            let exp = k * k;
            if exp >= 53 {
                break;
            }
            let pos = 1u64 << exp;
            if pos > horizon {
                break;
            }
            positions.push(pos);
            values.push(1.0 / ((k + 2) as f64).ln().sqrt());
            k += 1;
        }
        SparsePerturbation::new(positions, values, 1.0)
    }

    pub fn positions(&self) -> &[u64] {
        &self.positions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Coupling at a site, zero off the support.
    pub fn value_at(&self, site: u64) -> f64 {
        match self.positions.binary_search(&site) {
            Ok(i) => self.values[i],
            Err(_) => 0.0,
        }
    }

    pub fn max_abs_value(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// A (possibly perturbed) Jacobi operator, evaluable entrywise at any site.
#[derive(Clone, Debug)]
pub struct JacobiOperator {
    coeffs: RecurrenceCoefficients,
    perturbation: Option<SparsePerturbation>,
}

impl JacobiOperator {
    pub fn new(coeffs: RecurrenceCoefficients) -> Self {
        JacobiOperator {
            coeffs,
            perturbation: None,
        }
    }

    pub fn with_perturbation(coeffs: RecurrenceCoefficients, pert: SparsePerturbation) -> Self {
        JacobiOperator {
            coeffs,
            perturbation: Some(pert),
        }
    }

    pub fn free() -> Self {
        JacobiOperator::new(RecurrenceCoefficients::free())
    }

    pub fn coefficients(&self) -> &RecurrenceCoefficients {
        &self.coeffs
    }

    pub fn perturbation(&self) -> Option<&SparsePerturbation> {
        self.perturbation.as_ref()
    }

    /// Diagonal entry at site `k >= 1`, perturbation included.
    pub fn diagonal(&self, k: u64) -> f64 {
        let base = self.coeffs.b(k);
        match &self.perturbation {
            Some(p) => base + p.value_at(k),
            None => base,
        }
    }

    /// Coupling between sites `k` and `k+1`.
    pub fn offdiagonal(&self, k: u64) -> f64 {
        self.coeffs.a(k)
    }

    pub fn norm_bound(&self) -> f64 {
        let base = self.coeffs.norm_bound();
        match &self.perturbation {
            Some(p) => base + p.max_abs_value(),
            None => base,
        }
    }

    /// Finite section on sites `lo ..= hi` (1-based, inclusive).
    pub fn truncate(&self, lo: u64, hi: u64) -> Result<TruncatedJacobi> {
        if lo == 0 {
            return Err(Error::invalid("sites are 1-based; lo must be >= 1"));
        }
        if hi < lo {
            return Err(Error::invalid(format!(
                "empty truncation: lo = {lo}, hi = {hi}"
            )));
        }
        let size = (hi - lo + 1) as usize;
        let mut diag = Vec::with_capacity(size);
        let mut offdiag = Vec::with_capacity(size.saturating_sub(1));
        for k in lo..=hi {
            diag.push(self.diagonal(k));
            if k < hi {
                offdiag.push(self.offdiagonal(k));
            }
        }
        Ok(TruncatedJacobi {
            origin: lo,
            diag,
            offdiag,
        })
    }
}

/// Finite section of a Jacobi operator. Row/column `i` (0-based) corresponds
/// to operator site `origin + i`.
#[derive(Clone, Debug)]
pub struct TruncatedJacobi {
    origin: u64,
    diag: Vec<f64>,
    offdiag: Vec<f64>,
}

impl TruncatedJacobi {
    pub fn from_parts(origin: u64, diag: Vec<f64>, offdiag: Vec<f64>) -> Result<Self> {
        if origin == 0 {
            return Err(Error::invalid("sites are 1-based; origin must be >= 1"));
        }
        if diag.is_empty() {
            return Err(Error::invalid("empty truncation"));
        }
        if offdiag.len() + 1 != diag.len() {
            return Err(Error::invalid(format!(
                "size mismatch: {} diagonal entries need {} couplings, got {}",
                diag.len(),
                diag.len() - 1,
                offdiag.len()
            )));
        }
        Ok(TruncatedJacobi {
            origin,
            diag,
            offdiag,
        })
    }

    pub fn size(&self) -> usize {
        self.diag.len()
    }

    pub fn origin(&self) -> u64 {
        self.origin
    }

    /// Operator site of matrix row `i`.
    pub fn site(&self, i: usize) -> u64 {
        self.origin + i as u64
    }

    /// Matrix row of an operator site, if covered.
    pub fn index_of(&self, site: u64) -> Option<usize> {
        if site >= self.origin && site < self.origin + self.size() as u64 {
            Some((site - self.origin) as usize)
        } else {
            None
        }
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn offdiag(&self) -> &[f64] {
        &self.offdiag
    }

    pub fn diag_mut(&mut self) -> &mut [f64] {
        &mut self.diag
    }

    pub fn offdiag_mut(&mut self) -> &mut [f64] {
        &mut self.offdiag
    }

    /// Largest row sum, an operator-norm bound for the section.
    pub fn norm_bound(&self) -> f64 {
        let n = self.size();
        let mut best = 0.0f64;
        for i in 0..n {
            let mut row = self.diag[i].abs();
            if i > 0 {
                row += self.offdiag[i - 1].abs();
            }
            if i + 1 < n {
                row += self.offdiag[i].abs();
            }
            best = best.max(row);
        }
        best
    }
}

/// Coordinate projection onto operator sites `lo ..= hi` (1-based, inclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectionWindow {
    pub lo: u64,
    pub hi: u64,
}

impl ProjectionWindow {
    pub fn new(lo: u64, hi: u64) -> Result<Self> {
        if lo == 0 {
            return Err(Error::invalid("sites are 1-based; lo must be >= 1"));
        }
        if hi < lo {
            return Err(Error::invalid(format!(
                "empty window: lo = {lo}, hi = {hi}"
            )));
        }
        Ok(ProjectionWindow { lo, hi })
    }

    /// The rank-`n` projection onto sites `1 ..= n` whose range carries the
    /// `n`-point ensemble.
    pub fn first_n(n: u64) -> Result<Self> {
        ProjectionWindow::new(1, n)
    }

    /// Window from real level endpoints: sites `floor(l1) ..= floor(l2) + 1`,
    /// one site of slack on each side of the real interval.
    pub fn from_real_levels(l1: f64, l2: f64) -> Result<Self> {
        if !(l1.is_finite() && l2.is_finite()) || l1 >= l2 {
            return Err(Error::invalid(format!(
                "need finite l1 < l2, got l1 = {l1}, l2 = {l2}"
            )));
        }
        if l1 < 1.0 {
            return Err(Error::invalid(format!("window start {l1} is below site 1")));
        }
        if l2 >= (MAX_POSITION - 1) as f64 {
            return Err(Error::invalid(format!("window end {l2} exceeds 2^53")));
        }
        ProjectionWindow::new(l1.floor() as u64, l2.floor() as u64 + 1)
    }

    pub fn len(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees lo <= hi
    }

    pub fn contains(&self, site: u64) -> bool {
        site >= self.lo && site <= self.hi
    }

    /// Row range of this window inside a truncation, if fully covered.
    pub fn index_range(&self, t: &TruncatedJacobi) -> Result<std::ops::Range<usize>> {
        match (t.index_of(self.lo), t.index_of(self.hi)) {
            (Some(a), Some(b)) => Ok(a..b + 1),
            _ => Err(Error::invalid(format!(
                "window [{}, {}] not covered by truncation [{}, {}]",
                self.lo,
                self.hi,
                t.origin(),
                t.site(t.size() - 1)
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_coefficients() {
        let c = RecurrenceCoefficients::free();
        assert_eq!(c.a(1), 1.0);
        assert_eq!(c.b(7), 0.0);
        assert_eq!(c.norm_bound(), 2.0);
    }

    #[test]
    fn constant_coefficients_validate() {
        assert!(RecurrenceCoefficients::constant(0.0, 1.0).is_err());
        assert!(RecurrenceCoefficients::constant(1.0, f64::NAN).is_err());
        let c = RecurrenceCoefficients::constant(0.5, -1.0).unwrap();
        assert_eq!(c.a(3), 0.5);
        assert_eq!(c.b(3), -1.0);
        assert_eq!(c.norm_bound(), 2.0);
    }

    #[test]
    fn lambda_rules_round_trip() {
        for s in ["inv_log", "inv_sqrt", "const_times_inv_log(0.25)", "zero"] {
            let rule: LambdaRule = s.parse().unwrap();
            assert_eq!(rule.to_string(), s);
        }
        assert!("inv_cube".parse::<LambdaRule>().is_err());
        assert!("const_times_inv_log(x)".parse::<LambdaRule>().is_err());
    }

    #[test]
    fn lambda_rule_values() {
        assert!((LambdaRule::InvLog.value(1) - 1.0 / 2f64.ln()).abs() < 1e-15);
        assert!((LambdaRule::InvSqrt.value(4) - 0.5).abs() < 1e-15);
        assert!((LambdaRule::ConstTimesInvLog(3.0).value(1) - 3.0 / 2f64.ln()).abs() < 1e-15);
        assert_eq!(LambdaRule::Zero.value(10), 0.0);
    }

    #[test]
    fn beta_spaced_sequence_frozen_prefix() {
        // Exponent 1/(1-0.5) + 0.1 = 2.1.
        assert_eq!(beta_spaced_sequence(0.5, 0.1, 3).unwrap(), vec![1, 4, 10]);
        assert_eq!(beta_spaced_sequence(0.5, 0.1, 1).unwrap(), vec![1]);
        // Exponent 1/(1-0.6) + 0.05 = 2.55; includes 997 = floor(15^2.55).
        let seq = beta_spaced_sequence(0.6, 0.05, 15).unwrap();
        assert_eq!(
            seq,
            vec![1, 5, 16, 34, 60, 96, 142, 200, 271, 354, 452, 564, 692, 836, 997]
        );
    }

    #[test]
    fn beta_spaced_sequence_strictly_increasing_after_dedup() {
        for (beta, eps) in [(0.05, 0.01), (0.3, 0.05), (0.6, 0.05)] {
            let seq = beta_spaced_sequence(beta, eps, 200).unwrap();
            assert!(seq.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn beta_spaced_sequence_rejects_bad_params() {
        assert!(beta_spaced_sequence(0.0, 0.1, 5).is_err());
        assert!(beta_spaced_sequence(1.0, 0.1, 5).is_err());
        assert!(beta_spaced_sequence(0.5, 0.0, 5).is_err());
    }

    #[test]
    fn beta_spaced_sequence_overflow_guard() {
        // p = 10.1: k = 38 already passes 2^53.
        let err = beta_spaced_sequence(0.9, 0.1, 200).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn spacing_check_accepts_spaced_and_reports_margin() {
        let seq = beta_spaced_sequence(0.4, 0.02, 60).unwrap();
        let report = is_beta_spaced(&seq, 0.4, 1.0).unwrap();
        assert!(report.spaced, "margin = {}", report.margin);
        assert!(report.margin > 1.0);

        // The same construction holds with a larger constant at beta = 0.6.
        let seq = beta_spaced_sequence(0.6, 0.05, 50).unwrap();
        let report = is_beta_spaced(&seq, 0.6, 2.0).unwrap();
        assert!(report.spaced, "margin = {}", report.margin);
    }

    #[test]
    fn spacing_check_flags_violation() {
        // Gap 120 -> 130 is far below 2 * 120^0.9.
        let report = is_beta_spaced(&[120, 130, 5000], 0.9, 2.0).unwrap();
        assert!(!report.spaced);
        assert_eq!(report.first_violation, Some((120, 130)));
        assert!(report.margin < 1.0);
    }

    #[test]
    fn spacing_check_ignores_small_sites() {
        // Dense below SPACING_CHECK_START, fine above.
        let report = is_beta_spaced(&[2, 3, 4, 5000, 10000], 0.5, 1.0).unwrap();
        assert!(report.spaced);
    }

    #[test]
    fn kls_singular_support() {
        let p = SparsePerturbation::kls_singular(1_000_000).unwrap();
        assert_eq!(p.positions(), &[2, 16, 512, 65536]);
        assert!((p.value_at(512) - 1.0 / 5f64.ln().sqrt()).abs() < 1e-15);
        assert_eq!(p.value_at(3), 0.0);
        // Spaced for any beta despite non-summable couplings.
        assert!(is_beta_spaced(p.positions(), 0.99, 4.0).unwrap().spaced);
    }

    #[test]
    fn power_law_support_respects_horizon() {
        let p = SparsePerturbation::power_law(0.6, 0.05, &LambdaRule::InvLog, 1000).unwrap();
        assert_eq!(p.positions().last(), Some(&997));
        assert_eq!(p.positions().len(), 15);
        assert!((p.value_at(997) - 1.0 / 16f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perturbation_validation() {
        assert!(SparsePerturbation::new(vec![3, 3], vec![1.0, 1.0], 0.5).is_err());
        assert!(SparsePerturbation::new(vec![0], vec![1.0], 0.5).is_err());
        assert!(SparsePerturbation::new(vec![1], vec![f64::INFINITY], 0.5).is_err());
        assert!(SparsePerturbation::new(vec![1, 2], vec![1.0], 0.5).is_err());
    }

    #[test]
    fn operator_entries_include_perturbation() {
        let pert = SparsePerturbation::new(vec![5, 11], vec![0.7, -0.2], 0.5).unwrap();
        let j = JacobiOperator::with_perturbation(RecurrenceCoefficients::free(), pert);
        assert_eq!(j.diagonal(4), 0.0);
        assert_eq!(j.diagonal(5), 0.7);
        assert_eq!(j.diagonal(11), -0.2);
        assert_eq!(j.offdiagonal(5), 1.0);
        assert_eq!(j.norm_bound(), 2.7);
    }

    #[test]
    fn truncation_covers_requested_sites() {
        let pert = SparsePerturbation::new(vec![5], vec![0.7], 0.5).unwrap();
        let j = JacobiOperator::with_perturbation(RecurrenceCoefficients::free(), pert);
        let t = j.truncate(3, 8).unwrap();
        assert_eq!(t.size(), 6);
        assert_eq!(t.origin(), 3);
        assert_eq!(t.site(0), 3);
        assert_eq!(t.index_of(5), Some(2));
        assert_eq!(t.index_of(9), None);
        assert_eq!(t.diag(), &[0.0, 0.0, 0.7, 0.0, 0.0, 0.0]);
        assert_eq!(t.offdiag().len(), 5);
        assert!((t.norm_bound() - 2.7).abs() < 1e-15);
    }

    #[test]
    fn truncation_rejects_bad_ranges() {
        let j = JacobiOperator::free();
        assert!(j.truncate(0, 5).is_err());
        assert!(j.truncate(5, 4).is_err());
    }

    #[test]
    fn window_from_real_levels() {
        // floor(l1) .. floor(l2) + 1 with both endpoints included.
        let w = ProjectionWindow::from_real_levels(10.3, 20.9).unwrap();
        assert_eq!((w.lo, w.hi), (10, 21));
        assert_eq!(w.len(), 12);
        assert!(w.contains(10) && w.contains(21) && !w.contains(22));
        assert!(ProjectionWindow::from_real_levels(20.0, 10.0).is_err());
        assert!(ProjectionWindow::from_real_levels(0.2, 10.0).is_err());
    }

    #[test]
    fn window_index_range() {
        let j = JacobiOperator::free();
        let t = j.truncate(10, 30).unwrap();
        let w = ProjectionWindow::new(12, 15).unwrap();
        assert_eq!(w.index_range(&t).unwrap(), 2..6);
        let outside = ProjectionWindow::new(29, 31).unwrap();
        assert!(outside.index_range(&t).is_err());
    }
}
