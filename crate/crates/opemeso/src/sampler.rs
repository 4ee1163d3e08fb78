//! Exact sampling of orthogonal polynomial ensembles and Monte Carlo
//! estimation of linear-statistic cumulants.
//!
//! The ensemble of `n` points with joint density proportional to
//! `prod_{i<j} (x_i - x_j)^2 prod_k w(x_k)` is the determinantal projection
//! process of the Christoffel-Darboux kernel built from the orthonormal
//! polynomials of `w`. The sampler draws it exactly by the sequential
//! conditional algorithm for projection kernels: each point comes from the
//! current conditional intensity, and the kernel is deflated by the sampled
//! direction before the next draw. Everything downstream of the deterministic
//! trace formulas can therefore be cross-checked against simple averages
//! over independent samples.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use ndarray::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cumulants::{gauss_legendre, TestFunction};
use crate::jacobi::JacobiOperator;
use crate::{Error, Result};

/// Number of envelope cells across the support.
const ENVELOPE_CELLS: usize = 2048;
/// Conditional-density probes per cell when building the envelope.
const PROBES_PER_CELL: usize = 8;
/// Headroom multiplier on the probed cell maximum.
const ENVELOPE_MARGIN: f64 = 1.2;
/// Overflow threshold for polynomial evaluation.
const POLY_OVERFLOW: f64 = 1e300;

/// An absolutely continuous reference measure: a density on a compact
/// support paired with the operator whose spectral measure it is, so that
/// polynomial recurrences and sampling always agree on which measure is
/// meant. Construction verifies normalization by quadrature.
#[derive(Clone)]
pub struct MeasureDensity {
    label: String,
    density: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    support: (f64, f64),
    normalization: f64,
    operator: JacobiOperator,
}

impl fmt::Debug for MeasureDensity {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        fm.debug_struct("MeasureDensity")
            .field("label", &self.label)
            .field("support", &self.support)
            .field("normalization", &self.normalization)
            .finish()
    }
}

impl MeasureDensity {
    /// Wrap a density with its support and recurrence source. The density
    /// must be nonnegative on the support and integrate to `1` within
    /// `1e-8`; the integral is checked with a high-order rule whose
    /// refinement error is reported if it fails.
    pub fn new(
        label: impl Into<String>,
        density: impl Fn(f64) -> f64 + Send + Sync + 'static,
        support: (f64, f64),
        operator: JacobiOperator,
    ) -> Result<Self> {
        let (lo, hi) = support;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!(
                "support [{lo}, {hi}] is not a bounded interval"
            )));
        }
        let quad = |m: usize| -> Result<f64> {
            let (nodes, weights) = gauss_legendre(m);
            let mut total = 0.0;
            for (&t, &w) in nodes.iter().zip(&weights) {
                let x = 0.5 * (hi + lo) + 0.5 * (hi - lo) * t;
                let d = density(x);
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::invalid(format!(
                        "density is {d} at x = {x}; must be finite and nonnegative"
                    )));
                }
                total += w * 0.5 * (hi - lo) * d;
            }
            Ok(total)
        };
        let coarse = quad(500)?;
        let normalization = quad(1000)?;
        if (normalization - 1.0).abs() > 1e-8 {
            return Err(Error::invalid(format!(
                "density integrates to {normalization} (refinement moved it by {:.2e}), \
                 expected 1 within 1e-8",
                (normalization - coarse).abs()
            )));
        }
        Ok(Self {
            label: label.into(),
            density: Arc::new(density),
            support,
            normalization,
            operator,
        })
    }

    /// The semicircle measure `sqrt(4 - x^2) / (2 pi)` on `[-2, 2]`, the
    /// spectral measure of the free operator (`a = 1`, `b = 0`). Its
    /// orthonormal polynomials are the rescaled second-kind Chebyshev
    /// polynomials `U_k(x / 2)`.
    pub fn semicircle() -> Self {
        Self::new(
            "semicircle",
            |x| (4.0 - x * x).max(0.0).sqrt() / (2.0 * std::f64::consts::PI),
            (-2.0, 2.0),
            JacobiOperator::free(),
        )
        .expect("semicircle normalizes")
    }

    /// Density value; zero outside the support.
    pub fn density_at(&self, x: f64) -> f64 {
        if x < self.support.0 || x > self.support.1 {
            0.0
        } else {
            (self.density)(x)
        }
    }

    /// Support interval.
    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    /// Value of the normalization integral computed at construction.
    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    /// Identifier used in serialized metadata.
    pub fn label(&self) -> &str {
        &self.label
    }

    /// The operator whose recurrence generates the orthonormal polynomials.
    pub fn operator(&self) -> &JacobiOperator {
        &self.operator
    }
}

/// Evaluate the orthonormal polynomials `p_0(x), .., p_{n-1}(x)` by the
/// forward three-term recurrence
/// `x p_k = a_{k+1} p_{k+1} + b_{k+1} p_k + a_k p_{k-1}`
/// with the coefficients of `op` (sites are 1-based, so `p_k` lives at site
/// `k + 1`). Reports the first index whose value overflows `1e300`.
pub fn eval_polys(x: f64, n: usize, op: &JacobiOperator) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("need at least one polynomial"));
    }
    let mut p = Vec::with_capacity(n);
    p.push(1.0);
    if n == 1 {
        return Ok(p);
    }
    let mut prev = 0.0; // p_{-1}
    let mut cur = 1.0;
    for k in 0..(n - 1) {
        let site = k as u64 + 1;
        let a_next = op.offdiagonal(site);
        let a_prev = if k == 0 {
            0.0
        } else {
            op.offdiagonal(site - 1)
        };
        let next = ((x - op.diagonal(site)) * cur - a_prev * prev) / a_next;
        if next.abs() > POLY_OVERFLOW {
            return Err(Error::numerical(format!(
                "polynomial evaluation overflowed at index {} (x = {x})",
                k + 1
            )));
        }
        prev = cur;
        cur = next;
        p.push(cur);
    }
    Ok(p)
}

/// Christoffel-Darboux kernel `K_n(x, y) = sum_{k<n} p_k(x) p_k(y)`.
pub fn cd_kernel(x: f64, y: f64, n: usize, op: &JacobiOperator) -> Result<f64> {
    let px = eval_polys(x, n, op)?;
    if x == y {
        return Ok(px.iter().map(|v| v * v).sum());
    }
    let py = eval_polys(y, n, op)?;
    Ok(px.iter().zip(&py).map(|(a, b)| a * b).sum())
}

/// Ratio `K_n(x + a/n, x + b/n) / K_n(x, x)` probing the microscopic kernel
/// limit: in the bulk it approaches the sine kernel
/// `sin((b - a) / sqrt(4 - x^2)) / ((b - a) / sqrt(4 - x^2))` for the free
/// coefficients. No claim is attached beyond what the numbers show; the
/// function simply evaluates the ratio.
pub fn sine_ratio(x: f64, a: f64, b: f64, n: usize, op: &JacobiOperator) -> Result<f64> {
    let nf = n as f64;
    let reach = a.abs().max(b.abs()) / nf;
    if !(x - reach > -2.0 && x + reach < 2.0) {
        return Err(Error::invalid(format!(
            "evaluation points around {x} leave the open interval (-2, 2)"
        )));
    }
    let kxx = cd_kernel(x, x, n, op)?;
    if kxx < 1e-300 {
        return Err(Error::numerical(format!(
            "diagonal kernel value {kxx} at x = {x} is too small to divide by"
        )));
    }
    Ok(cd_kernel(x + a / nf, x + b / nf, n, op)? / kxx)
}

/// Mesoscopic linear statistic `sum_k f(n^gamma (x_k - x0))` where `n` is
/// the number of points. `gamma = 0` gives the macroscopic statistic.
pub fn linear_statistic(points: &[f64], f: &TestFunction, gamma: f64, x0: f64) -> f64 {
    let scale = (points.len() as f64).powf(gamma);
    points.iter().map(|&x| f.eval(scale * (x - x0))).sum()
}

/// Precomputed sampling context: polynomial values on the global probe grid
/// used to build rejection envelopes, shared by every sample.
struct SamplerContext<'a> {
    mu: &'a MeasureDensity,
    n: usize,
    cell_width: f64,
    /// Probe abscissas, `ENVELOPE_CELLS * PROBES_PER_CELL` of them.
    probe_x: Vec<f64>,
    /// `phi[(g, k)] = p_k(probe_x[g])`.
    phi: Array2<f64>,
    /// `sum_k p_k(probe)^2`, the unconditioned kernel diagonal.
    ksum: Vec<f64>,
    /// Density at the probes.
    rho: Vec<f64>,
}

impl<'a> SamplerContext<'a> {
    fn new(mu: &'a MeasureDensity, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("cannot sample an empty configuration"));
        }
        let (lo, hi) = mu.support();
        let cell_width = (hi - lo) / ENVELOPE_CELLS as f64;
        let total_probes = ENVELOPE_CELLS * PROBES_PER_CELL;
        let mut probe_x = Vec::with_capacity(total_probes);
        for c in 0..ENVELOPE_CELLS {
            for p in 0..PROBES_PER_CELL {
                probe_x
                    .push(lo + (c as f64 + (p as f64 + 0.5) / PROBES_PER_CELL as f64) * cell_width);
            }
        }
        let mut phi = Array2::zeros((total_probes, n));
        let mut ksum = vec![0.0; total_probes];
        for (g, &x) in probe_x.iter().enumerate() {
            let p = eval_polys(x, n, mu.operator())?;
            ksum[g] = p.iter().map(|v| v * v).sum();
            for (k, &v) in p.iter().enumerate() {
                phi[(g, k)] = v;
            }
        }
        let rho = probe_x.iter().map(|&x| mu.density_at(x)).collect();
        Ok(Self {
            mu,
            n,
            cell_width,
            probe_x,
            phi,
            ksum,
            rho,
        })
    }

    /// Draw one configuration, sorted ascending.
    fn sample_one(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let n = self.n;
        let total_probes = self.probe_x.len();
        let lo = self.mu.support().0;
        // Orthonormal basis of the already-sampled directions, row per point.
        let mut basis = Array2::<f64>::zeros((n, n));
        // Squared projection of phi(probe) onto that basis.
        let mut proj_probe = vec![0.0f64; total_probes];
        let mut raw = vec![0.0f64; ENVELOPE_CELLS];
        let mut heights = vec![0.0f64; ENVELOPE_CELLS];
        let mut cumulative = vec![0.0f64; ENVELOPE_CELLS];
        let mut points = Vec::with_capacity(n);

        for step in 0..n {
            let remaining = (n - step) as f64;
            // Piecewise-constant envelope over the cells from the probes.
            for c in 0..ENVELOPE_CELLS {
                let mut peak = 0.0f64;
                for p in 0..PROBES_PER_CELL {
                    let g = c * PROBES_PER_CELL + p;
                    let d = (self.ksum[g] - proj_probe[g]).max(0.0) * self.rho[g] / remaining;
                    peak = peak.max(d);
                }
                raw[c] = peak;
            }
            // Deflation digs quadratic zeros into the conditional density: a
            // cell holding one probes nearly nothing while the density rises
            // to the neighbors' level at its edges. Widening every peak over
            // the adjacent cells keeps the envelope above those edges.
            for c in 0..ENVELOPE_CELLS {
                let left = raw[c.saturating_sub(1)];
                let right = raw[(c + 1).min(ENVELOPE_CELLS - 1)];
                heights[c] = ENVELOPE_MARGIN * raw[c].max(left).max(right);
            }
            let mut acc = 0.0;
            for c in 0..ENVELOPE_CELLS {
                acc += heights[c] * self.cell_width;
                cumulative[c] = acc;
            }
            let total = acc;
            if !(total > 0.0) {
                return Err(Error::numerical(format!(
                    "conditional density vanished on the whole support at step {step}"
                )));
            }

            let (x, p_at_x) = loop {
                let u = rng.gen_range(0.0..total);
                let c = cumulative
                    .partition_point(|&v| v < u)
                    .min(ENVELOPE_CELLS - 1);
                let x = lo + c as f64 * self.cell_width + rng.gen_range(0.0..self.cell_width);
                let p = eval_polys(x, n, self.mu.operator())?;
                let mut proj = 0.0;
                for j in 0..step {
                    let dot: f64 = basis.row(j).iter().zip(&p).map(|(b, v)| b * v).sum();
                    proj += dot * dot;
                }
                let norm2: f64 = p.iter().map(|v| v * v).sum();
                let d = (norm2 - proj).max(0.0) * self.mu.density_at(x) / remaining;
                let ratio = d / heights[c];
                if ratio > 1.0 {
                    // The envelope is supposed to dominate; a violation means
                    // the probe grid missed a peak and the draw is biased.
                    return Err(Error::numerical(format!(
                        "envelope violation at step {step}: acceptance ratio {ratio:.6}"
                    )));
                }
                if rng.gen_range(0.0..1.0) < ratio {
                    break (x, p);
                }
            };
            points.push(x);

            // Gram-Schmidt the new direction against the basis, then once
            // more to clean up the drift, before normalizing.
            let mut v = Array1::from(p_at_x);
            for _ in 0..2 {
                for j in 0..step {
                    let dot = basis.row(j).dot(&v);
                    let row = basis.row(j).to_owned();
                    v.scaled_add(-dot, &row);
                }
            }
            let norm = v.dot(&v).sqrt();
            if norm < 1e-12 {
                return Err(Error::numerical(format!(
                    "sampled direction degenerated at step {step}"
                )));
            }
            v /= norm;
            // Deflate the probe densities by the new direction.
            let w = self.phi.dot(&v);
            for (pp, &wi) in proj_probe.iter_mut().zip(w.iter()) {
                *pp += wi * wi;
            }
            basis.row_mut(step).assign(&v);
        }
        points.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
        Ok(points)
    }
}

/// Draw a single configuration of `n` points from the ensemble of `mu`.
/// Equals the first configuration of [`sample_batch`] with the same seed.
pub fn sample_ope(mu: &MeasureDensity, n: usize, seed: u64) -> Result<Vec<f64>> {
    let ctx = SamplerContext::new(mu, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    ctx.sample_one(&mut rng)
}

/// A batch of independent configurations with reproducible per-sample
/// random streams.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    measure: String,
    n: usize,
    master_seed: u64,
    /// `points[s]` is the sorted configuration of sample `s`.
    points: Vec<Vec<f64>>,
}

impl SampleBatch {
    /// Configurations in the batch.
    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// Points per configuration.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of configurations.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// True when the batch holds no configurations.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Master seed; sample `s` used random stream `s` derived from it.
    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Apply [`linear_statistic`] to every configuration.
    pub fn linear_statistics(&self, f: &TestFunction, gamma: f64, x0: f64) -> Vec<f64> {
        self.points
            .iter()
            .map(|pts| linear_statistic(pts, f, gamma, x0))
            .collect()
    }

    /// Write the points as CSV rows `(sample_id, point_index, value)`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(io_err)?;
        w.write_record(["sample_id", "point_index", "value"])
            .map_err(io_err)?;
        for (s, pts) in self.points.iter().enumerate() {
            for (i, &x) in pts.iter().enumerate() {
                w.write_record([s.to_string(), i.to_string(), format!("{x:.17e}")])
                    .map_err(io_err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Batch metadata as JSON: seed, size, and measure identifier.
    pub fn metadata_json(&self) -> serde_json::Value {
        serde_json::json!({
            "measure": self.measure,
            "n": self.n,
            "num_samples": self.points.len(),
            "master_seed": self.master_seed,
            "streams": "sample s uses ChaCha8 stream s of the master seed",
        })
    }
}

/// Draw `count` independent configurations. Sample `s` uses the ChaCha8
/// stream `s` of the master seed, so results do not depend on how the work
/// is scheduled across threads.
pub fn sample_batch(
    mu: &MeasureDensity,
    n: usize,
    count: usize,
    master_seed: u64,
) -> Result<SampleBatch> {
    if count == 0 {
        return Err(Error::invalid("batch needs at least one sample"));
    }
    let ctx = SamplerContext::new(mu, n)?;
    let points = (0..count)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
            rng.set_stream(s as u64);
            ctx.sample_one(&mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleBatch {
        measure: mu.label().to_string(),
        n,
        master_seed,
        points,
    })
}

/// A cumulant estimated from Monte Carlo values.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct CumulantEstimate {
    /// Cumulant order.
    pub order: u32,
    /// Unbiased k-statistic (standard cumulant convention, no factorials:
    /// order 2 estimates the variance itself).
    pub value: f64,
    /// Delete-one jackknife standard error.
    pub stderr: f64,
}

/// Unbiased cumulant estimates (k-statistics) of orders `1..=m_max` with
/// jackknife standard errors. Needs at least 100 values; `m_max <= 4`.
///
/// These are standard cumulants: to compare with the generating-function
/// coefficients used by the trace formula, divide by `m!` (the variance,
/// for instance, is `2 C_2`).
pub fn mc_cumulants(values: &[f64], m_max: u32) -> Result<Vec<CumulantEstimate>> {
    let n = values.len();
    if n < 100 {
        return Err(Error::invalid(format!(
            "{n} values are too few for cumulant estimation; need 100"
        )));
    }
    if m_max < 1 || m_max > 4 {
        return Err(Error::invalid(format!("order {m_max} outside 1..=4")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite Monte Carlo value"));
    }
    // Center on the global mean so the power sums do not cancel
    // catastrophically; k-statistics of order >= 2 are shift-invariant and
    // the mean is restored at the end.
    let shift = values.iter().sum::<f64>() / n as f64;
    let mut sums = [0.0f64; 4];
    for &v in values {
        let c = v - shift;
        let c2 = c * c;
        sums[0] += c;
        sums[1] += c2;
        sums[2] += c2 * c;
        sums[3] += c2 * c2;
    }

    // k-statistics of the centered data from raw power sums.
    let kstats = |s: [f64; 4], nf: f64| -> [f64; 4] {
        let mu = s[0] / nf;
        let m2 = s[1] / nf - mu * mu;
        let m3 = s[2] / nf - 3.0 * mu * s[1] / nf + 2.0 * mu * mu * mu;
        let m4 =
            s[3] / nf - 4.0 * mu * s[2] / nf + 6.0 * mu * mu * s[1] / nf - 3.0 * mu * mu * mu * mu;
        let k2 = nf / (nf - 1.0) * m2;
        let k3 = nf * nf / ((nf - 1.0) * (nf - 2.0)) * m3;
        let k4 = nf * nf * ((nf + 1.0) * m4 - 3.0 * (nf - 1.0) * m2 * m2)
            / ((nf - 1.0) * (nf - 2.0) * (nf - 3.0));
        [mu, k2, k3, k4]
    };
    let full = kstats(sums, n as f64);

    // Delete-one jackknife: each leave-out estimate is O(1) from the sums.
    let mut jack_mean = [0.0f64; 4];
    let mut jack_m2 = [0.0f64; 4];
    for (i, &v) in values.iter().enumerate() {
        let c = v - shift;
        let c2 = c * c;
        let s = [
            sums[0] - c,
            sums[1] - c2,
            sums[2] - c2 * c,
            sums[3] - c2 * c2,
        ];
        let k = kstats(s, (n - 1) as f64);
        // Streaming mean/variance of the jackknife replicates.
        let cnt = (i + 1) as f64;
        for j in 0..4 {
            let delta = k[j] - jack_mean[j];
            jack_mean[j] += delta / cnt;
            jack_m2[j] += delta * (k[j] - jack_mean[j]);
        }
    }
    let nf = n as f64;
    Ok((1..=m_max)
        .map(|order| {
            let j = order as usize - 1;
            let var = (nf - 1.0) / nf * jack_m2[j];
            CumulantEstimate {
                order,
                value: full[j] + if order == 1 { shift } else { 0.0 },
                stderr: var.max(0.0).sqrt(),
            }
        })
        .collect())
}
