//! Reproducible experiment runs.
//!
//! Each run consumes an [`ExperimentConfig`], exercises one pipeline from the
//! library, and produces a [`RunResult`]: a numeric table plus a pass/fail
//! verdict and provenance (config hash, seed, crate version). Rendering is
//! deterministic, so identical config and seed give bit-identical output
//! files. The `opemeso` binary exposes one subcommand per runner.

mod runs;

pub use runs::{
    run_clt_check, run_decoupling_check, run_hankel_scaling, run_mc_crosscheck,
    run_resolvent_validation, run_stability_sweep,
};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex64;
use serde::Serialize;

use crate::cumulants::TestFunction;
use crate::{Error, Result};

/// The six experiment pipelines, one per CLI subcommand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunKind {
    Resolvent,
    Decoupling,
    Hankel,
    Stability,
    Clt,
    Mc,
}

impl RunKind {
    pub fn name(self) -> &'static str {
        match self {
            RunKind::Resolvent => "resolvent",
            RunKind::Decoupling => "decoupling",
            RunKind::Hankel => "hankel",
            RunKind::Stability => "stability",
            RunKind::Clt => "clt",
            RunKind::Mc => "mc",
        }
    }

    pub fn all() -> [RunKind; 6] {
        [
            RunKind::Resolvent,
            RunKind::Decoupling,
            RunKind::Hankel,
            RunKind::Stability,
            RunKind::Clt,
            RunKind::Mc,
        ]
    }

    /// Dispatch to the runner for this kind.
    pub fn run(self, cfg: &ExperimentConfig) -> Result<RunResult> {
        match self {
            RunKind::Resolvent => run_resolvent_validation(cfg),
            RunKind::Decoupling => run_decoupling_check(cfg),
            RunKind::Hankel => run_hankel_scaling(cfg),
            RunKind::Stability => run_stability_sweep(cfg),
            RunKind::Clt => run_clt_check(cfg),
            RunKind::Mc => run_mc_crosscheck(cfg),
        }
    }
}

/// Flat key=value experiment description.
///
/// Every runner reads the subset of fields it needs and ignores the rest, so
/// one config file can drive several subcommands. `beta` and `beta_prime` are
/// optional because the resolvent and Monte Carlo runs have no perturbation;
/// when both are present the ordering `0 < gamma < beta_prime < beta < 1`
/// is enforced. `eps` is the spacing slack of the power-law support
/// `floor(k^(1/(1-beta)+eps))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub id: String,
    pub n_grid: Vec<u64>,
    pub gamma: f64,
    pub beta: Option<f64>,
    pub beta_prime: Option<f64>,
    pub eps: f64,
    pub x0: f64,
    pub eta: Complex64,
    pub test_function: String,
    pub lambda_rule: String,
    pub m_list: Vec<u32>,
    pub seed: u64,
    pub sample_count: usize,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Baseline parameters shared by every kind; the grid and id differ.
    pub fn default_for(kind: RunKind) -> Self {
        let n_grid = match kind {
            RunKind::Resolvent | RunKind::Decoupling => vec![500, 1000, 2000],
            RunKind::Hankel => vec![128, 256, 512, 1024, 2048, 4096, 8192],
            RunKind::Stability | RunKind::Clt => vec![500, 1000, 2000, 4000],
            RunKind::Mc => vec![1, 50],
        };
        let m_list = match kind {
            RunKind::Clt => vec![2, 3, 4],
            _ => vec![2, 3],
        };
        ExperimentConfig {
            id: kind.name().to_string(),
            n_grid,
            gamma: 0.3,
            beta: Some(0.6),
            beta_prime: Some(0.45),
            eps: 0.05,
            x0: 0.0,
            eta: Complex64::new(0.0, 1.0),
            test_function: "cauchy".to_string(),
            lambda_rule: "inv_log".to_string(),
            m_list,
            seed: 7,
            sample_count: 10_000,
            output: None,
        }
    }

    /// Parse a config file on top of the defaults for `kind`.
    pub fn from_file(path: &Path, kind: RunKind) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::default_for(kind);
        cfg.apply_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key = value` lines; `#` starts a comment, blank lines are
    /// skipped. Unknown keys are errors so typos cannot silently fall back to
    /// defaults.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                ))
            })?;
            self.apply_pair(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    fn apply_pair(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "id" => self.id = value.to_string(),
            "n_grid" => self.n_grid = parse_list(value, "n_grid")?,
            "gamma" => self.gamma = parse_f64(value, "gamma")?,
            "beta" => self.beta = parse_optional_f64(value, "beta")?,
            "beta_prime" => self.beta_prime = parse_optional_f64(value, "beta_prime")?,
            "eps" => self.eps = parse_f64(value, "eps")?,
            "x0" => self.x0 = parse_f64(value, "x0")?,
            "eta" => self.eta = parse_complex(value)?,
            "test_function" => self.test_function = value.to_string(),
            "lambda_rule" => self.lambda_rule = value.to_string(),
            "m_list" => self.m_list = parse_list(value, "m_list")?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::config(format!("bad seed {value:?}")))?
            }
            "sample_count" => {
                self.sample_count = value
                    .parse()
                    .map_err(|_| Error::config(format!("bad sample_count {value:?}")))?
            }
            "output" => {
                self.output = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::config("id must be nonempty"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config(format!(
                "gamma must lie in (0,1), got {}",
                self.gamma
            )));
        }
        for (name, v) in [("beta", self.beta), ("beta_prime", self.beta_prime)] {
            if let Some(v) = v {
                if !(v > 0.0 && v < 1.0) {
                    return Err(Error::config(format!("{name} must lie in (0,1), got {v}")));
                }
            }
        }
        if let (Some(b), Some(bp)) = (self.beta, self.beta_prime) {
            if !(self.gamma < bp && bp < b) {
                return Err(Error::config(format!(
                    "need gamma < beta_prime < beta, got {} / {bp} / {b}",
                    self.gamma
                )));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if !(self.x0 > -2.0 && self.x0 < 2.0) {
            return Err(Error::config(format!(
                "x0 must lie inside the bulk (-2, 2), got {}",
                self.x0
            )));
        }
        if self.eta.im == 0.0 || !self.eta.re.is_finite() || !self.eta.im.is_finite() {
            return Err(Error::config(format!(
                "eta must be finite with nonzero imaginary part, got {}",
                self.eta
            )));
        }
        if self.n_grid.is_empty() {
            return Err(Error::config("n_grid must be nonempty"));
        }
        if self.n_grid[0] == 0 {
            return Err(Error::config("n_grid entries must be >= 1"));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("n_grid must be strictly increasing"));
        }
        if self.m_list.is_empty() || self.m_list.iter().any(|&m| m == 0 || m > 6) {
            return Err(Error::config(format!(
                "m_list must be nonempty with orders in 1..=6, got {:?}",
                self.m_list
            )));
        }
        if self.sample_count == 0 {
            return Err(Error::config("sample_count must be >= 1"));
        }
        Ok(())
    }

    /// Canonical rendering used for hashing: fixed key order, shortest
    /// round-trip float formatting.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_else(|| "none".into());
        let _ = writeln!(s, "id={}", self.id);
        let _ = writeln!(s, "n_grid={}", join_list(&self.n_grid));
        let _ = writeln!(s, "gamma={:?}", self.gamma);
        let _ = writeln!(s, "beta={}", opt(self.beta));
        let _ = writeln!(s, "beta_prime={}", opt(self.beta_prime));
        let _ = writeln!(s, "eps={:?}", self.eps);
        let _ = writeln!(s, "x0={:?}", self.x0);
        let _ = writeln!(s, "eta={:?}+{:?}i", self.eta.re, self.eta.im);
        let _ = writeln!(s, "test_function={}", self.test_function);
        let _ = writeln!(s, "lambda_rule={}", self.lambda_rule);
        let _ = writeln!(s, "m_list={}", join_list(&self.m_list));
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "sample_count={}", self.sample_count);
        let _ = writeln!(
            s,
            "output={}",
            self.output
                .as_deref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
        s
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: format!("{:016x}", fnv1a64(self.canonical_text().as_bytes())),
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// The test function named by the config:
    /// `cauchy`, `zero`, or `imag_rational(c1,eta1; c2,eta2; ...)`.
    pub fn parse_test_function(&self) -> Result<TestFunction> {
        let spec = self.test_function.trim();
        if spec == "cauchy" {
            return Ok(TestFunction::cauchy());
        }
        if spec == "zero" {
            return Ok(TestFunction::generic("zero", |_| 0.0));
        }
        if let Some(inner) = spec
            .strip_prefix("imag_rational(")
            .and_then(|r| r.strip_suffix(')'))
        {
            let mut terms = Vec::new();
            for part in inner.split(';') {
                let (c, eta) = part.split_once(',').ok_or_else(|| {
                    Error::config(format!("imag_rational term {part:?} needs \"c, eta\""))
                })?;
                let c = parse_f64(c.trim(), "imag_rational coefficient")?;
                terms.push((c, parse_complex(eta)?));
            }
            return TestFunction::rational_imag(terms);
        }
        Err(Error::config(format!(
            "unknown test function {spec:?}; expected cauchy, zero, or imag_rational(...)"
        )))
    }
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("bad {what} {s:?}")))?;
    if !v.is_finite() {
        return Err(Error::config(format!("{what} must be finite, got {s:?}")));
    }
    Ok(v)
}

fn parse_optional_f64(s: &str, what: &str) -> Result<Option<f64>> {
    if s.trim() == "none" {
        return Ok(None);
    }
    parse_f64(s, what).map(Some)
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad {what} entry {p:?}")))
        })
        .collect()
}

fn join_list<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Accepts `a+bi`, `a-bi`, `bi`, `i`, or a bare real, with optional spaces.
pub fn parse_complex(s: &str) -> Result<Complex64> {
    let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    Complex64::from_str(&compact)
        .map_err(|_| Error::config(format!("bad complex number {s:?}; expected a+bi")))
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Identifies exactly which computation produced a result file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

/// Output table of one run. `rows` are in column order of `columns`; `passed`
/// is the conjunction of the run's acceptance gates, and `notes` carry
/// human-readable measurements behind the verdict.
#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub id: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub provenance: Provenance,
    pub passed: bool,
    pub notes: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl RunResult {
    /// CSV with a provenance comment header; floats at 17 significant digits
    /// so the table round-trips exactly.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# id={} config_hash={} seed={} version={} passed={}",
            self.id,
            self.provenance.config_hash,
            self.provenance.seed,
            self.provenance.version,
            self.passed
        );
        for note in &self.notes {
            let _ = writeln!(s, "# note: {note}");
        }
        let _ = writeln!(s, "{}", self.columns.join(","));
        for row in &self.rows {
            let line = row
                .iter()
                .map(|v| format_float(*v))
                .collect::<Vec<_>>()
                .join(",");
            let _ = writeln!(s, "{line}");
        }
        s
    }

    pub fn to_json_string(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::numerical(format!("result serialization failed: {e}")))
    }

    pub fn render(&self, format: OutputFormat) -> Result<String> {
        match format {
            OutputFormat::Csv => Ok(self.to_csv_string()),
            OutputFormat::Json => self.to_json_string(),
        }
    }

    pub fn write(&self, path: &Path, format: OutputFormat) -> Result<()> {
        std::fs::write(path, self.render(format)?).map_err(|e| Error::io(path, e))
    }

    /// Value of the named column in row `i`.
    pub fn get(&self, i: usize, column: &str) -> Option<f64> {
        let j = self.columns.iter().position(|c| c == column)?;
        self.rows.get(i)?.get(j).copied()
    }

    /// All values of the named column.
    pub fn column(&self, column: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == column)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

fn format_float(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 && v.is_finite() {
        // Integer-valued cells (grid sizes, orders) print as integers.
        format!("{}", v as i64)
    } else {
        format!("{v:.16e}")
    }
}
