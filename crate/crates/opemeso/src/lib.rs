//! Numerics for mesoscopic linear statistics of orthogonal polynomial
//! ensembles.
//!
//! An orthogonal polynomial ensemble with `n` points is the determinantal
//! point process whose kernel is the degree-`n` Christoffel-Darboux kernel of
//! a reference measure. The measure is carried around in recurrence-coefficient
//! form, i.e. as a Jacobi operator: a symmetric tridiagonal operator on
//! one-sided sequence space. Everything in this crate is phrased in terms of
//! that operator:
//!
//! * [`jacobi`] builds the operators: coefficient presets, sparse diagonal
//!   perturbations with power-law spaced supports, finite truncations, and
//!   coordinate projections.
//! * [`resolvent`] evaluates resolvents at mesoscopically shifted spectral
//!   points, fits their off-diagonal decay, and constructs the decoupled and
//!   rank-one comparison operators used to reduce a perturbed resolvent to a
//!   free one plus an explicit Hankel-structured correction.
//! * [`hankel`] handles that correction: geometric Hankel matrices, their
//!   trace norms (exact and via SVD), and integral-functional upper bounds.
//! * [`cumulants`] computes cumulants of mesoscopic linear statistics two
//!   independent ways: a trace formula over compositions, and finite
//!   differences of a Fredholm determinant.
//! * [`sampler`] draws exact samples of the point process and estimates the
//!   same cumulants by Monte Carlo.
//! * [`experiments`] wires the above into reproducible, file-backed runs
//!   driven by the `opemeso` command-line binary.
//!
//! Conventions used throughout: operator sites are 1-based `u64` labels, the
//! free operator has off-diagonal 1 and diagonal 0 (spectrum `[-2, 2]`,
//! spectral measure semicircle), and a mesoscopic scale is a pair `(gamma,
//! x0)` with test functions evaluated at `n^gamma (x - x0)`.

pub mod cumulants;
mod error;
pub mod experiments;
pub mod hankel;
pub mod jacobi;
mod linalg;
pub mod resolvent;
pub mod sampler;

pub use error::{Error, Result};
