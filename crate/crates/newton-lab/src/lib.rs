//! Numerical laboratory for quasi-Newton methods under controlled
//! inexactness: how accurate does the linear solve inside Newton's method
//! have to be, and where does the iteration stagnate?
//!
//! The crate provides:
//!
//! * [`linalg`] — small dense vectors/matrices with LU and Cholesky solves;
//! * [`theory`] — executable convergence bounds: per-step error bound,
//!   stagnation roots and their Taylor estimate, linear/superlinear rates,
//!   and the rank-one error-operator construction;
//! * [`solver`] — a quasi-Newton engine with pluggable injection of
//!   correction and update errors and full per-iteration tracing;
//! * [`sqrt_lab`] — the perturbed square-root Newton experiment over an
//!   `(alpha, epsilon)` grid;
//! * [`mdsim`] — a desk-scale SHAKE constrained-dynamics surrogate whose
//!   bond-constraint equations are solved quasi-Newton with a fixed
//!   symmetric approximate Jacobian;
//! * [`verify`] — the end-to-end verification suite with one report per
//!   criterion.

pub mod dd;
pub mod linalg;
pub mod mdsim;
pub mod solver;
pub mod sqrt_lab;
pub mod theory;
pub mod verify;

/// Default master seed used by every experiment when none is supplied.
pub const DEFAULT_SEED: u64 = 1729;

pub use linalg::UNIT_ROUNDOFF;
