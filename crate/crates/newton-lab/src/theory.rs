//! Executable convergence theory for quasi-Newton iteration with correction
//! and update errors: the per-step error bound, the stagnation threshold and
//! its Taylor estimate, linear and superlinear decay rates, and the rank-one
//! error-operator construction.
//!
//! All norms here are 2-norms.

use crate::linalg::{norm2, Matrix, Vector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("reference vector has zero norm")]
    ZeroReference,
    #[error("invalid bound constants: {0}")]
    InvalidParams(String),
    #[error("no real stagnation roots: discriminant {discriminant:e} is negative")]
    NoRealRoots { discriminant: f64 },
    #[error("degenerate quadratic: L*K*(1+D)*|z| vanishes")]
    DegenerateQuadratic,
    #[error("stagnation estimate invalid: E*M*K*(1+D) = {value} >= 1")]
    EstimateInvalid { value: f64 },
}

/// Global bound constants feeding every error formula.
///
/// `inverse_jacobian_bound` bounds the norm of the inverse Jacobian,
/// `lipschitz` is the Lipschitz constant of the Jacobian,
/// `jacobian_bound` bounds the Jacobian norm, `update_error_bound` and
/// `correction_error_bound` bound the two per-step error operators, and
/// `zero_norm` is the norm of the zero the iteration converges to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryParams {
    pub inverse_jacobian_bound: f64,
    pub lipschitz: f64,
    pub jacobian_bound: f64,
    pub update_error_bound: f64,
    pub correction_error_bound: f64,
    pub zero_norm: f64,
}

impl TheoryParams {
    pub fn new(
        inverse_jacobian_bound: f64,
        lipschitz: f64,
        jacobian_bound: f64,
        update_error_bound: f64,
        correction_error_bound: f64,
        zero_norm: f64,
    ) -> Result<Self, TheoryError> {
        let p = TheoryParams {
            inverse_jacobian_bound,
            lipschitz,
            jacobian_bound,
            update_error_bound,
            correction_error_bound,
            zero_norm,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        let fields = [
            ("inverse_jacobian_bound", self.inverse_jacobian_bound),
            ("lipschitz", self.lipschitz),
            ("jacobian_bound", self.jacobian_bound),
            ("update_error_bound", self.update_error_bound),
            ("correction_error_bound", self.correction_error_bound),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(TheoryError::InvalidParams(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if !(self.zero_norm > 0.0) || !self.zero_norm.is_finite() {
            return Err(TheoryError::InvalidParams(format!(
                "zero_norm must be finite and strictly positive, got {}",
                self.zero_norm
            )));
        }
        Ok(())
    }

    /// E*M*K*(1+D), the coefficient that erodes the guaranteed decrease.
    fn correction_drag(&self) -> f64 {
        self.correction_error_bound
            * self.jacobian_bound
            * self.inverse_jacobian_bound
            * (1.0 + self.update_error_bound)
    }

    /// L*K*(1+D)*|z|, twice the quadratic coefficient.
    fn quadratic_scale(&self) -> f64 {
        self.lipschitz
            * self.inverse_jacobian_bound
            * (1.0 + self.update_error_bound)
            * self.zero_norm
    }
}

/// Rank-one operator taking a reference vector exactly onto its approximation.
#[derive(Debug, Clone)]
pub struct ErrorOperator {
    matrix: Matrix,
    norm2: f64,
}

impl ErrorOperator {
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// 2-norm of the operator; equals the relative error of the approximation.
    pub fn norm2(&self) -> f64 {
        self.norm2
    }
}

/// Build the rank-one operator `(y - x) x^T / (x^T x)` with `(I + E) x = y`.
///
/// Its 2-norm is `|x - y| / |x|`, computed through the rank-one closed form
/// `|y - x| * |x| / |x|^2`.
pub fn error_operator(x: &Vector, y: &Vector) -> Result<ErrorOperator, TheoryError> {
    assert_eq!(x.len(), y.len(), "vector length mismatch");
    let x_norm = norm2(x);
    if x_norm == 0.0 {
        return Err(TheoryError::ZeroReference);
    }
    let n = x.len();
    let diff = y.sub(x);
    let xtx = crate::linalg::dot(x, x);
    let mut matrix = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            matrix[(i, j)] = diff[i] * x[j] / xtx;
        }
    }
    let norm2 = norm2(&diff) * x_norm / (x_norm * x_norm);
    Ok(ErrorOperator { matrix, norm2 })
}

/// One-step error bound: given the relative error `r` of the current iterate,
/// the next relative error is at most
/// `L*K*(1+D)*|z|*r^2/2 + E*K*M*(1+D)*r + D`.
pub fn error_bound_step(r: f64, p: &TheoryParams) -> f64 {
    debug_assert!(r >= 0.0);
    0.5 * p.quadratic_scale() * r * r + p.correction_drag() * r + p.update_error_bound
}

/// Both roots of `D - [1 - EMK(1+D)] r + L*K*(1+D)*|z| r^2 / 2 = 0`,
/// ordered. Strictly between them a step is guaranteed to reduce the error.
///
/// The smaller root is computed from the product of roots to avoid the
/// catastrophic cancellation that the textbook formula suffers when the
/// root is near the unit roundoff.
pub fn stagnation_roots(p: &TheoryParams) -> Result<(f64, f64), TheoryError> {
    p.validate()?;
    let a = 0.5 * p.quadratic_scale();
    if a == 0.0 {
        return Err(TheoryError::DegenerateQuadratic);
    }
    let b = 1.0 - p.correction_drag(); // the quadratic is D - b r + a r^2
    let c = p.update_error_bound;
    let discriminant = b * b - 4.0 * a * c;
    if discriminant < 0.0 {
        return Err(TheoryError::NoRealRoots { discriminant });
    }
    let sq = discriminant.sqrt();
    // q carries the addition of same-signed quantities; the other root is c/q
    let q = 0.5 * (b + b.signum() * sq);
    let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
    Ok(if r1 <= r2 { (r1, r2) } else { (r2, r1) })
}

/// Taylor estimate of the stagnation threshold: `D / (1 - EMK(1+D))^2`.
pub fn stagnation_estimate(p: &TheoryParams) -> Result<f64, TheoryError> {
    p.validate()?;
    let drag = p.correction_drag();
    if drag >= 1.0 {
        return Err(TheoryError::EstimateInvalid { value: drag });
    }
    let denom = 1.0 - drag;
    Ok(p.update_error_bound / (denom * denom))
}

/// Linear decay coefficient `rho = L*K*(1+D)*|z|*r/2 + E*K*M*(1+D) + C`,
/// valid while the update error stays below `C * r`.
pub fn linear_rate(r: f64, p: &TheoryParams, c: f64) -> f64 {
    debug_assert!(r >= 0.0 && c >= 0.0);
    0.5 * p.quadratic_scale() * r + p.correction_drag() + c
}

/// Superlinear decay bound
/// `[L*K*(1+D)*|z|*r^(1-lambda)/2 + C1*K*M*(1+D) + C2] * r^(1+lambda)`
/// for correction errors decaying like `C1 * r^lambda`.
pub fn superlinear_bound(r: f64, p: &TheoryParams, c1: f64, c2: f64, lambda: f64) -> f64 {
    assert!(
        lambda > 0.0 && lambda <= 1.0,
        "lambda must lie in (0, 1], got {lambda}"
    );
    debug_assert!(r >= 0.0);
    if r == 0.0 {
        return 0.0;
    }
    let coefficient = 0.5 * p.quadratic_scale() * r.powf(1.0 - lambda)
        + c1 * p.inverse_jacobian_bound * p.jacobian_bound * (1.0 + p.update_error_bound)
        + c2;
    coefficient * r.powf(1.0 + lambda)
}
