//! Generic quasi-Newton engine: an exact Newton step plus pluggable
//! injection of correction and update errors, with full per-iteration
//! tracing of residuals, relative errors and measured error-operator norms.

use crate::linalg::{lu_solve, norm2, LinalgError, Matrix, Vector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("jacobian is singular at iteration {iteration}: {source}")]
    SingularJacobian {
        iteration: usize,
        source: LinalgError,
    },
    #[error("evaluator produced non-finite output at iteration {iteration}")]
    DomainEscape { iteration: usize },
    #[error("custom correction solver failed at iteration {iteration}: {source}")]
    CorrectionFailed {
        iteration: usize,
        source: LinalgError,
    },
}

type ResidualFn = dyn Fn(&Vector) -> Vector + Send + Sync;
type JacobianFn = dyn Fn(&Vector) -> Matrix + Send + Sync;
type LinearSolveFn = dyn Fn(&Matrix, &Vector) -> Result<Vector, LinalgError> + Send + Sync;

/// A square nonlinear system with residual and Jacobian evaluators and an
/// optional known zero used for error measurement.
pub struct Problem {
    dimension: usize,
    residual: Box<ResidualFn>,
    jacobian: Box<JacobianFn>,
    known_zero: Option<Vector>,
}

impl Problem {
    pub fn new<F, J>(dimension: usize, residual: F, jacobian: J) -> Self
    where
        F: Fn(&Vector) -> Vector + Send + Sync + 'static,
        J: Fn(&Vector) -> Matrix + Send + Sync + 'static,
    {
        Problem {
            dimension,
            residual: Box::new(residual),
            jacobian: Box::new(jacobian),
            known_zero: None,
        }
    }

    pub fn with_known_zero(mut self, zero: Vector) -> Self {
        assert_eq!(zero.len(), self.dimension, "zero dimension mismatch");
        self.known_zero = Some(zero);
        self
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn known_zero(&self) -> Option<&Vector> {
        self.known_zero.as_ref()
    }

    pub fn residual(&self, x: &Vector) -> Vector {
        (self.residual)(x)
    }

    pub fn jacobian(&self, x: &Vector) -> Matrix {
        (self.jacobian)(x)
    }

    /// Scalar convenience constructor.
    pub fn scalar<F, J>(f: F, df: J) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        J: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Problem::new(
            1,
            move |x: &Vector| Vector::from_vec(vec![f(x[0])]),
            move |x: &Vector| Matrix::from_vec(1, 1, vec![df(x[0])]),
        )
    }
}

/// How the correction is produced from the exact Newton step.
pub enum CorrectionMode {
    /// Use the exact Newton step.
    Exact,
    /// Perturb the Newton step by a random relative error with magnitude
    /// uniform in `[epsilon/2, epsilon]`; scalar case flips the sign with
    /// equal probability, vector case adds along an isotropic unit direction.
    RandomRelative { epsilon: f64 },
    /// Produce the correction with a caller-supplied linear solve (which may
    /// ignore the passed Jacobian, e.g. to reuse a fixed factorization).
    CustomSolver(Box<LinearSolveFn>),
}

/// How the update `x - t` is carried out.
#[derive(Debug, Clone, Copy)]
pub enum UpdateMode {
    /// Plain floating-point subtraction; the rounding stays at the native
    /// unit roundoff and is not recorded.
    ExactSubtraction,
    /// Multiply each updated component by `1 + delta` with `|delta|` at most
    /// `u_sim`, to study stagnation above native precision. The injected
    /// diagonal norm is recorded.
    SimulatedRoundoff { u_sim: f64 },
}

/// Error-injection settings for one iterate call.
pub struct PerturbationModel {
    pub correction: CorrectionMode,
    pub update: UpdateMode,
    pub seed: u64,
    pub stream: u64,
}

impl PerturbationModel {
    pub fn exact() -> Self {
        PerturbationModel {
            correction: CorrectionMode::Exact,
            update: UpdateMode::ExactSubtraction,
            seed: 0,
            stream: 0,
        }
    }

    pub fn random_relative(epsilon: f64, seed: u64, stream: u64) -> Self {
        assert!(epsilon > 0.0, "epsilon must be positive");
        PerturbationModel {
            correction: CorrectionMode::RandomRelative { epsilon },
            update: UpdateMode::ExactSubtraction,
            seed,
            stream,
        }
    }

    pub fn custom<S>(solver: S) -> Self
    where
        S: Fn(&Matrix, &Vector) -> Result<Vector, LinalgError> + Send + Sync + 'static,
    {
        PerturbationModel {
            correction: CorrectionMode::CustomSolver(Box::new(solver)),
            update: UpdateMode::ExactSubtraction,
            seed: 0,
            stream: 0,
        }
    }

    pub fn with_simulated_roundoff(mut self, u_sim: f64) -> Self {
        assert!(u_sim >= 0.0, "u_sim must be nonnegative");
        self.update = UpdateMode::SimulatedRoundoff { u_sim };
        self
    }
}

/// Halting rule: iteration cap, residual floor, and a stagnation window
/// (halt once the best residual has not improved over that many
/// consecutive iterations).
#[derive(Debug, Clone, Copy)]
pub struct StopRule {
    pub max_iterations: usize,
    pub residual_floor: f64,
    pub stagnation_window: usize,
}

impl StopRule {
    pub fn new(max_iterations: usize, residual_floor: f64, stagnation_window: usize) -> Self {
        assert!(max_iterations >= 1);
        assert!(residual_floor >= 0.0);
        assert!(stagnation_window >= 1);
        StopRule {
            max_iterations,
            residual_floor,
            stagnation_window,
        }
    }
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            max_iterations: 50,
            residual_floor: 0.0,
            stagnation_window: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    ResidualFloor,
    Stagnated,
    MaxIterations,
}

/// Per-iteration record. Step-level fields (`correction`, `correction_error`,
/// `update_error`) describe the step taken FROM this iterate and are absent
/// on the final record.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub k: usize,
    pub iterate: Vector,
    pub residual_norm: f64,
    /// `|z - x_k| / |z|` when the zero is known.
    pub relative_error: Option<f64>,
    /// `|s_k - t_k| / |s_k|`, the measured correction error-operator norm.
    pub correction_error: Option<f64>,
    /// Norm of the injected diagonal update error, when simulated.
    pub update_error: Option<f64>,
    /// The correction actually subtracted in this step.
    pub correction: Option<Vector>,
}

#[derive(Debug, Clone)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
    pub stop_reason: StopReason,
}

impl IterationTrace {
    /// Number of steps taken (records minus the starting iterate).
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn final_record(&self) -> &IterationRecord {
        self.records.last().expect("trace has at least one record")
    }

    pub fn relative_errors(&self) -> Vec<Option<f64>> {
        self.records.iter().map(|r| r.relative_error).collect()
    }

    pub fn residual_norms(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.residual_norm).collect()
    }
}

/// The exact Newton correction `s` with `F'(x) s = F(x)`.
pub fn newton_step(problem: &Problem, x: &Vector) -> Result<Vector, SolverError> {
    let fx = problem.residual(x);
    let jac = problem.jacobian(x);
    lu_solve(&jac, &fx).map_err(|source| SolverError::SingularJacobian {
        iteration: 0,
        source,
    })
}

/// Run the quasi-Newton iteration from `x0` under the given perturbation
/// model until the stop rule fires. When the problem has a known zero the
/// relative error and the measured correction-error norm are recorded at
/// every step.
pub fn iterate(
    problem: &Problem,
    x0: &Vector,
    perturbation: &PerturbationModel,
    stop: &StopRule,
) -> Result<IterationTrace, SolverError> {
    assert_eq!(x0.len(), problem.dimension(), "x0 dimension mismatch");
    let mut rng = ChaCha8Rng::seed_from_u64(perturbation.seed);
    rng.set_stream(perturbation.stream);

    let zero_norm = problem.known_zero().map(norm2);
    let mut x = x0.clone();
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut best_residual = f64::INFINITY;
    let mut stale = 0usize;

    let stop_reason = loop {
        let k = records.len();
        if !x.is_finite() {
            return Err(SolverError::DomainEscape { iteration: k });
        }
        let fx = problem.residual(&x);
        if !fx.is_finite() {
            return Err(SolverError::DomainEscape { iteration: k });
        }
        let residual_norm = norm2(&fx);
        let relative_error = problem
            .known_zero()
            .map(|z| norm2(&z.sub(&x)) / zero_norm.unwrap());
        records.push(IterationRecord {
            k,
            iterate: x.clone(),
            residual_norm,
            relative_error,
            correction_error: None,
            update_error: None,
            correction: None,
        });

        if residual_norm <= stop.residual_floor {
            break StopReason::ResidualFloor;
        }
        if residual_norm < best_residual {
            best_residual = residual_norm;
            stale = 0;
        } else {
            stale += 1;
            if stale >= stop.stagnation_window {
                break StopReason::Stagnated;
            }
        }
        if k == stop.max_iterations {
            break StopReason::MaxIterations;
        }

        let jacobian = problem.jacobian(&x);
        if !jacobian.is_finite() {
            return Err(SolverError::DomainEscape { iteration: k });
        }
        // the exact Newton step, needed for the correction itself or for
        // measuring the correction error against it
        let need_exact = problem.known_zero().is_some()
            || matches!(perturbation.correction, CorrectionMode::Exact);
        let exact_step = if need_exact {
            Some(
                lu_solve(&jacobian, &fx).map_err(|source| SolverError::SingularJacobian {
                    iteration: k,
                    source,
                })?,
            )
        } else {
            None
        };

        let correction = match &perturbation.correction {
            CorrectionMode::Exact => exact_step.clone().unwrap(),
            CorrectionMode::RandomRelative { epsilon } => {
                let s = match &exact_step {
                    Some(s) => s.clone(),
                    None => lu_solve(&jacobian, &fx).map_err(|source| {
                        SolverError::SingularJacobian {
                            iteration: k,
                            source,
                        }
                    })?,
                };
                perturb_step(&s, *epsilon, &mut rng)
            }
            CorrectionMode::CustomSolver(solve) => {
                solve(&jacobian, &fx).map_err(|source| SolverError::CorrectionFailed {
                    iteration: k,
                    source,
                })?
            }
        };

        let correction_error = exact_step.as_ref().map(|s| {
            let s_norm = norm2(s);
            if s_norm == 0.0 {
                if norm2(&correction) == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                norm2(&s.sub(&correction)) / s_norm
            }
        });

        let (next, update_error) = match perturbation.update {
            UpdateMode::ExactSubtraction => (x.sub(&correction), None),
            UpdateMode::SimulatedRoundoff { u_sim } => {
                let mut next = x.sub(&correction);
                let mut max_delta = 0.0_f64;
                for i in 0..next.len() {
                    let delta: f64 = rng.gen_range(-u_sim..=u_sim);
                    next[i] *= 1.0 + delta;
                    max_delta = max_delta.max(delta.abs());
                }
                (next, Some(max_delta))
            }
        };

        let record = records.last_mut().unwrap();
        record.correction_error = correction_error;
        record.update_error = update_error;
        record.correction = Some(correction);
        x = next;
    };

    Ok(IterationTrace {
        records,
        stop_reason,
    })
}

/// Inject a relative error of magnitude uniform in `[eps/2, eps]` into the
/// step: sign flip in the scalar case, isotropic unit direction otherwise.
fn perturb_step(s: &Vector, epsilon: f64, rng: &mut ChaCha8Rng) -> Vector {
    let magnitude = rng.gen_range(0.5 * epsilon..=epsilon);
    if s.len() == 1 {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        Vector::from_vec(vec![s[0] * (1.0 + sign * magnitude)])
    } else {
        let mut direction = Vector::from_vec(
            (0..s.len())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        let mut d_norm = norm2(&direction);
        while d_norm == 0.0 {
            direction = Vector::from_vec(
                (0..s.len())
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            d_norm = norm2(&direction);
        }
        s.add(&direction.scaled(magnitude * norm2(s) / d_norm))
    }
}

/// Measured rate-validation ratios `nu_k = r_{k+1} / (r_k * |E_k|)`.
#[derive(Debug, Clone, Default)]
pub struct RatioSeries {
    /// `(k, nu_k)` for each step with a positive denominator.
    pub values: Vec<(usize, f64)>,
    /// Steps omitted because `r_k * |E_k|` was zero or unavailable.
    pub omitted: Vec<usize>,
}

impl RatioSeries {
    pub fn value_at(&self, k: usize) -> Option<f64> {
        self.values.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

/// Compute the ratios from consecutive recorded relative errors and
/// correction-error norms.
pub fn measure_ratios(trace: &IterationTrace) -> RatioSeries {
    let mut series = RatioSeries::default();
    for window in trace.records.windows(2) {
        let k = window[0].k;
        match (
            window[0].relative_error,
            window[0].correction_error,
            window[1].relative_error,
        ) {
            (Some(rk), Some(ek), Some(rk1)) if rk * ek > 0.0 && ek.is_finite() => {
                series.values.push((k, rk1 / (rk * ek)));
            }
            _ => series.omitted.push(k),
        }
    }
    series
}

/// First iteration index where the relative error reaches `threshold`.
pub fn iterations_to_threshold(trace: &IterationTrace, threshold: f64) -> Option<usize> {
    trace
        .records
        .iter()
        .find(|r| matches!(r.relative_error, Some(e) if e <= threshold))
        .map(|r| r.k)
}

/// Consecutive `(k, r_k, r_{k+1})` pairs with both errors strictly above the
/// stagnation threshold.
pub fn pre_stagnation_pairs(trace: &IterationTrace, threshold: f64) -> Vec<(usize, f64, f64)> {
    let mut pairs = Vec::new();
    for window in trace.records.windows(2) {
        if let (Some(rk), Some(rk1)) = (window[0].relative_error, window[1].relative_error) {
            if rk > threshold && rk1 > threshold {
                pairs.push((window[0].k, rk, rk1));
            }
        }
    }
    pairs
}

/// First index whose value is within `factor` of the series minimum; the
/// shoulder where a decaying series levels off.
pub fn stagnation_shoulder(values: &[f64], factor: f64) -> Option<usize> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return None;
    }
    values.iter().position(|&v| v <= factor * min)
}

/// Write a trace as CSV: `k,residual_norm,r_k,e_norm,d_norm,nu_k` with empty
/// fields for unavailable values.
pub fn write_trace_csv<W: Write>(trace: &IterationTrace, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "k,residual_norm,r_k,e_norm,d_norm,nu_k")?;
    let ratios = measure_ratios(trace);
    for record in &trace.records {
        writeln!(out, "{}", trace_row(record, &ratios))?;
    }
    Ok(())
}

pub(crate) fn trace_row(record: &IterationRecord, ratios: &RatioSeries) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{}",
        record.k,
        record.residual_norm,
        opt(record.relative_error),
        opt(record.correction_error),
        opt(record.update_error),
        opt(ratios.value_at(record.k)),
    )
}
