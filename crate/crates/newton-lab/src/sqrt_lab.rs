//! Square-root experiment: binary range reduction, best uniform linear
//! initial guess, and perturbed Newton iteration for `x^2 - alpha = 0`
//! across a grid of `alpha` and perturbation sizes `epsilon`.

use crate::linalg::Vector;
use crate::solver::{self, IterationTrace, PerturbationModel, Problem, SolverError, StopRule};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SqrtLabError {
    #[error("argument must be positive, got {0}")]
    NonPositive(f64),
    #[error("argument must be finite, got {0}")]
    NonFinite(f64),
    #[error("subnormal arguments are out of scope, got {0:e}")]
    Subnormal(f64),
    #[error("initial guess defined on [1, 4], got {0}")]
    OutOfRange(f64),
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Split a positive normal `alpha` into `m * 4^e` with `m` in `[1, 4)`,
/// using exponent arithmetic only, so the product reconstructs `alpha`
/// bit-exactly and `sqrt(alpha) = sqrt(m) * 2^e`.
pub fn range_reduce(alpha: f64) -> Result<(f64, i32), SqrtLabError> {
    if !alpha.is_finite() {
        return Err(SqrtLabError::NonFinite(alpha));
    }
    if alpha <= 0.0 {
        return Err(SqrtLabError::NonPositive(alpha));
    }
    if alpha < f64::MIN_POSITIVE {
        return Err(SqrtLabError::Subnormal(alpha));
    }
    let bits = alpha.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    let exponent = biased - 1023; // alpha = f * 2^exponent with f in [1, 2)
    let fraction = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | (1023u64 << 52));
    if exponent.rem_euclid(2) == 0 {
        Ok((fraction, exponent / 2))
    } else {
        // doubling the fraction is an exponent increment, still exact
        Ok((2.0 * fraction, (exponent - 1) / 2))
    }
}

/// Best uniform linear approximation of the square root on `[1, 4]`:
/// `m/3 + 17/24`, with relative error at most `1/24`.
pub fn initial_guess(m: f64) -> Result<f64, SqrtLabError> {
    if !(1.0..=4.0).contains(&m) {
        return Err(SqrtLabError::OutOfRange(m));
    }
    Ok(m / 3.0 + 17.0 / 24.0)
}

/// The platform's correctly rounded square root, the reference zero for
/// error measurement.
pub fn reference_sqrt(alpha: f64) -> f64 {
    alpha.sqrt()
}

/// Grid and perturbation settings for one experiment run.
#[derive(Debug, Clone)]
pub struct SqrtExperimentConfig {
    /// Perturbation sizes; one trace set per entry.
    pub epsilons: Vec<f64>,
    /// Number of logarithmically spaced `alpha` values in `[1, 4)`.
    pub alpha_points: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for SqrtExperimentConfig {
    fn default() -> Self {
        SqrtExperimentConfig {
            epsilons: vec![1e-2, 1e-8, 1e-12],
            alpha_points: 256,
            max_iterations: 60,
            seed: crate::DEFAULT_SEED,
        }
    }
}

impl SqrtExperimentConfig {
    pub fn validate(&self) -> Result<(), SqrtLabError> {
        if self.epsilons.is_empty() || self.epsilons.iter().any(|&e| !(e > 0.0)) {
            return Err(SqrtLabError::InvalidConfig(
                "epsilon list must be nonempty and positive".into(),
            ));
        }
        if self.alpha_points == 0 {
            return Err(SqrtLabError::InvalidConfig("alpha grid is empty".into()));
        }
        if self.max_iterations == 0 {
            return Err(SqrtLabError::InvalidConfig("iteration cap is zero".into()));
        }
        Ok(())
    }

    /// Logarithmically spaced grid `4^(i/n)` staying inside `[1, 4)`.
    pub fn alpha_grid(&self) -> Vec<f64> {
        let n = self.alpha_points;
        (0..n).map(|i| 4f64.powf(i as f64 / n as f64)).collect()
    }
}

/// One `(alpha, epsilon)` cell of the experiment.
#[derive(Debug, Clone)]
pub struct SqrtCell {
    pub alpha: f64,
    pub epsilon: f64,
    pub alpha_index: usize,
    pub epsilon_index: usize,
    /// The reduced argument actually iterated on.
    pub reduced: f64,
    /// Binary exponent with `alpha = reduced * 4^exponent`.
    pub exponent: i32,
    pub trace: IterationTrace,
    /// Final recorded relative error was exactly zero (the iterate matched
    /// the platform square root bit for bit).
    pub exact_hit: bool,
}

#[derive(Debug, Clone)]
pub struct SqrtExperimentResult {
    pub cells: Vec<SqrtCell>,
}

impl SqrtExperimentResult {
    pub fn cells_for_epsilon(&self, epsilon_index: usize) -> impl Iterator<Item = &SqrtCell> {
        self.cells
            .iter()
            .filter(move |c| c.epsilon_index == epsilon_index)
    }
}

fn sqrt_problem(m: f64) -> Problem {
    Problem::scalar(move |x| x * x - m, move |x| 2.0 * x)
        .with_known_zero(Vector::from_vec(vec![reference_sqrt(m)]))
}

/// Run the perturbed iteration for every `(alpha, epsilon)` cell. Each cell
/// draws from its own RNG substream of the master seed, so the grid is
/// reproducible regardless of evaluation order.
pub fn run_sqrt_experiment(
    config: &SqrtExperimentConfig,
) -> Result<SqrtExperimentResult, SqrtLabError> {
    config.validate()?;
    let alphas = config.alpha_grid();
    let stop = StopRule::new(config.max_iterations, 0.0, 3);
    let mut cells = Vec::with_capacity(alphas.len() * config.epsilons.len());
    for (epsilon_index, &epsilon) in config.epsilons.iter().enumerate() {
        for (alpha_index, &alpha) in alphas.iter().enumerate() {
            let (reduced, exponent) = range_reduce(alpha)?;
            let x0 = Vector::from_vec(vec![initial_guess(reduced)?]);
            let stream = (epsilon_index * alphas.len() + alpha_index) as u64;
            let perturbation = PerturbationModel::random_relative(epsilon, config.seed, stream);
            let problem = sqrt_problem(reduced);
            let trace = solver::iterate(&problem, &x0, &perturbation, &stop)?;
            let exact_hit = trace.final_record().relative_error == Some(0.0);
            cells.push(SqrtCell {
                alpha,
                epsilon,
                alpha_index,
                epsilon_index,
                reduced,
                exponent,
                trace,
                exact_hit,
            });
        }
    }
    Ok(SqrtExperimentResult { cells })
}

/// Geometric mean of the pre-stagnation ratios `r_{k+1}/r_k` pooled over a
/// set of cells; pairs must sit strictly above `threshold` on both ends.
pub fn pooled_ratio_geometric_mean<'a>(
    cells: impl Iterator<Item = &'a SqrtCell>,
    threshold: f64,
) -> Option<f64> {
    let mut log_sum = 0.0;
    let mut count = 0usize;
    for cell in cells {
        for (_, rk, rk1) in solver::pre_stagnation_pairs(&cell.trace, threshold) {
            log_sum += (rk1 / rk).ln();
            count += 1;
        }
    }
    if count == 0 {
        None
    } else {
        Some((log_sum / count as f64).exp())
    }
}

/// Write one epsilon panel as CSV with the trace columns prefixed by the
/// cell coordinates: `alpha,epsilon,k,residual_norm,r_k,e_norm,d_norm,nu_k`.
pub fn write_cells_csv<'a, W: Write>(
    cells: impl Iterator<Item = &'a SqrtCell>,
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "alpha,epsilon,k,residual_norm,r_k,e_norm,d_norm,nu_k")?;
    for cell in cells {
        let ratios = solver::measure_ratios(&cell.trace);
        for record in &cell.trace.records {
            writeln!(
                out,
                "{},{},{}",
                cell.alpha,
                cell.epsilon,
                solver::trace_row(record, &ratios)
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dd::DoubleDouble;
    use crate::linalg::UNIT_ROUNDOFF;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn range_reduce_examples() {
        assert_eq!(range_reduce(2.0).unwrap(), (2.0, 0));
        assert_eq!(range_reduce(8.0).unwrap(), (2.0, 1));
        assert_eq!(range_reduce(0.5).unwrap(), (2.0, -1));
        assert_eq!(range_reduce(1.0).unwrap(), (1.0, 0));
        assert_eq!(range_reduce(4.0).unwrap(), (1.0, 1));
    }

    #[test]
    fn range_reduce_rejections() {
        assert!(matches!(
            range_reduce(0.0),
            Err(SqrtLabError::NonPositive(_))
        ));
        assert!(matches!(
            range_reduce(-3.0),
            Err(SqrtLabError::NonPositive(_))
        ));
        assert!(matches!(
            range_reduce(f64::INFINITY),
            Err(SqrtLabError::NonFinite(_))
        ));
        assert!(matches!(
            range_reduce(f64::NAN),
            Err(SqrtLabError::NonFinite(_))
        ));
        assert!(matches!(
            range_reduce(f64::MIN_POSITIVE / 2.0),
            Err(SqrtLabError::Subnormal(_))
        ));
    }

    #[test]
    fn range_reduce_reconstructs_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100_000 {
            let alpha = f64::from_bits(
                (rng.gen_range(1u64..2047) << 52) | rng.gen::<u64>() & 0x000f_ffff_ffff_ffff,
            );
            if !alpha.is_finite() || alpha < f64::MIN_POSITIVE {
                continue;
            }
            let (m, e) = range_reduce(alpha).unwrap();
            assert!((1.0..4.0).contains(&m), "m={m} out of range for {alpha:e}");
            let back = m * 2f64.powi(2 * e);
            assert_eq!(back.to_bits(), alpha.to_bits(), "alpha={alpha:e}");
        }
    }

    #[test]
    fn initial_guess_examples() {
        assert_eq!(initial_guess(1.0).unwrap(), 25.0 / 24.0);
        assert_eq!(initial_guess(2.0).unwrap(), 1.375);
        assert_eq!(initial_guess(4.0).unwrap(), 49.0 / 24.0);
        assert!(matches!(
            initial_guess(0.9),
            Err(SqrtLabError::OutOfRange(_))
        ));
        assert!(matches!(
            initial_guess(4.1),
            Err(SqrtLabError::OutOfRange(_))
        ));
    }

    #[test]
    fn initial_guess_equioscillation_error() {
        // max relative error 1/24, attained at m = 1, 9/4 and 4
        let mut max_err = 0.0_f64;
        let mut argmax = 0.0_f64;
        let n = 40_000;
        for i in 0..=n {
            let m = 1.0 + 3.0 * i as f64 / n as f64;
            let err = (initial_guess(m).unwrap() - m.sqrt()).abs() / m.sqrt();
            assert!(err <= 1.0 / 24.0 + 1e-10, "error {err} at m={m}");
            if err > max_err {
                max_err = err;
                argmax = m;
            }
        }
        assert!((max_err - 1.0 / 24.0).abs() < 1e-6);
        let near_extremum = [1.0, 2.25, 4.0]
            .iter()
            .any(|&x| (argmax - x).abs() < 2e-4 || (argmax - 1.0) < 1e-9);
        assert!(near_extremum, "extremum found at {argmax}");
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn reference_sqrt_examples() {
        assert_eq!(reference_sqrt(4.0), 2.0);
        assert_eq!(reference_sqrt(1.0), 1.0);
        // frozen: the nearest binary64 to sqrt(2)
        assert_eq!(reference_sqrt(2.0), 1.4142135623730951);
    }

    #[test]
    fn reference_sqrt_matches_double_double_heron() {
        // cross-check the platform square root against an independent
        // double-double Heron iteration
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..500 {
            let alpha: f64 = rng.gen_range(1.0..4.0);
            let dd = DoubleDouble::from_f64(alpha).sqrt();
            let platform = reference_sqrt(alpha);
            // the dd value rounds to the platform value
            assert_eq!(dd.to_f64(), platform, "alpha = {alpha:e}");
        }
    }

    #[test]
    fn grid_stays_inside_range() {
        let config = SqrtExperimentConfig::default();
        let grid = config.alpha_grid();
        assert_eq!(grid.len(), 256);
        assert_eq!(grid[0], 1.0);
        assert!(grid.iter().all(|&a| (1.0..4.0).contains(&a)));
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn small_experiment_stagnates_at_roundoff() {
        let config = SqrtExperimentConfig {
            epsilons: vec![1e-2, 1e-8],
            alpha_points: 16,
            max_iterations: 60,
            seed: 7,
        };
        let result = run_sqrt_experiment(&config).unwrap();
        assert_eq!(result.cells.len(), 32);
        for cell in &result.cells {
            let final_r = cell.trace.final_record().relative_error.unwrap();
            assert!(
                final_r <= 10.0 * UNIT_ROUNDOFF,
                "alpha={} eps={} final r={final_r:e}",
                cell.alpha,
                cell.epsilon
            );
            if cell.exact_hit {
                assert_eq!(final_r, 0.0);
            }
        }
    }

    #[test]
    fn rapid_linear_regime_at_large_epsilon() {
        let config = SqrtExperimentConfig {
            epsilons: vec![1e-2],
            alpha_points: 32,
            max_iterations: 60,
            seed: 11,
        };
        let result = run_sqrt_experiment(&config).unwrap();
        let gm = pooled_ratio_geometric_mean(result.cells.iter(), 10.0 * UNIT_ROUNDOFF).unwrap();
        assert!(gm > 5e-3 && gm < 4e-2, "geometric mean ratio {gm:e}");
    }

    #[test]
    fn experiment_is_deterministic() {
        let config = SqrtExperimentConfig {
            epsilons: vec![1e-8],
            alpha_points: 8,
            max_iterations: 60,
            seed: 99,
        };
        let a = run_sqrt_experiment(&config).unwrap();
        let b = run_sqrt_experiment(&config).unwrap();
        for (ca, cb) in a.cells.iter().zip(&b.cells) {
            assert_eq!(ca.trace.records.len(), cb.trace.records.len());
            for (ra, rb) in ca.trace.records.iter().zip(&cb.trace.records) {
                assert_eq!(ra.iterate[0].to_bits(), rb.iterate[0].to_bits());
            }
        }
    }

    #[test]
    fn cells_csv_shape() {
        let config = SqrtExperimentConfig {
            epsilons: vec![1e-8],
            alpha_points: 2,
            max_iterations: 60,
            seed: 1,
        };
        let result = run_sqrt_experiment(&config).unwrap();
        let mut buf = Vec::new();
        write_cells_csv(result.cells.iter(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "alpha,epsilon,k,residual_norm,r_k,e_norm,d_norm,nu_k"
        );
        assert!(lines.all(|l| l.split(',').count() == 8));
    }
}
