//! End-to-end verification suite: every acceptance check as an executable
//! criterion with a pass/fail report, shared by the CLI `verify` subcommand
//! and the integration tests.

use crate::dd::DoubleDouble;
use crate::linalg::{norm2, Matrix, Vector, UNIT_ROUNDOFF};
use crate::mdsim::{
    self, assemble_a, constraint_jacobian, run_md, Bond, ChainSpec, ConstraintSet, ForceField,
    MDSystem, MdError, MdRunResult, SolveMode,
};
use crate::solver::{self, StopRule};
use crate::sqrt_lab::{
    self, run_sqrt_experiment, SqrtExperimentConfig, SqrtExperimentResult, SqrtLabError,
};
use crate::theory::{self, TheoryParams};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sqrt(#[from] SqrtLabError),
    #[error(transparent)]
    Md(#[from] MdError),
}

/// Every tolerance and threshold of the suite, pinned here. The defaults are
/// the contract; overriding them exists for negative-control testing.
#[derive(Debug, Clone)]
pub struct Tolerances {
    /// Final relative error must reach this multiple of the unit roundoff.
    pub stagnation_roundoff_factor: f64,
    /// Window for the pooled geometric mean of pre-stagnation ratios at
    /// epsilon = 1e-2.
    pub linear_ratio_bounds: (f64, f64),
    /// Quadratic-regime constant: r_{k+1} <= C r_k^2.
    pub quadratic_constant: f64,
    /// Iterations to stagnation at epsilon = 1e-8.
    pub quadratic_max_iterations: usize,
    /// Fraction of cells where iteration counts at 1e-12 and 1e-8 must agree.
    pub sqrt_u_match_fraction: f64,
    /// Margin added to the local constants of the certificate.
    pub certificate_margin: f64,
    /// Factor in the stagnation-estimate consistency bound.
    pub root_consistency_factor: f64,
    /// Roundoff multiple for the error-operator identities.
    pub lemma3_roundoff_factor: f64,
    /// Roundoff multiple for the post-solve constraint violation.
    pub md_violation_factor: f64,
    /// Quasi-Newton iterations to stagnation on the chain.
    pub md_max_iterations: usize,
    /// Window for the rate-validation ratios.
    pub md_ratio_bounds: (f64, f64),
    /// Roundoff multiple for per-step momentum conservation.
    pub momentum_factor: f64,
    /// Relative tolerance of the finite-difference Jacobian checks.
    pub jacobian_fd_tolerance: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            stagnation_roundoff_factor: 10.0,
            linear_ratio_bounds: (5e-3, 4e-2),
            quadratic_constant: 1.5,
            quadratic_max_iterations: 4,
            sqrt_u_match_fraction: 0.95,
            certificate_margin: 0.1,
            root_consistency_factor: 10.0,
            lemma3_roundoff_factor: 32.0,
            md_violation_factor: 100.0,
            md_max_iterations: 10,
            md_ratio_bounds: (1e-2, 1e2),
            momentum_factor: 1e3,
            jacobian_fd_tolerance: 1e-6,
        }
    }
}

impl Tolerances {
    /// Override a tolerance by name; used by `verify --set`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let parse_f64 = || value.parse::<f64>().map_err(|e| format!("{key}: {e}"));
        let parse_usize = || value.parse::<usize>().map_err(|e| format!("{key}: {e}"));
        match key {
            "stagnation_roundoff_factor" => self.stagnation_roundoff_factor = parse_f64()?,
            "linear_ratio_lo" => self.linear_ratio_bounds.0 = parse_f64()?,
            "linear_ratio_hi" => self.linear_ratio_bounds.1 = parse_f64()?,
            "quadratic_constant" => self.quadratic_constant = parse_f64()?,
            "quadratic_max_iterations" => self.quadratic_max_iterations = parse_usize()?,
            "sqrt_u_match_fraction" => self.sqrt_u_match_fraction = parse_f64()?,
            "certificate_margin" => self.certificate_margin = parse_f64()?,
            "root_consistency_factor" => self.root_consistency_factor = parse_f64()?,
            "lemma3_roundoff_factor" => self.lemma3_roundoff_factor = parse_f64()?,
            "md_violation_factor" => self.md_violation_factor = parse_f64()?,
            "md_max_iterations" => self.md_max_iterations = parse_usize()?,
            "md_ratio_lo" => self.md_ratio_bounds.0 = parse_f64()?,
            "md_ratio_hi" => self.md_ratio_bounds.1 = parse_f64()?,
            "momentum_factor" => self.momentum_factor = parse_f64()?,
            "jacobian_fd_tolerance" => self.jacobian_fd_tolerance = parse_f64()?,
            other => return Err(format!("unknown tolerance '{other}'")),
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CriterionReport {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CriterionReport {
    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {:2} {:<34} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

pub const CRITERION_NAMES: [(usize, &str); 10] = [
    (1, "sqrt stagnation independence"),
    (2, "sqrt linear regime rate"),
    (3, "sqrt quadratic regime"),
    (4, "sqrt-u accuracy sufficiency"),
    (5, "one-step error bound certificate"),
    (6, "stagnation root consistency"),
    (7, "error operator identities"),
    (8, "md constraint solve surrogate"),
    (9, "jacobian finite-difference oracle"),
    (10, "deterministic artifacts"),
];

fn name_of(id: usize) -> &'static str {
    CRITERION_NAMES[id - 1].1
}

/// Default configuration of the square-root grid used by the suite.
pub fn default_sqrt_config(seed: u64) -> SqrtExperimentConfig {
    SqrtExperimentConfig {
        seed,
        ..SqrtExperimentConfig::default()
    }
}

/// Default chain system and run length used by the suite.
pub fn default_md_setup(seed: u64) -> (ChainSpec, usize, usize) {
    (
        ChainSpec {
            seed,
            ..ChainSpec::default()
        },
        1000,
        50,
    )
}

/// Run every criterion at the given master seed. `scratch` receives the
/// artifact runs used by the determinism criterion.
pub fn run_all(
    seed: u64,
    scratch: &Path,
    tol: &Tolerances,
) -> Result<Vec<CriterionReport>, VerifyError> {
    let sqrt = run_sqrt_experiment(&default_sqrt_config(seed))?;
    let (chain, steps, sample_every) = default_md_setup(seed);
    let mut system = MDSystem::chain(&chain)?;
    let md = run_md(&mut system, steps, sample_every, &StopRule::default())?;
    Ok(vec![
        criterion_1(&sqrt, tol),
        criterion_2(&sqrt, tol),
        criterion_3(&sqrt, tol),
        criterion_4(&sqrt, tol),
        criterion_5(&sqrt, tol),
        criterion_6(tol),
        criterion_7(seed, tol),
        criterion_8(&md, tol),
        criterion_9(seed, tol),
        criterion_10(seed, scratch)?,
    ])
}

/// Final relative error reaches the roundoff floor for every epsilon and
/// every alpha; exact hits count as passes.
pub fn criterion_1(sqrt: &SqrtExperimentResult, tol: &Tolerances) -> CriterionReport {
    let floor = tol.stagnation_roundoff_factor * UNIT_ROUNDOFF;
    let mut worst = 0.0_f64;
    let mut failures = 0usize;
    let mut exact_hits = 0usize;
    for cell in &sqrt.cells {
        let final_r = cell
            .trace
            .final_record()
            .relative_error
            .expect("sqrt traces have relative errors");
        if cell.exact_hit {
            exact_hits += 1;
        }
        worst = worst.max(final_r);
        if final_r > floor {
            failures += 1;
        }
    }
    CriterionReport {
        id: 1,
        name: name_of(1),
        passed: failures == 0,
        detail: format!(
            "{} cells, {} exact hits, worst final error {:.2}u (floor {}u)",
            sqrt.cells.len(),
            exact_hits,
            worst / UNIT_ROUNDOFF,
            tol.stagnation_roundoff_factor
        ),
    }
}

/// Pooled geometric mean of pre-stagnation ratios at epsilon = 1e-2 sits in
/// the rapid-linear-convergence window.
pub fn criterion_2(sqrt: &SqrtExperimentResult, tol: &Tolerances) -> CriterionReport {
    let threshold = tol.stagnation_roundoff_factor * UNIT_ROUNDOFF;
    let cells: Vec<_> = sqrt.cells.iter().filter(|c| c.epsilon == 1e-2).collect();
    let gm = sqrt_lab::pooled_ratio_geometric_mean(cells.iter().copied(), threshold);
    let (lo, hi) = tol.linear_ratio_bounds;
    match gm {
        Some(gm) => CriterionReport {
            id: 2,
            name: name_of(2),
            passed: gm >= lo && gm <= hi,
            detail: format!("geometric mean ratio {gm:.3e} in [{lo:.0e}, {hi:.0e}]"),
        },
        None => CriterionReport {
            id: 2,
            name: name_of(2),
            passed: false,
            detail: "no pre-stagnation ratios at epsilon 1e-2".into(),
        },
    }
}

/// Quadratic regime at epsilon = 1e-8: every pre-stagnation step from
/// r_k >= 1e-8 contracts quadratically with constant at most 1.5, and
/// stagnation is reached within 4 iterations from r_0 <= 1/24.
pub fn criterion_3(sqrt: &SqrtExperimentResult, tol: &Tolerances) -> CriterionReport {
    let threshold = tol.stagnation_roundoff_factor * UNIT_ROUNDOFF;
    let mut quad_violations = 0usize;
    let mut worst_c = 0.0_f64;
    let mut slow_cells = 0usize;
    let mut max_iters = 0usize;
    let mut checked_pairs = 0usize;
    for cell in sqrt.cells.iter().filter(|c| c.epsilon == 1e-8) {
        let r0 = cell.trace.records[0].relative_error.unwrap();
        if r0 > 1.0 / 24.0 + 1e-10 {
            quad_violations += 1;
            continue;
        }
        for (_, rk, rk1) in solver::pre_stagnation_pairs(&cell.trace, threshold) {
            if rk < 1e-8 {
                continue;
            }
            checked_pairs += 1;
            let c = rk1 / (rk * rk);
            worst_c = worst_c.max(c);
            if c > tol.quadratic_constant {
                quad_violations += 1;
            }
        }
        match solver::iterations_to_threshold(&cell.trace, threshold) {
            Some(its) => {
                max_iters = max_iters.max(its);
                if its > tol.quadratic_max_iterations {
                    slow_cells += 1;
                }
            }
            None => slow_cells += 1,
        }
    }
    CriterionReport {
        id: 3,
        name: name_of(3),
        passed: quad_violations == 0 && slow_cells == 0,
        detail: format!(
            "{checked_pairs} quadratic steps, worst constant {worst_c:.3} (cap {}), max iterations {max_iters} (cap {})",
            tol.quadratic_constant, tol.quadratic_max_iterations
        ),
    }
}

/// Reducing epsilon below sqrt(u) buys nothing: iteration counts at 1e-12
/// match those at 1e-8 in at least 95% of alpha cells.
pub fn criterion_4(sqrt: &SqrtExperimentResult, tol: &Tolerances) -> CriterionReport {
    let threshold = tol.stagnation_roundoff_factor * UNIT_ROUNDOFF;
    let count_for = |eps: f64| -> Vec<Option<usize>> {
        let mut cells: Vec<_> = sqrt.cells.iter().filter(|c| c.epsilon == eps).collect();
        cells.sort_by_key(|c| c.alpha_index);
        cells
            .iter()
            .map(|c| solver::iterations_to_threshold(&c.trace, threshold))
            .collect()
    };
    let at_8 = count_for(1e-8);
    let at_12 = count_for(1e-12);
    if at_8.is_empty() || at_8.len() != at_12.len() {
        return CriterionReport {
            id: 4,
            name: name_of(4),
            passed: false,
            detail: "epsilon grids for 1e-8 and 1e-12 do not align".into(),
        };
    }
    let matches = at_8
        .iter()
        .zip(&at_12)
        .filter(|(a, b)| a.is_some() && a == b)
        .count();
    let fraction = matches as f64 / at_8.len() as f64;
    CriterionReport {
        id: 4,
        name: name_of(4),
        passed: fraction >= tol.sqrt_u_match_fraction,
        detail: format!(
            "iteration counts match in {matches}/{} cells ({:.1}%, need {:.0}%)",
            at_8.len(),
            100.0 * fraction,
            100.0 * tol.sqrt_u_match_fraction
        ),
    }
}

/// One-step error bound certificate: with local constants carrying a 10%
/// margin and per-step errors measured against the exact Newton correction
/// (computed in double-double), every traced step of every cell satisfies
/// the bound with the update error pinned at the unit roundoff.
pub fn criterion_5(sqrt: &SqrtExperimentResult, tol: &Tolerances) -> CriterionReport {
    let margin = tol.certificate_margin;
    let k_z = 0.5 + margin; // bound on |F'^-1| * |z|
    let m_k = 1.0 + margin; // bound on |F'| * |F'^-1|
    let lipschitz = 2.0 + margin;
    let mut violations = 0usize;
    let mut steps = 0usize;
    let mut worst_margin = f64::INFINITY;
    for cell in &sqrt.cells {
        let m = cell.reduced;
        let zero = DoubleDouble::from_f64(m).sqrt();
        for window in cell.trace.records.windows(2) {
            let x_k = window[0].iterate[0];
            let x_next = window[1].iterate[0];
            let t_k = window[0]
                .correction
                .as_ref()
                .expect("non-final records carry the correction")[0];
            let relative_to_zero =
                |x: f64| DoubleDouble::from_f64(x).sub(zero).abs().div(zero).to_f64();
            let r_k = relative_to_zero(x_k);
            let r_next = relative_to_zero(x_next);
            // exact Newton correction (x^2 - m) / (2x) in double-double
            let exact_step = DoubleDouble::prod(x_k, x_k)
                .sub(DoubleDouble::from_f64(m))
                .div(DoubleDouble::from_f64(2.0 * x_k));
            let correction_error = if exact_step.to_f64() == 0.0 {
                0.0
            } else {
                DoubleDouble::from_f64(t_k)
                    .sub(exact_step)
                    .abs()
                    .div(exact_step.abs())
                    .to_f64()
            };
            let params = TheoryParams::new(
                k_z,
                lipschitz,
                m_k / k_z,
                UNIT_ROUNDOFF,
                correction_error,
                1.0,
            )
            .expect("certificate constants are valid");
            let bound = theory::error_bound_step(r_k, &params);
            steps += 1;
            worst_margin = worst_margin.min(bound - r_next);
            if r_next > bound {
                violations += 1;
            }
        }
    }
    CriterionReport {
        id: 5,
        name: name_of(5),
        passed: violations == 0,
        detail: format!(
            "{steps} steps checked, {violations} violations, slimmest margin {:.2}u",
            worst_margin / UNIT_ROUNDOFF
        ),
    }
}

/// Independent bisection bracket of the smaller root of the stagnation
/// quadratic `D - (1 - EMK(1+D)) r + (L K (1+D) |z| / 2) r^2`.
pub fn bisect_smaller_root(p: &TheoryParams) -> Option<f64> {
    let a =
        0.5 * p.lipschitz * p.inverse_jacobian_bound * (1.0 + p.update_error_bound) * p.zero_norm;
    let b = 1.0
        - p.correction_error_bound
            * p.jacobian_bound
            * p.inverse_jacobian_bound
            * (1.0 + p.update_error_bound);
    let c = p.update_error_bound;
    if a == 0.0 || b <= 0.0 {
        return None;
    }
    let quadratic = |r: f64| c - b * r + a * r * r;
    let vertex = 0.5 * b / a;
    if quadratic(vertex) > 0.0 {
        return None;
    }
    let (mut lo, mut hi) = (0.0_f64, vertex);
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if quadratic(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Deterministic parameter grid for the stagnation-root checks: the first
/// 100 combinations satisfying the smallness constraints.
fn root_consistency_grid() -> Vec<TheoryParams> {
    let d_values = [1e-16, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4];
    let e_values = [0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2];
    let shapes = [
        (1.0, 1.0, 1.0, 1.0),
        (0.5, 2.0, 1.5, 0.8),
        (2.0, 0.5, 1.0, 1.3),
    ];
    let mut grid = Vec::new();
    'outer: for &(k, l, m, z) in &shapes {
        for &d in &d_values {
            for &e in &e_values {
                let p = TheoryParams::new(k, l, m, d, e, z).unwrap();
                let drag = e * m * k * (1.0 + d);
                let curvature = 2.0 * l * k * (1.0 + d) * d * z;
                if drag <= 0.1 && curvature <= 0.1 {
                    grid.push(p);
                    if grid.len() == 100 {
                        break 'outer;
                    }
                }
            }
        }
    }
    grid
}

/// Stagnation-root consistency: the closed-form roots null the quadratic,
/// agree with the independent bisection bracket, and the Taylor estimate
/// stays within the stated tolerance of the smaller root.
pub fn criterion_6(tol: &Tolerances) -> CriterionReport {
    let grid = root_consistency_grid();
    let mut residual_failures = 0usize;
    let mut bracket_failures = 0usize;
    let mut estimate_failures = 0usize;
    let mut worst_excess = 0.0_f64;
    let mut worst_case = String::new();
    for p in &grid {
        let (lo, hi) = match theory::stagnation_roots(p) {
            Ok(roots) => roots,
            Err(_) => {
                residual_failures += 1;
                continue;
            }
        };
        let a = 0.5
            * p.lipschitz
            * p.inverse_jacobian_bound
            * (1.0 + p.update_error_bound)
            * p.zero_norm;
        let b = 1.0
            - p.correction_error_bound
                * p.jacobian_bound
                * p.inverse_jacobian_bound
                * (1.0 + p.update_error_bound);
        for r in [lo, hi] {
            let residual = (p.update_error_bound - b * r + a * r * r).abs();
            if residual > 1e3 * UNIT_ROUNDOFF * p.update_error_bound.max(1.0) {
                residual_failures += 1;
            }
        }
        match bisect_smaller_root(p) {
            Some(bracket) if (bracket - lo).abs() <= 1e-10 * bracket.max(f64::MIN_POSITIVE) => {}
            _ => bracket_failures += 1,
        }
        let estimate = match theory::stagnation_estimate(p) {
            Ok(e) => e,
            Err(_) => {
                estimate_failures += 1;
                continue;
            }
        };
        let relative = (estimate - lo).abs() / lo;
        let drag = p.correction_error_bound * p.jacobian_bound * p.inverse_jacobian_bound;
        let allowance = tol.root_consistency_factor
            * (p.lipschitz
                * p.inverse_jacobian_bound
                * (1.0 + p.update_error_bound)
                * p.zero_norm
                * p.update_error_bound
                + drag * drag);
        if relative > allowance {
            estimate_failures += 1;
            let excess = relative / allowance;
            if excess > worst_excess {
                worst_excess = excess;
                worst_case = format!(
                    "D={:.0e} E={:.0e}: |est-root|/root {:.2e} vs allowed {:.2e}",
                    p.update_error_bound, p.correction_error_bound, relative, allowance
                );
            }
        }
    }
    let passed = residual_failures == 0 && bracket_failures == 0 && estimate_failures == 0;
    let detail = if passed {
        format!(
            "{} parameter sets: roots, brackets and estimates consistent",
            grid.len()
        )
    } else {
        format!(
            "{} sets: {residual_failures} residual, {bracket_failures} bracket, {estimate_failures} estimate failures; worst {worst_case}",
            grid.len()
        )
    };
    CriterionReport {
        id: 6,
        name: name_of(6),
        passed,
        detail,
    }
}

/// Error-operator identities on random pairs: reconstruction `(I+E)x = y`
/// and agreement of the two norm routes, both within a roundoff multiple.
pub fn criterion_7(seed: u64, tol: &Tolerances) -> CriterionReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x4c33); // dedicated stream for the operator suite
    let factor = tol.lemma3_roundoff_factor * UNIT_ROUNDOFF;
    let mut worst_reconstruction = 0.0_f64;
    let mut worst_norm_gap = 0.0_f64;
    let mut failures = 0usize;
    let total = 10_000;
    for _ in 0..total {
        let n = rng.gen_range(1..=100);
        let mut x = Vector::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        while norm2(&x) == 0.0 {
            x = Vector::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        }
        let y = Vector::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let op = theory::error_operator(&x, &y).expect("x is nonzero");
        let reconstruction = norm2(&x.add(&op.matrix().matvec(&x)).sub(&y));
        let scale = norm2(&y).max(norm2(&x));
        worst_reconstruction = worst_reconstruction.max(reconstruction / scale);
        if reconstruction > factor * scale {
            failures += 1;
        }
        let direct = norm2(&x.sub(&y)) / norm2(&x);
        let gap = (op.norm2() - direct).abs();
        if op.norm2() > 0.0 {
            worst_norm_gap = worst_norm_gap.max(gap / op.norm2());
        }
        if gap > factor * op.norm2() {
            failures += 1;
        }
    }
    CriterionReport {
        id: 7,
        name: name_of(7),
        passed: failures == 0,
        detail: format!(
            "{total} pairs: worst reconstruction {:.2}u, worst norm gap {:.2}u",
            worst_reconstruction / UNIT_ROUNDOFF,
            worst_norm_gap / UNIT_ROUNDOFF
        ),
    }
}

/// Chain surrogate: post-solve violations at roundoff, stagnation within the
/// iteration budget, modest rate-validation ratios, and per-step momentum
/// conservation.
pub fn criterion_8(md: &MdRunResult, tol: &Tolerances) -> CriterionReport {
    let mut violation_failures = 0usize;
    let mut worst_violation = 0.0_f64;
    let mut slow_solves = 0usize;
    let mut max_shoulder = 0usize;
    let mut ratio_failures = 0usize;
    let mut ratio_count = 0usize;
    let (nu_lo, nu_hi) = tol.md_ratio_bounds;
    for sampled in &md.reports {
        let report = &sampled.report;
        worst_violation = worst_violation.max(report.final_violation);
        if report.final_violation > tol.md_violation_factor * UNIT_ROUNDOFF {
            violation_failures += 1;
        }
        match report.stagnation_index() {
            Some(shoulder) => {
                max_shoulder = max_shoulder.max(shoulder);
                if shoulder > tol.md_max_iterations {
                    slow_solves += 1;
                }
            }
            None => slow_solves += 1,
        }
        for (_, nu) in report.pre_stagnation_ratios() {
            ratio_count += 1;
            if !(nu_lo..=nu_hi).contains(&nu) {
                ratio_failures += 1;
            }
        }
    }
    let mut momentum_failures = 0usize;
    let mut worst_drift = 0.0_f64;
    for pair in md.trajectory.windows(2) {
        let scale = pair[0].momentum_scale.max(f64::MIN_POSITIVE);
        let drift = (0..3)
            .map(|c| (pair[1].momentum[c] - pair[0].momentum[c]).powi(2))
            .sum::<f64>()
            .sqrt();
        worst_drift = worst_drift.max(drift / scale);
        if drift > tol.momentum_factor * UNIT_ROUNDOFF * scale {
            momentum_failures += 1;
        }
    }
    let passed = md.reports.len() >= 20
        && violation_failures == 0
        && slow_solves == 0
        && ratio_failures == 0
        && momentum_failures == 0;
    CriterionReport {
        id: 8,
        name: name_of(8),
        passed,
        detail: format!(
            "{} solves: worst violation {:.1}u, max stagnation index {max_shoulder}, {ratio_count} ratios ({ratio_failures} outside), worst momentum drift {:.2}u",
            md.reports.len(),
            worst_violation / UNIT_ROUNDOFF,
            worst_drift / UNIT_ROUNDOFF
        ),
    }
}

/// Central-difference Jacobian of a vector map; the independent oracle for
/// the analytic Jacobians.
pub fn finite_difference_jacobian<F>(f: F, x: &Vector, step: f64) -> Matrix
where
    F: Fn(&Vector) -> Vector,
{
    let base_rows = f(x).len();
    let mut jac = Matrix::zeros(base_rows, x.len());
    for j in 0..x.len() {
        let mut plus = x.clone();
        plus[j] += step;
        let mut minus = x.clone();
        minus[j] -= step;
        let fp = f(&plus);
        let fm = f(&minus);
        for i in 0..base_rows {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * step);
        }
    }
    jac
}

fn random_test_system(rng: &mut ChaCha8Rng) -> MDSystem {
    let n = 6;
    let mut positions = Vector::zeros(3 * n);
    for i in 0..n {
        positions[3 * i] = i as f64;
        for c in 0..3 {
            positions[3 * i + c] += rng.gen_range(-0.1..0.1);
        }
    }
    let velocities = Vector::from_vec((0..3 * n).map(|_| rng.gen_range(-0.5..0.5)).collect());
    let masses = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
    let bonds = (0..n - 1)
        .map(|i| Bond {
            a: i,
            b: i + 1,
            length: 1.0,
        })
        .collect();
    MDSystem::new(
        positions,
        velocities,
        masses,
        ForceField::LennardJones {
            epsilon: 0.25,
            sigma: 1.0,
        },
        ConstraintSet::new(bonds).unwrap(),
        0.01,
    )
    .unwrap()
}

/// Analytic constraint Jacobian and the multiplier-to-residual Jacobian both
/// match central finite differences on randomized states.
pub fn criterion_9(seed: u64, tol: &Tolerances) -> CriterionReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x4a43); // dedicated stream for the Jacobian oracle
    let step = 1e-6;
    let mut worst = 0.0_f64;
    let mut failures = 0usize;
    let states = 100;
    for _ in 0..states {
        let system = random_test_system(&mut rng);
        let constraints = system.constraints().clone();
        let analytic = constraint_jacobian(system.positions(), &constraints);
        let fd = finite_difference_jacobian(
            |q| mdsim::constraint_values(q, &constraints),
            system.positions(),
            step,
        );
        let scale = analytic.max_abs().max(1.0);
        let deviation = fd.sub(&analytic).max_abs() / scale;
        worst = worst.max(deviation);
        if deviation > tol.jacobian_fd_tolerance {
            failures += 1;
        }

        let m = constraints.len();
        let lambda = Vector::from_vec((0..m).map(|_| rng.gen_range(-0.5..0.5)).collect());
        // the multiplier enters phi through -h^2 M^-1 g'(q)^T, so the true
        // Jacobian of lambda -> g(phi(lambda)) is -h^2 times the assembled
        // approximate-Jacobian matrix
        let h = system.time_step();
        let analytic_a = assemble_a(&system, &lambda).scaled(-h * h);
        // the finite-difference route goes through the same bonded-pair force
        // exclusions as the solve path
        let ctx_forces = system.force_field().evaluate(
            system.positions(),
            system.n_atoms(),
            &excluded_pairs_of(&constraints),
        );
        let sys = system.clone();
        let fd_a = finite_difference_jacobian(
            |l| {
                let phi = mdsim::trial_positions(
                    l,
                    sys.positions(),
                    sys.half_step_velocities(),
                    sys.time_step(),
                    &ctx_forces,
                    sys.masses(),
                    sys.constraints(),
                );
                mdsim::constraint_values(&phi, sys.constraints())
            },
            &lambda,
            step,
        );
        let scale_a = analytic_a.max_abs().max(1.0);
        let dev_a = fd_a.sub(&analytic_a).max_abs() / scale_a;
        worst = worst.max(dev_a);
        if dev_a > tol.jacobian_fd_tolerance {
            failures += 1;
        }
    }
    CriterionReport {
        id: 9,
        name: name_of(9),
        passed: failures == 0,
        detail: format!(
            "{states} states: worst relative deviation {worst:.2e} (tolerance {:.0e})",
            tol.jacobian_fd_tolerance
        ),
    }
}

fn excluded_pairs_of(constraints: &ConstraintSet) -> std::collections::HashSet<(usize, usize)> {
    constraints
        .bonds()
        .iter()
        .map(|b| (b.a.min(b.b), b.a.max(b.b)))
        .collect()
}

/// Write the full artifact set (square-root CSVs, report and trajectory
/// CSVs) for one run into `dir`; returns the relative file names written.
pub fn write_artifacts(seed: u64, dir: &Path) -> Result<Vec<String>, VerifyError> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let sqrt = run_sqrt_experiment(&default_sqrt_config(seed))?;
    let config = default_sqrt_config(seed);
    for (idx, eps) in config.epsilons.iter().enumerate() {
        let name = format!("sqrt_eps_{eps:e}.csv");
        let mut buf = Vec::new();
        sqrt_lab::write_cells_csv(sqrt.cells_for_epsilon(idx), &mut buf)?;
        fs::write(dir.join(&name), &buf)?;
        files.push(name);
    }
    let (chain, steps, sample_every) = default_md_setup(seed);
    let mut system = MDSystem::chain(&chain)?;
    let md = run_md(&mut system, steps, sample_every, &StopRule::default())?;
    let mut buf = Vec::new();
    mdsim::write_reports_csv(&md.reports, &mut buf)?;
    fs::write(dir.join("md_reports.csv"), &buf)?;
    files.push("md_reports.csv".into());
    let mut buf = Vec::new();
    mdsim::write_trajectory_csv(&md.trajectory, &mut buf)?;
    fs::write(dir.join("md_trajectory.csv"), &buf)?;
    files.push("md_trajectory.csv".into());
    Ok(files)
}

/// Two artifact runs at the same seed are byte-identical.
pub fn criterion_10(seed: u64, scratch: &Path) -> Result<CriterionReport, VerifyError> {
    let dir_a = scratch.join("determinism_a");
    let dir_b = scratch.join("determinism_b");
    let files_a = write_artifacts(seed, &dir_a)?;
    let files_b = write_artifacts(seed, &dir_b)?;
    let mut mismatches = Vec::new();
    if files_a != files_b {
        mismatches.push("file lists differ".to_string());
    }
    for name in &files_a {
        let a = fs::read(dir_a.join(name))?;
        let b = fs::read(dir_b.join(name))?;
        if a != b {
            mismatches.push(name.clone());
        }
    }
    Ok(CriterionReport {
        id: 10,
        name: name_of(10),
        passed: mismatches.is_empty(),
        detail: if mismatches.is_empty() {
            format!(
                "{} artifact files byte-identical across runs",
                files_a.len()
            )
        } else {
            format!("mismatched artifacts: {}", mismatches.join(", "))
        },
    })
}

/// Instrumented solve entry used by tests that need a single sampled report.
pub fn single_chain_solve(seed: u64) -> Result<mdsim::ConstraintSolveReport, MdError> {
    let system = MDSystem::chain(&ChainSpec {
        seed,
        ..ChainSpec::default()
    })?;
    mdsim::solve_constraints(&system, SolveMode::QuasiNewtonS, &StopRule::default())
}
