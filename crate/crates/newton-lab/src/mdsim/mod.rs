//! Desk-scale constrained molecular dynamics: SHAKE time stepping on a
//! small chain with bond-length constraints, the constraint equation solved
//! by a quasi-Newton method that reuses the fixed symmetric matrix
//! `S = g'(q) M^-1 g'(q)^T`, instrumented against full Newton on the true
//! Jacobian `A(lambda) = g'(phi(lambda)) M^-1 g'(q)^T`.

mod forces;

pub use forces::ForceField;

use crate::linalg::{norm2, CholeskyFactor, LinalgError, Matrix, Vector};
use crate::solver::{
    self, IterationTrace, PerturbationModel, Problem, RatioSeries, SolverError, StopReason,
    StopRule,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::HashSet;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MdError {
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error("degenerate geometry: bonded atoms {a} and {b} coincide")]
    DegenerateGeometry { a: usize, b: usize },
    #[error("system definition parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("constraint solve did not stagnate within {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<MdError>,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// A bond-length constraint between two atoms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub length: f64,
}

/// The constraint set: distinct atom pairs with positive target lengths.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintSet {
    bonds: Vec<Bond>,
}

impl ConstraintSet {
    pub fn new(bonds: Vec<Bond>) -> Result<Self, MdError> {
        let mut seen = HashSet::new();
        for bond in &bonds {
            if bond.a == bond.b {
                return Err(MdError::InvalidSystem(format!(
                    "constraint references atom {} twice",
                    bond.a
                )));
            }
            if !(bond.length > 0.0) || !bond.length.is_finite() {
                return Err(MdError::InvalidSystem(format!(
                    "constraint ({}, {}) has non-positive length {}",
                    bond.a, bond.b, bond.length
                )));
            }
            let key = (bond.a.min(bond.b), bond.a.max(bond.b));
            if !seen.insert(key) {
                return Err(MdError::InvalidSystem(format!(
                    "duplicate constraint pair ({}, {})",
                    key.0, key.1
                )));
            }
        }
        Ok(ConstraintSet { bonds })
    }

    pub fn len(&self) -> usize {
        self.bonds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bonds.is_empty()
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    fn excluded_pairs(&self) -> HashSet<(usize, usize)> {
        self.bonds
            .iter()
            .map(|b| (b.a.min(b.b), b.a.max(b.b)))
            .collect()
    }
}

/// Constraint values `g_i(q) = |q_a - q_b|^2 - d_i^2`.
pub fn constraint_values(positions: &Vector, constraints: &ConstraintSet) -> Vector {
    let mut g = Vector::zeros(constraints.len());
    for (i, bond) in constraints.bonds().iter().enumerate() {
        let mut r2 = 0.0;
        for c in 0..3 {
            let d = positions[3 * bond.a + c] - positions[3 * bond.b + c];
            r2 += d * d;
        }
        g[i] = r2 - bond.length * bond.length;
    }
    g
}

/// Jacobian of the constraint function: row `i` carries `2(q_a - q_b)` in
/// atom `a`'s coordinate block and the negation in atom `b`'s block.
pub fn constraint_jacobian(positions: &Vector, constraints: &ConstraintSet) -> Matrix {
    let cols = positions.len();
    let mut jac = Matrix::zeros(constraints.len(), cols);
    for (i, bond) in constraints.bonds().iter().enumerate() {
        for c in 0..3 {
            let d = positions[3 * bond.a + c] - positions[3 * bond.b + c];
            jac[(i, 3 * bond.a + c)] = 2.0 * d;
            jac[(i, 3 * bond.b + c)] = -2.0 * d;
        }
    }
    jac
}

/// Largest relative bond-length violation `| |q_a - q_b| - d | / d`.
pub fn max_relative_violation(positions: &Vector, constraints: &ConstraintSet) -> f64 {
    let mut max = 0.0_f64;
    for bond in constraints.bonds() {
        let mut r2 = 0.0;
        for c in 0..3 {
            let d = positions[3 * bond.a + c] - positions[3 * bond.b + c];
            r2 += d * d;
        }
        max = max.max((r2.sqrt() - bond.length).abs() / bond.length);
    }
    max
}

/// Trial positions `phi(lambda) = q + h (v + h M^-1 (f - g'(q)^T lambda))`.
pub fn trial_positions(
    lambda: &Vector,
    positions: &Vector,
    half_step_velocities: &Vector,
    time_step: f64,
    forces: &Vector,
    masses: &[f64],
    constraints: &ConstraintSet,
) -> Vector {
    let jac = constraint_jacobian(positions, constraints);
    trial_positions_with_jacobian(
        lambda,
        positions,
        half_step_velocities,
        time_step,
        forces,
        masses,
        &jac,
    )
}

fn trial_positions_with_jacobian(
    lambda: &Vector,
    positions: &Vector,
    half_step_velocities: &Vector,
    time_step: f64,
    forces: &Vector,
    masses: &[f64],
    jacobian_q: &Matrix,
) -> Vector {
    let constraint_force = jacobian_q.matvec_transpose(lambda);
    let n = positions.len();
    let mut phi = Vector::zeros(n);
    for i in 0..n {
        let accel = (forces[i] - constraint_force[i]) / masses[i / 3];
        phi[i] = positions[i] + time_step * (half_step_velocities[i] + time_step * accel);
    }
    phi
}

/// The constant symmetric matrix `S = g'(q) M^-1 g'(q)^T`; positive definite
/// whenever the constraint Jacobian has full row rank.
pub fn assemble_s(positions: &Vector, constraints: &ConstraintSet, masses: &[f64]) -> Matrix {
    let jac = constraint_jacobian(positions, constraints);
    scaled_product(&jac, &jac, masses)
}

/// The true constraint Jacobian `A(lambda) = g'(phi(lambda)) M^-1 g'(q)^T`,
/// generally nonsymmetric.
pub fn assemble_a(system: &MDSystem, lambda: &Vector) -> Matrix {
    let ctx = StepContext::new(system);
    ctx.jacobian_at(lambda)
}

/// `left M^-1 right^T` for two constraint Jacobians with the diagonal mass
/// matrix applied per coordinate.
fn scaled_product(left: &Matrix, right: &Matrix, masses: &[f64]) -> Matrix {
    let m = left.rows();
    let cols = left.cols();
    let mut out = Matrix::zeros(m, right.rows());
    for i in 0..m {
        for j in 0..right.rows() {
            let mut sum = 0.0;
            for c in 0..cols {
                sum += left[(i, c)] * right[(j, c)] / masses[c / 3];
            }
            out[(i, j)] = sum;
        }
    }
    out
}

/// State of the constrained system on the staggered SHAKE grids: positions
/// at full steps, velocities at half steps.
#[derive(Debug, Clone)]
pub struct MDSystem {
    n_atoms: usize,
    positions: Vector,
    half_step_velocities: Vector,
    masses: Vec<f64>,
    force_field: ForceField,
    constraints: ConstraintSet,
    time_step: f64,
}

impl MDSystem {
    pub fn new(
        positions: Vector,
        half_step_velocities: Vector,
        masses: Vec<f64>,
        force_field: ForceField,
        constraints: ConstraintSet,
        time_step: f64,
    ) -> Result<Self, MdError> {
        let n_atoms = masses.len();
        if positions.len() != 3 * n_atoms || half_step_velocities.len() != 3 * n_atoms {
            return Err(MdError::InvalidSystem(format!(
                "expected 3N = {} coordinates, got {} positions and {} velocities",
                3 * n_atoms,
                positions.len(),
                half_step_velocities.len()
            )));
        }
        if n_atoms == 0 {
            return Err(MdError::InvalidSystem("no atoms".into()));
        }
        if !positions.is_finite() || !half_step_velocities.is_finite() {
            return Err(MdError::InvalidSystem(
                "non-finite positions or velocities".into(),
            ));
        }
        if masses.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(MdError::InvalidSystem("masses must be positive".into()));
        }
        if !(time_step > 0.0) || !time_step.is_finite() {
            return Err(MdError::InvalidSystem(format!(
                "time step must be positive, got {time_step}"
            )));
        }
        for bond in constraints.bonds() {
            if bond.a >= n_atoms || bond.b >= n_atoms {
                return Err(MdError::InvalidSystem(format!(
                    "constraint ({}, {}) references a missing atom (N = {n_atoms})",
                    bond.a, bond.b
                )));
            }
            let mut r2 = 0.0;
            for c in 0..3 {
                let d = positions[3 * bond.a + c] - positions[3 * bond.b + c];
                r2 += d * d;
            }
            if r2 == 0.0 {
                return Err(MdError::DegenerateGeometry {
                    a: bond.a,
                    b: bond.b,
                });
            }
        }
        Ok(MDSystem {
            n_atoms,
            positions,
            half_step_velocities,
            masses,
            force_field,
            constraints,
            time_step,
        })
    }

    /// Linear chain of `n_atoms` along the x axis at `bond_length` spacing,
    /// centered on the origin, with seeded thermal velocities (net momentum
    /// removed) and consecutive-pair bond constraints.
    pub fn chain(spec: &ChainSpec) -> Result<Self, MdError> {
        if spec.n_atoms < 2 {
            return Err(MdError::InvalidSystem(
                "chain needs at least 2 atoms".into(),
            ));
        }
        let n = spec.n_atoms;
        let mut positions = Vector::zeros(3 * n);
        let offset = 0.5 * (n as f64 - 1.0) * spec.bond_length;
        for i in 0..n {
            positions[3 * i] = i as f64 * spec.bond_length - offset;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(0x4d44); // dedicated stream for velocity initialization
        let mut velocities = Vector::zeros(3 * n);
        if spec.temperature > 0.0 {
            let scale = (spec.temperature / spec.mass).sqrt();
            for i in 0..3 * n {
                velocities[i] = scale * rng.sample::<f64, _>(StandardNormal);
            }
            // remove the center-of-mass velocity so total momentum starts at zero
            for c in 0..3 {
                let mean: f64 = (0..n).map(|i| velocities[3 * i + c]).sum::<f64>() / n as f64;
                for i in 0..n {
                    velocities[3 * i + c] -= mean;
                }
            }
        }
        let bonds = (0..n - 1)
            .map(|i| Bond {
                a: i,
                b: i + 1,
                length: spec.bond_length,
            })
            .collect();
        MDSystem::new(
            positions,
            velocities,
            vec![spec.mass; n],
            spec.force_field.clone(),
            ConstraintSet::new(bonds)?,
            spec.time_step,
        )
    }

    /// Parse the plain-text system definition: `key = value` lines followed
    /// by a `constraints:` table of `atom_a atom_b length` rows. A `layout =
    /// chain` system generates positions from `bond_length`; the table is
    /// still authoritative for the constraints.
    pub fn from_definition(text: &str, seed: u64) -> Result<Self, MdError> {
        let mut keys: Vec<(usize, String, String)> = Vec::new();
        let mut bonds: Vec<Bond> = Vec::new();
        let mut in_table = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "constraints:" {
                in_table = true;
                continue;
            }
            if in_table {
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() != 3 {
                    return Err(MdError::Parse {
                        line: line_no,
                        message: format!(
                            "expected 'atom_a atom_b length', got {} fields",
                            fields.len()
                        ),
                    });
                }
                let parse_idx = |s: &str| {
                    s.parse::<usize>().map_err(|_| MdError::Parse {
                        line: line_no,
                        message: format!("invalid atom index '{s}'"),
                    })
                };
                let a = parse_idx(fields[0])?;
                let b = parse_idx(fields[1])?;
                let length = fields[2].parse::<f64>().map_err(|_| MdError::Parse {
                    line: line_no,
                    message: format!("invalid bond length '{}'", fields[2]),
                })?;
                bonds.push(Bond { a, b, length });
            } else {
                let (key, value) = line.split_once('=').ok_or_else(|| MdError::Parse {
                    line: line_no,
                    message: "expected 'key = value'".into(),
                })?;
                keys.push((line_no, key.trim().to_string(), value.trim().to_string()));
            }
        }

        let mut n_atoms = None;
        let mut mass = 1.0;
        let mut time_step = None;
        let mut temperature = 0.0;
        let mut bond_length = 1.0;
        let mut lj_epsilon = None;
        let mut lj_sigma = None;
        let mut layout = String::from("chain");
        for (line, key, value) in &keys {
            let bad_number = |what: &str| MdError::Parse {
                line: *line,
                message: format!("invalid {what} '{value}'"),
            };
            match key.as_str() {
                "atoms" => {
                    n_atoms = Some(
                        value
                            .parse::<usize>()
                            .map_err(|_| bad_number("atom count"))?,
                    )
                }
                "mass" => mass = value.parse().map_err(|_| bad_number("mass"))?,
                "time_step" => {
                    time_step = Some(value.parse().map_err(|_| bad_number("time step"))?)
                }
                "temperature" => {
                    temperature = value.parse().map_err(|_| bad_number("temperature"))?
                }
                "bond_length" => {
                    bond_length = value.parse().map_err(|_| bad_number("bond length"))?
                }
                "lj_epsilon" => {
                    lj_epsilon = Some(value.parse().map_err(|_| bad_number("lj_epsilon"))?)
                }
                "lj_sigma" => lj_sigma = Some(value.parse().map_err(|_| bad_number("lj_sigma"))?),
                "layout" => layout = value.clone(),
                other => {
                    return Err(MdError::Parse {
                        line: *line,
                        message: format!("unknown key '{other}'"),
                    })
                }
            }
        }
        let n_atoms = n_atoms.ok_or(MdError::Parse {
            line: 0,
            message: "missing 'atoms' key".into(),
        })?;
        let time_step = time_step.ok_or(MdError::Parse {
            line: 0,
            message: "missing 'time_step' key".into(),
        })?;
        if layout != "chain" {
            return Err(MdError::Parse {
                line: 0,
                message: format!("unknown layout '{layout}'"),
            });
        }
        let force_field = match (lj_epsilon, lj_sigma) {
            (None, None) => ForceField::None,
            (e, s) => ForceField::LennardJones {
                epsilon: e.unwrap_or(1.0),
                sigma: s.unwrap_or(1.0),
            },
        };
        let chain = MDSystem::chain(&ChainSpec {
            n_atoms,
            bond_length,
            mass,
            temperature,
            time_step,
            force_field,
            seed,
        })?;
        // the table overrides the implicit consecutive-pair constraints
        MDSystem::new(
            chain.positions,
            chain.half_step_velocities,
            chain.masses,
            chain.force_field,
            ConstraintSet::new(bonds)?,
            time_step,
        )
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn positions(&self) -> &Vector {
        &self.positions
    }

    pub fn half_step_velocities(&self) -> &Vector {
        &self.half_step_velocities
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    pub fn time_step(&self) -> f64 {
        self.time_step
    }

    pub fn force_field(&self) -> &ForceField {
        &self.force_field
    }

    /// Kinetic energy of the half-step velocities.
    pub fn kinetic_energy(&self) -> f64 {
        let mut e = 0.0;
        for i in 0..3 * self.n_atoms {
            let v = self.half_step_velocities[i];
            e += 0.5 * self.masses[i / 3] * v * v;
        }
        e
    }

    /// Total linear momentum components.
    pub fn momentum(&self) -> [f64; 3] {
        let mut p = [0.0; 3];
        for i in 0..self.n_atoms {
            for c in 0..3 {
                p[c] += self.masses[i] * self.half_step_velocities[3 * i + c];
            }
        }
        p
    }

    /// Momentum magnitude scale `sum_i m_i |v_i|`, used to make conservation
    /// statements relative.
    pub fn momentum_scale(&self) -> f64 {
        let mut scale = 0.0;
        for i in 0..self.n_atoms {
            let mut v2 = 0.0;
            for c in 0..3 {
                let v = self.half_step_velocities[3 * i + c];
                v2 += v * v;
            }
            scale += self.masses[i] * v2.sqrt();
        }
        scale
    }

    /// One SHAKE step: solve the constraint equation, update the half-step
    /// velocities with external and constraint forces, advance positions.
    pub fn shake_step(&mut self, stop: &StopRule) -> Result<(), MdError> {
        let ctx = StepContext::new(self);
        let lambda = ctx.lean_quasi_newton(stop)?;
        self.apply_multiplier(&ctx, &lambda);
        Ok(())
    }

    fn apply_multiplier(&mut self, ctx: &StepContext, lambda: &Vector) {
        let constraint_force = ctx.jacobian_q.matvec_transpose(lambda);
        for i in 0..3 * self.n_atoms {
            let accel = (ctx.forces[i] - constraint_force[i]) / self.masses[i / 3];
            self.half_step_velocities[i] += self.time_step * accel;
            self.positions[i] += self.time_step * self.half_step_velocities[i];
        }
    }
}

/// Parameters for building a chain system.
#[derive(Debug, Clone)]
pub struct ChainSpec {
    pub n_atoms: usize,
    pub bond_length: f64,
    pub mass: f64,
    pub temperature: f64,
    pub time_step: f64,
    pub force_field: ForceField,
    pub seed: u64,
}

impl Default for ChainSpec {
    fn default() -> Self {
        ChainSpec {
            n_atoms: 20,
            bond_length: 1.0,
            mass: 1.0,
            temperature: 0.25,
            time_step: 0.005,
            force_field: ForceField::LennardJones {
                epsilon: 0.25,
                sigma: 1.0,
            },
            seed: crate::DEFAULT_SEED,
        }
    }
}

/// Frozen per-time-step data: the state the constraint equation for this
/// step is built from.
#[derive(Clone)]
struct StepContext {
    positions: Vector,
    velocities: Vector,
    time_step: f64,
    forces: Vector,
    masses: Vec<f64>,
    constraints: ConstraintSet,
    jacobian_q: Matrix,
}

impl StepContext {
    fn new(system: &MDSystem) -> Self {
        let forces = system.force_field.evaluate(
            &system.positions,
            system.n_atoms,
            &system.constraints.excluded_pairs(),
        );
        let jacobian_q = constraint_jacobian(&system.positions, &system.constraints);
        StepContext {
            positions: system.positions.clone(),
            velocities: system.half_step_velocities.clone(),
            time_step: system.time_step,
            forces,
            masses: system.masses.clone(),
            constraints: system.constraints.clone(),
            jacobian_q,
        }
    }

    fn trial_positions(&self, lambda: &Vector) -> Vector {
        trial_positions_with_jacobian(
            lambda,
            &self.positions,
            &self.velocities,
            self.time_step,
            &self.forces,
            &self.masses,
            &self.jacobian_q,
        )
    }

    fn residual(&self, lambda: &Vector) -> Vector {
        constraint_values(&self.trial_positions(lambda), &self.constraints)
    }

    fn jacobian_at(&self, lambda: &Vector) -> Matrix {
        let phi = self.trial_positions(lambda);
        let jac_phi = constraint_jacobian(&phi, &self.constraints);
        scaled_product(&jac_phi, &self.jacobian_q, &self.masses)
    }

    /// True Jacobian of `lambda -> g(phi(lambda))`: the multiplier enters
    /// `phi` through `-h^2 M^-1 g'(q)^T`, so the approximate-Jacobian matrix
    /// picks up a `-h^2` factor when used to solve.
    fn solve_jacobian_at(&self, lambda: &Vector) -> Matrix {
        self.jacobian_at(lambda)
            .scaled(-self.time_step * self.time_step)
    }

    fn fixed_matrix(&self) -> Matrix {
        scaled_product(&self.jacobian_q, &self.jacobian_q, &self.masses)
    }

    fn problem(&self) -> Problem {
        let residual_ctx = self.clone();
        let jacobian_ctx = self.clone();
        Problem::new(
            self.constraints.len(),
            move |lambda: &Vector| residual_ctx.residual(lambda),
            move |lambda: &Vector| jacobian_ctx.solve_jacobian_at(lambda),
        )
    }

    /// Correction solver reusing the Cholesky factor of the fixed matrix,
    /// with the `-h^2` multiplier scaling applied.
    fn fixed_matrix_solver(
        &self,
    ) -> Result<impl Fn(&Matrix, &Vector) -> Result<Vector, LinalgError> + Send + Sync, MdError>
    {
        let factor = CholeskyFactor::factor(&self.fixed_matrix())?;
        let scale = -1.0 / (self.time_step * self.time_step);
        Ok(move |_: &Matrix, rhs: &Vector| Ok(factor.solve(rhs).scaled(scale)))
    }

    /// Quasi-Newton solve with the fixed factored matrix, no instrumentation.
    fn lean_quasi_newton(&self, stop: &StopRule) -> Result<Vector, MdError> {
        if self.constraints.is_empty() {
            return Ok(Vector::zeros(0));
        }
        let perturbation = PerturbationModel::custom(self.fixed_matrix_solver()?);
        let trace = solver::iterate(
            &self.problem(),
            &Vector::zeros(self.constraints.len()),
            &perturbation,
            stop,
        )?;
        if trace.stop_reason == StopReason::MaxIterations {
            return Err(MdError::NoConvergence {
                iterations: trace.iterations(),
            });
        }
        Ok(best_iterate(&trace))
    }
}

/// Iterate with the smallest residual; stagnation representative of a solve.
fn best_iterate(trace: &IterationTrace) -> Vector {
    let mut best = &trace.records[0];
    for record in &trace.records {
        if record.residual_norm < best.residual_norm {
            best = record;
        }
    }
    best.iterate.clone()
}

/// Which matrix drives the constraint iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    /// Fixed symmetric matrix, factored once and reused.
    QuasiNewtonS,
    /// Full Newton on the true Jacobian, refactored every iteration.
    NewtonA,
}

/// Instrumented constraint solve: trace with relative errors against the
/// Newton-to-stagnation reference multiplier and measured correction-error
/// norms, plus the post-solve constraint violation.
#[derive(Debug)]
pub struct ConstraintSolveReport {
    pub mode: SolveMode,
    /// Best-residual multiplier of the requested solve.
    pub multiplier: Vector,
    /// Newton reference multiplier the errors are measured against.
    pub reference: Vector,
    pub trace: IterationTrace,
    pub ratios: RatioSeries,
    /// Max relative bond violation at the trial positions of each iterate.
    pub violations: Vec<f64>,
    /// Max relative bond violation at the updated positions.
    pub final_violation: f64,
    pub iterations: usize,
}

impl ConstraintSolveReport {
    pub fn relative_errors(&self) -> Vec<Option<f64>> {
        self.trace.relative_errors()
    }

    /// First iteration within a factor 10 of the smallest recorded relative
    /// error; falls back to the residual shoulder when errors are absent.
    pub fn stagnation_index(&self) -> Option<usize> {
        let errors: Option<Vec<f64>> = self
            .trace
            .records
            .iter()
            .map(|r| r.relative_error)
            .collect();
        match errors {
            Some(rs) if !rs.is_empty() => solver::stagnation_shoulder(&rs, 10.0),
            _ => solver::stagnation_shoulder(&self.trace.residual_norms(), 10.0),
        }
    }

    /// Rate-validation ratios for steps strictly before the stagnation
    /// shoulder.
    pub fn pre_stagnation_ratios(&self) -> Vec<(usize, f64)> {
        let Some(shoulder) = self.stagnation_index() else {
            return Vec::new();
        };
        self.ratios
            .values
            .iter()
            .filter(|(k, _)| k + 1 < shoulder)
            .cloned()
            .collect()
    }
}

/// Solve the constraint equation for the current state with full
/// instrumentation. The reference zero is full Newton on the true Jacobian
/// continued to stagnation.
pub fn solve_constraints(
    system: &MDSystem,
    mode: SolveMode,
    stop: &StopRule,
) -> Result<ConstraintSolveReport, MdError> {
    solve_with_context(&StepContext::new(system), mode, stop)
}

fn solve_with_context(
    ctx: &StepContext,
    mode: SolveMode,
    stop: &StopRule,
) -> Result<ConstraintSolveReport, MdError> {
    let m = ctx.constraints.len();
    if m == 0 {
        return Ok(ConstraintSolveReport {
            mode,
            multiplier: Vector::zeros(0),
            reference: Vector::zeros(0),
            trace: IterationTrace {
                records: Vec::new(),
                stop_reason: StopReason::ResidualFloor,
            },
            ratios: RatioSeries::default(),
            violations: Vec::new(),
            final_violation: 0.0,
            iterations: 0,
        });
    }

    let x0 = Vector::zeros(m);
    let reference_trace = solver::iterate(&ctx.problem(), &x0, &PerturbationModel::exact(), stop)?;
    if reference_trace.stop_reason == StopReason::MaxIterations {
        return Err(MdError::NoConvergence {
            iterations: reference_trace.iterations(),
        });
    }
    let reference = best_iterate(&reference_trace);

    let mut problem = ctx.problem();
    if norm2(&reference) > 0.0 {
        problem = problem.with_known_zero(reference.clone());
    }
    let trace = match mode {
        SolveMode::NewtonA => solver::iterate(&problem, &x0, &PerturbationModel::exact(), stop)?,
        SolveMode::QuasiNewtonS => {
            let perturbation = PerturbationModel::custom(ctx.fixed_matrix_solver()?);
            solver::iterate(&problem, &x0, &perturbation, stop)?
        }
    };
    if trace.stop_reason == StopReason::MaxIterations {
        return Err(MdError::NoConvergence {
            iterations: trace.iterations(),
        });
    }
    let multiplier = best_iterate(&trace);
    let final_violation =
        max_relative_violation(&ctx.trial_positions(&multiplier), &ctx.constraints);
    let violations = trace
        .records
        .iter()
        .map(|r| max_relative_violation(&ctx.trial_positions(&r.iterate), &ctx.constraints))
        .collect();
    let ratios = solver::measure_ratios(&trace);
    let iterations = trace.iterations();
    Ok(ConstraintSolveReport {
        mode,
        multiplier,
        reference,
        trace,
        ratios,
        violations,
        final_violation,
        iterations,
    })
}

/// Post-step observables for the trajectory summary.
#[derive(Debug, Clone)]
pub struct TrajectorySample {
    pub step: usize,
    pub kinetic_energy: f64,
    pub max_violation: f64,
    pub momentum: [f64; 3],
    /// Momentum magnitude scale at this state.
    pub momentum_scale: f64,
}

fn sample_state(system: &MDSystem, step: usize) -> TrajectorySample {
    TrajectorySample {
        step,
        kinetic_energy: system.kinetic_energy(),
        max_violation: max_relative_violation(&system.positions, &system.constraints),
        momentum: system.momentum(),
        momentum_scale: system.momentum_scale(),
    }
}

#[derive(Debug)]
pub struct SampledSolve {
    pub step: usize,
    pub report: ConstraintSolveReport,
}

#[derive(Debug)]
pub struct MdRunResult {
    pub reports: Vec<SampledSolve>,
    /// Row 0 is the initial state, then one row per step.
    pub trajectory: Vec<TrajectorySample>,
}

/// Advance `n_steps` SHAKE steps; every `sample_every`-th step runs the
/// instrumented quasi-Newton solve and records its report. The trajectory is
/// identical with and without sampling.
pub fn run_md(
    system: &mut MDSystem,
    n_steps: usize,
    sample_every: usize,
    stop: &StopRule,
) -> Result<MdRunResult, MdError> {
    let mut reports = Vec::new();
    let mut trajectory = Vec::with_capacity(n_steps + 1);
    trajectory.push(sample_state(system, 0));
    for step in 1..=n_steps {
        let wrap = |source: MdError| MdError::StepFailed {
            step,
            source: Box::new(source),
        };
        let sampled = sample_every > 0 && step % sample_every == 0;
        let ctx = StepContext::new(system);
        if sampled {
            let report = solve_with_context(&ctx, SolveMode::QuasiNewtonS, stop).map_err(wrap)?;
            system.apply_multiplier(&ctx, &report.multiplier);
            reports.push(SampledSolve { step, report });
        } else {
            let lambda = ctx.lean_quasi_newton(stop).map_err(wrap)?;
            system.apply_multiplier(&ctx, &lambda);
        }
        trajectory.push(sample_state(system, step));
    }
    Ok(MdRunResult {
        reports,
        trajectory,
    })
}

/// Report CSV: `step,k,r_k,e_norm,nu_k,violation`; the violation column is
/// the constraint violation at the trial positions of iterate `k`.
pub fn write_reports_csv<W: Write>(reports: &[SampledSolve], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "step,k,r_k,e_norm,nu_k,violation")?;
    for sampled in reports {
        let report = &sampled.report;
        for record in &report.trace.records {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                sampled.step,
                record.k,
                opt(record.relative_error),
                opt(record.correction_error),
                opt(report.ratios.value_at(record.k)),
                report.violations[record.k],
            )?;
        }
    }
    Ok(())
}

/// Trajectory CSV: `step,kinetic_energy,max_violation,momentum_x,momentum_y,momentum_z`.
pub fn write_trajectory_csv<W: Write>(
    trajectory: &[TrajectorySample],
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(
        out,
        "step,kinetic_energy,max_violation,momentum_x,momentum_y,momentum_z"
    )?;
    for sample in trajectory {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            sample.step,
            sample.kinetic_energy,
            sample.max_violation,
            sample.momentum[0],
            sample.momentum[1],
            sample.momentum[2],
        )?;
    }
    Ok(())
}
