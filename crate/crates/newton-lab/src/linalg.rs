//! Minimal dense linear algebra: vectors, row-major matrices, 2-norms,
//! LU with partial pivoting and Cholesky factorization.
//!
//! Everything here is sized for desk-scale problems (n up to a few
//! hundred); storage is dense and solves are direct.

use thiserror::Error;

/// Unit roundoff of binary64, half the machine epsilon.
pub const UNIT_ROUNDOFF: f64 = f64::EPSILON * 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    /// A pivot magnitude fell to (or below) the singularity threshold.
    #[error("matrix is singular: pivot {pivot:e} at column {column} is at or below threshold {threshold:e}")]
    SingularMatrix {
        column: usize,
        pivot: f64,
        threshold: f64,
    },
    /// A Cholesky diagonal pivot was not strictly positive.
    #[error("matrix is not positive definite: diagonal pivot {pivot:e} at column {column}")]
    NotPositiveDefinite { column: usize, pivot: f64 },
    /// Symmetry check before Cholesky failed.
    #[error("matrix is not symmetric: |S - S^T| = {deviation:e} exceeds {tolerance:e}")]
    NotSymmetric { deviation: f64, tolerance: f64 },
    /// Problem data contained NaN or infinity.
    #[error("non-finite entry at index {index}")]
    NonFiniteEntry { index: usize },
}

/// Dense column vector of `f64` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    entries: Vec<f64>,
}

impl Vector {
    pub fn from_vec(entries: Vec<f64>) -> Self {
        Vector { entries }
    }

    pub fn from_slice(entries: &[f64]) -> Self {
        Vector {
            entries: entries.to_vec(),
        }
    }

    /// Construction from external problem data; rejects NaN/Inf.
    pub fn checked(entries: Vec<f64>) -> Result<Self, LinalgError> {
        for (index, e) in entries.iter().enumerate() {
            if !e.is_finite() {
                return Err(LinalgError::NonFiniteEntry { index });
            }
        }
        Ok(Vector { entries })
    }

    pub fn zeros(n: usize) -> Self {
        Vector {
            entries: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.entries.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.is_finite())
    }

    /// self - other, componentwise.
    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "vector length mismatch");
        Vector {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// self + other, componentwise.
    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "vector length mismatch");
        Vector {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Vector {
        Vector {
            entries: self.entries.iter().map(|a| a * factor).collect(),
        }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.entries[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.entries[i]
    }
}

/// Euclidean norm, with scaling to avoid overflow on large entries.
pub fn norm2(v: &Vector) -> f64 {
    let max = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if max == 0.0 || !max.is_finite() {
        return if max == 0.0 { 0.0 } else { f64::INFINITY };
    }
    let mut sum = 0.0;
    for x in v.iter() {
        let t = x / max;
        sum += t * t;
    }
    max * sum.sqrt()
}

/// Euclidean inner product.
pub fn dot(u: &Vector, v: &Vector) -> f64 {
    assert_eq!(u.len(), v.len(), "vector length mismatch");
    u.iter().zip(v.iter()).map(|(a, b)| a * b).sum()
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix shape/data mismatch");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|e| e.is_finite())
    }

    /// A * x.
    pub fn matvec(&self, x: &Vector) -> Vector {
        assert_eq!(self.cols, x.len(), "matvec shape mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            out[i] = row.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        }
        Vector::from_vec(out)
    }

    /// A^T * x.
    pub fn matvec_transpose(&self, x: &Vector) -> Vector {
        assert_eq!(self.rows, x.len(), "matvec_transpose shape mismatch");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * xi;
            }
        }
        Vector::from_vec(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * factor).collect(),
        }
    }

    /// self - other, entrywise.
    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&Vector::from_slice(&self.data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// LU factorization with partial pivoting, stored packed.
#[derive(Debug, Clone)]
pub struct LuFactors {
    lu: Matrix,
    perm: Vec<usize>,
}

impl LuFactors {
    /// Factor with the default singularity threshold (exact zero pivot).
    pub fn factor(a: &Matrix) -> Result<Self, LinalgError> {
        Self::factor_with_threshold(a, 0.0)
    }

    /// Factor; a pivot with magnitude <= `threshold` (after row exchange)
    /// reports `SingularMatrix`.
    pub fn factor_with_threshold(a: &Matrix, threshold: f64) -> Result<Self, LinalgError> {
        assert!(a.is_square(), "LU requires a square matrix");
        let n = a.rows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut pivot_row = col;
            let mut pivot_mag = lu[(col, col)].abs();
            for r in col + 1..n {
                let mag = lu[(r, col)].abs();
                if mag > pivot_mag {
                    pivot_mag = mag;
                    pivot_row = r;
                }
            }
            if pivot_mag <= threshold {
                return Err(LinalgError::SingularMatrix {
                    column: col,
                    pivot: pivot_mag,
                    threshold,
                });
            }
            if pivot_row != col {
                for j in 0..n {
                    let tmp = lu[(col, j)];
                    lu[(col, j)] = lu[(pivot_row, j)];
                    lu[(pivot_row, j)] = tmp;
                }
                perm.swap(col, pivot_row);
            }
            let pivot = lu[(col, col)];
            for r in col + 1..n {
                let factor = lu[(r, col)] / pivot;
                lu[(r, col)] = factor;
                for j in col + 1..n {
                    lu[(r, j)] -= factor * lu[(col, j)];
                }
            }
        }
        Ok(LuFactors { lu, perm })
    }

    pub fn solve(&self, b: &Vector) -> Vector {
        let n = self.lu.rows();
        assert_eq!(b.len(), n, "rhs length mismatch");
        let mut x = vec![0.0; n];
        // forward substitution on the permuted rhs
        for i in 0..n {
            let mut sum = b[self.perm[i]];
            for j in 0..i {
                sum -= self.lu[(i, j)] * x[j];
            }
            x[i] = sum;
        }
        // back substitution
        for i in (0..n).rev() {
            let mut sum = x[i];
            for j in i + 1..n {
                sum -= self.lu[(i, j)] * x[j];
            }
            x[i] = sum / self.lu[(i, i)];
        }
        Vector::from_vec(x)
    }
}

/// Solve A x = b by LU with partial pivoting.
pub fn lu_solve(a: &Matrix, b: &Vector) -> Result<Vector, LinalgError> {
    Ok(LuFactors::factor(a)?.solve(b))
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
///
/// Factoring checks symmetry to tolerance `8u * max|S|` first; S assembled
/// from products is symmetric only to roundoff.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: Matrix,
}

impl CholeskyFactor {
    pub fn factor(s: &Matrix) -> Result<Self, LinalgError> {
        assert!(s.is_square(), "Cholesky requires a square matrix");
        let n = s.rows();
        let tolerance = 8.0 * UNIT_ROUNDOFF * s.max_abs();
        let mut deviation = 0.0_f64;
        for i in 0..n {
            for j in i + 1..n {
                deviation = deviation.max((s[(i, j)] - s[(j, i)]).abs());
            }
        }
        if deviation > tolerance {
            return Err(LinalgError::NotSymmetric {
                deviation,
                tolerance,
            });
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = s[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if d <= 0.0 {
                return Err(LinalgError::NotPositiveDefinite {
                    column: j,
                    pivot: d,
                });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in j + 1..n {
                let mut v = s[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = v / djj;
            }
        }
        Ok(CholeskyFactor { l })
    }

    pub fn solve(&self, b: &Vector) -> Vector {
        let n = self.l.rows();
        assert_eq!(b.len(), n, "rhs length mismatch");
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut sum = b[i];
            for j in 0..i {
                sum -= self.l[(i, j)] * y[j];
            }
            y[i] = sum / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut sum = y[i];
            for j in i + 1..n {
                sum -= self.l[(j, i)] * y[j];
            }
            y[i] = sum / self.l[(i, i)];
        }
        Vector::from_vec(y)
    }
}

/// Solve S x = b by Cholesky factorization.
pub fn cholesky_solve(s: &Matrix, b: &Vector) -> Result<Vector, LinalgError> {
    Ok(CholeskyFactor::factor(s)?.solve(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lu_identity() {
        let a = Matrix::identity(2);
        let b = Vector::from_slice(&[5.0, 7.0]);
        let x = lu_solve(&a, &b).unwrap();
        assert_eq!(x.as_slice(), &[5.0, 7.0]);
    }

    #[test]
    fn lu_two_by_two() {
        // verified by substitution: 2*1 + 3 = 5, 1 + 3*3 = 10
        let a = Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 3.0]]);
        let b = Vector::from_slice(&[5.0, 10.0]);
        let x = lu_solve(&a, &b).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14);
        assert!((x[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn lu_rank_deficient() {
        let a = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let b = Vector::from_slice(&[1.0, 2.0]);
        match lu_solve(&a, &b) {
            Err(LinalgError::SingularMatrix { .. }) => {}
            other => panic!("expected SingularMatrix, got {other:?}"),
        }
    }

    #[test]
    fn lu_configurable_pivot_threshold() {
        // well-conditioned, but a threshold above the pivot magnitude trips
        let a = Matrix::from_rows(&[&[1e-3, 0.0], &[0.0, 1e-3]]);
        assert!(LuFactors::factor(&a).is_ok());
        match LuFactors::factor_with_threshold(&a, 1e-2) {
            Err(LinalgError::SingularMatrix { threshold, .. }) => assert_eq!(threshold, 1e-2),
            other => panic!("expected SingularMatrix, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_diagonal() {
        // verified by substitution: 4*2 = 8, 9*3 = 27
        let s = Matrix::from_rows(&[&[4.0, 0.0], &[0.0, 9.0]]);
        let b = Vector::from_slice(&[8.0, 27.0]);
        let x = cholesky_solve(&s, &b).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-14);
        assert!((x[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn cholesky_identity() {
        let s = Matrix::identity(3);
        let b = Vector::from_slice(&[1.0, 2.0, 3.0]);
        let x = cholesky_solve(&s, &b).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn cholesky_indefinite() {
        // eigenvalues 3 and -1
        let s = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
        let b = Vector::from_slice(&[1.0, 1.0]);
        match cholesky_solve(&s, &b) {
            Err(LinalgError::NotPositiveDefinite { .. }) => {}
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let s = Matrix::from_rows(&[&[2.0, 1.0], &[0.5, 2.0]]);
        let b = Vector::from_slice(&[1.0, 1.0]);
        match cholesky_solve(&s, &b) {
            Err(LinalgError::NotSymmetric { .. }) => {}
            other => panic!("expected NotSymmetric, got {other:?}"),
        }
    }

    #[test]
    fn norm_examples() {
        assert_eq!(norm2(&Vector::from_slice(&[3.0, 4.0])), 5.0);
        assert_eq!(norm2(&Vector::zeros(4)), 0.0);
        assert_eq!(
            dot(
                &Vector::from_slice(&[1.0, 2.0]),
                &Vector::from_slice(&[3.0, 4.0])
            ),
            11.0
        );
    }

    #[test]
    fn checked_rejects_nan() {
        assert!(Vector::checked(vec![1.0, f64::NAN]).is_err());
        assert!(Vector::checked(vec![1.0, 2.0]).is_ok());
    }

    /// Spectral norm estimate by power iteration on A^T A; test-only.
    fn spectral_norm(a: &Matrix, rng: &mut ChaCha8Rng) -> f64 {
        let n = a.cols();
        let mut v = Vector::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut norm = 0.0;
        for _ in 0..60 {
            let w = a.matvec_transpose(&a.matvec(&v));
            norm = norm2(&w).sqrt();
            let s = norm2(&w);
            if s == 0.0 {
                return 0.0;
            }
            v = w.scaled(1.0 / s);
        }
        norm
    }

    /// Condition number estimate ||A||_2 ||A^-1||_2 via power iteration;
    /// the inverse norm runs power iteration with LU solves. Test-only.
    fn condition_estimate(a: &Matrix, rng: &mut ChaCha8Rng) -> f64 {
        let f = match LuFactors::factor(a) {
            Ok(f) => f,
            Err(_) => return f64::INFINITY,
        };
        let at = a.transpose();
        let ft = match LuFactors::factor(&at) {
            Ok(f) => f,
            Err(_) => return f64::INFINITY,
        };
        let n = a.cols();
        let mut v = Vector::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut inv_norm = 0.0;
        for _ in 0..60 {
            // w = A^-T A^-1 v  (power iteration for the smallest singular value of A)
            let w = ft.solve(&f.solve(&v));
            inv_norm = norm2(&w).sqrt();
            let s = norm2(&w);
            if s == 0.0 {
                return f64::INFINITY;
            }
            v = w.scaled(1.0 / s);
        }
        spectral_norm(a, rng) * inv_norm
    }

    #[test]
    fn lu_residual_bound_on_well_conditioned_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tested = 0;
        while tested < 40 {
            let n = rng.gen_range(2..=50);
            let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = Matrix::from_vec(n, n, data);
            if condition_estimate(&a, &mut rng) > 1e4 {
                continue;
            }
            let b = Vector::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let x = lu_solve(&a, &b).unwrap();
            let residual = norm2(&a.matvec(&x).sub(&b));
            let bound = 1e3
                * UNIT_ROUNDOFF
                * spectral_norm(&a, &mut rng)
                * norm2(&x).max(f64::MIN_POSITIVE);
            assert!(
                residual <= bound,
                "residual {residual:e} exceeds {bound:e} for n={n}"
            );
            tested += 1;
        }
    }

    #[test]
    fn cholesky_agrees_with_lu_on_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let n = rng.gen_range(1..=30);
            let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b_mat = Matrix::from_vec(n, n, data);
            // S = B B^T + 0.5 I is SPD and exactly symmetric by construction order
            let mut s = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let mut v = 0.0;
                    for k in 0..n {
                        v += b_mat[(i, k)] * b_mat[(j, k)];
                    }
                    s[(i, j)] = v + if i == j { 0.5 } else { 0.0 };
                }
            }
            let rhs = Vector::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let xc = cholesky_solve(&s, &rhs).unwrap();
            let xl = lu_solve(&s, &rhs).unwrap();
            let diff = norm2(&xc.sub(&xl)) / norm2(&xl).max(f64::MIN_POSITIVE);
            assert!(diff <= 1e-8, "solvers disagree by {diff:e} at n={n}");
        }
    }

    proptest! {
        #[test]
        fn norm_absolutely_homogeneous(
            v in proptest::collection::vec(-1e6f64..1e6, 1..20),
            c in -1e3f64..1e3,
        ) {
            let vec = Vector::from_vec(v);
            let lhs = norm2(&vec.scaled(c));
            let rhs = c.abs() * norm2(&vec);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
        }

        #[test]
        fn norm_triangle_inequality(
            pairs in proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 1..20),
        ) {
            let u = Vector::from_vec(pairs.iter().map(|p| p.0).collect());
            let v = Vector::from_vec(pairs.iter().map(|p| p.1).collect());
            let lhs = norm2(&u.add(&v));
            let rhs = norm2(&u) + norm2(&v);
            prop_assert!(lhs <= rhs * (1.0 + 1e-16) + 1e-300);
        }
    }
}
