//! Dense symmetric linear algebra used by every other module.
//!
//! The algorithms are deliberately simple and robust at desk scale
//! (dimensions up to a couple of thousand): power iteration on the Gram
//! matrix for spectral norms, cyclic Jacobi rotations for symmetric
//! eigenvalues, and dense Cholesky for positive-definite solves. Storage is
//! dense row-major throughout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Relative tolerance used when validating that a matrix claimed symmetric
/// actually is.
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("entry count {got} does not match {rows}x{cols}")]
    EntryCount { rows: usize, cols: usize, got: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not symmetric: |entries[{row}][{col}] - entries[{col}][{row}]| = {deviation:.3e}")]
    NotSymmetric { row: usize, col: usize, deviation: f64 },
    #[error("matrix dimension must be at least 1")]
    EmptyMatrix,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(
        "power iteration did not converge after {iterations} iterations \
         (last estimate {estimate:.6e}, residual {residual:.3e})"
    )]
    PowerIterationStalled { iterations: usize, estimate: f64, residual: f64 },
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("Jacobi eigenvalue sweep limit reached (off-diagonal norm {off_norm:.3e})")]
    JacobiStalled { off_norm: f64 },
}

/// Dense row-major matrix of 64-bit floats. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self, NumericsError> {
        if entries.len() != rows * cols {
            return Err(NumericsError::EntryCount { rows, cols, got: entries.len() });
        }
        for (pos, &e) in entries.iter().enumerate() {
            if !e.is_finite() {
                return Err(NumericsError::NonFinite { row: pos / cols.max(1), col: pos % cols.max(1) });
            }
        }
        Ok(Self { rows, cols, entries })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, entries: vec![0.0; rows * cols] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m.entries[i * dim + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        for row in rows {
            if row.len() != c {
                return Err(NumericsError::EntryCount { rows: r, cols: c, got: row.len() });
            }
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.entries[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.entries[row * self.cols..(row + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.entries[j * self.rows + i] = self.entries[i * self.cols + j];
            }
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|e| e * factor).collect(),
        }
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let out_row = &mut out.entries[i * other.cols..(i + 1) * other.cols];
            for (k, &l) in lhs_row.iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                let rhs_row = other.row(k);
                for (o, &r) in out_row.iter_mut().zip(rhs_row) {
                    *o += l * r;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "vector length must match column count");
        self.entries
            .chunks_exact(self.cols.max(1))
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `self^T v` without materializing the transpose.
    pub fn matvec_transposed(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "vector length must match row count");
        let mut out = vec![0.0; self.cols];
        for (row, &vi) in self.entries.chunks_exact(self.cols.max(1)).zip(v) {
            if vi == 0.0 {
                continue;
            }
            for (o, &r) in out.iter_mut().zip(row) {
                *o += vi * r;
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |acc, e| acc.max(e.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|&e| e == 0.0)
    }
}

/// Dense symmetric matrix. Construction symmetrizes as `(S + S^T) / 2`, so
/// stored entries are exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl SymMatrix {
    /// Validates near-symmetry of `entries` and stores the exact
    /// symmetrization.
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self, NumericsError> {
        if entries.len() != dim * dim {
            return Err(NumericsError::EntryCount { rows: dim, cols: dim, got: entries.len() });
        }
        let mut max_abs = 0.0f64;
        for (pos, &e) in entries.iter().enumerate() {
            if !e.is_finite() {
                return Err(NumericsError::NonFinite { row: pos / dim.max(1), col: pos % dim.max(1) });
            }
            max_abs = max_abs.max(e.abs());
        }
        let tol = SYMMETRY_TOL * (1.0 + max_abs);
        for i in 0..dim {
            for j in (i + 1)..dim {
                let deviation = (entries[i * dim + j] - entries[j * dim + i]).abs();
                if deviation > tol {
                    return Err(NumericsError::NotSymmetric { row: i, col: j, deviation });
                }
            }
        }
        Ok(Self::symmetrized(dim, entries))
    }

    /// Builds from a square dense matrix, validating symmetry within
    /// tolerance first.
    pub fn from_dense(m: &DenseMatrix) -> Result<Self, NumericsError> {
        if m.rows() != m.cols() {
            return Err(NumericsError::DimensionMismatch { expected: m.rows(), got: m.cols() });
        }
        Self::new(m.rows(), m.entries().to_vec())
    }

    /// Symmetrizes without the symmetry check; entries must be finite.
    pub(crate) fn symmetrized(dim: usize, mut entries: Vec<f64>) -> Self {
        for i in 0..dim {
            for j in (i + 1)..dim {
                let avg = 0.5 * (entries[i * dim + j] + entries[j * dim + i]);
                entries[i * dim + j] = avg;
                entries[j * dim + i] = avg;
            }
        }
        Self { dim, entries }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, entries: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.entries[i * dim + i] = 1.0;
        }
        m
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut m = Self::zeros(dim);
        for (i, &d) in diag.iter().enumerate() {
            m.entries[i * dim + i] = d;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.dim + col]
    }

    #[inline]
    pub(crate) fn add_at(&mut self, row: usize, col: usize, value: f64) {
        self.entries[row * self.dim + col] += value;
        if row != col {
            self.entries[col * self.dim + row] += value;
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix { rows: self.dim, cols: self.dim, entries: self.entries.clone() }
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |acc, e| acc.max(e.abs()))
    }

    pub fn scaled(&self, factor: f64) -> SymMatrix {
        SymMatrix { dim: self.dim, entries: self.entries.iter().map(|e| e * factor).collect() }
    }

    /// `self + factor * other`, entrywise.
    pub fn add_scaled(&self, other: &SymMatrix, factor: f64) -> SymMatrix {
        assert_eq!(self.dim, other.dim, "dimensions must agree");
        SymMatrix {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + factor * b)
                .collect(),
        }
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.dim, v.len(), "vector length must match dimension");
        self.entries
            .chunks_exact(self.dim.max(1))
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Largest singular value of `m`, computed by power iteration on the smaller
/// of the two Gram matrices with a seeded random start. Deterministic for a
/// fixed seed. The all-zero matrix yields exactly 0.
pub fn spectral_norm(
    m: &DenseMatrix,
    rel_tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<f64, NumericsError> {
    assert!(rel_tol > 0.0, "rel_tol must be positive");
    assert!(max_iter >= 1, "max_iter must be at least 1");
    if m.rows() == 0 || m.cols() == 0 || m.is_zero() {
        return Ok(0.0);
    }

    // Iterate on m m^T (dimension rows) or m^T m (dimension cols), whichever
    // is smaller.
    let on_rows = m.rows() <= m.cols();
    let dim = if on_rows { m.rows() } else { m.cols() };
    let gram_apply = |v: &[f64]| -> Vec<f64> {
        if on_rows {
            m.matvec(&m.matvec_transposed(v))
        } else {
            m.matvec_transposed(&m.matvec(v))
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = random_unit_vector(&mut rng, dim);
    // A random start lies in the kernel only with probability zero; retry a
    // few times in case the draw is numerically degenerate.
    for _ in 0..8 {
        let w = gram_apply(&v);
        if norm2(&w) > 0.0 {
            break;
        }
        v = random_unit_vector(&mut rng, dim);
    }

    let mut rayleigh = 0.0f64;
    let mut change = f64::INFINITY;
    let mut quiet_steps = 0usize;
    // Stop on the successive Rayleigh-quotient change, tightened well below
    // rel_tol so the slow tail of the iteration cannot eat the budget.
    for iter in 0..max_iter {
        let w = gram_apply(&v);
        let next = dot(&v, &w);
        let wnorm = norm2(&w);
        if wnorm == 0.0 {
            return Ok(next.max(0.0).sqrt());
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / wnorm;
        }
        change = (next - rayleigh).abs();
        rayleigh = next;
        let stop_tol = 0.01 * rel_tol * rayleigh.abs().max(f64::MIN_POSITIVE);
        if iter > 0 && change <= stop_tol {
            quiet_steps += 1;
            if quiet_steps >= 3 {
                return Ok(rayleigh.max(0.0).sqrt());
            }
        } else {
            quiet_steps = 0;
        }
    }
    Err(NumericsError::PowerIterationStalled {
        iterations: max_iter,
        estimate: rayleigh.max(0.0).sqrt(),
        residual: change,
    })
}

/// Largest eigenvalue of a symmetric matrix via cyclic Jacobi rotations
/// (eigenvalues only, no eigenvector accumulation).
pub fn max_eigenvalue(s: &SymMatrix) -> Result<f64, NumericsError> {
    Ok(jacobi_eigenvalues(s)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// All eigenvalues of a symmetric matrix, unordered.
pub fn jacobi_eigenvalues(s: &SymMatrix) -> Result<Vec<f64>, NumericsError> {
    let n = s.dim();
    if n == 0 {
        return Err(NumericsError::EmptyMatrix);
    }
    let mut a = s.entries().to_vec();
    let scale = 1.0 + s.max_abs();
    let target = 1e-12 * scale;

    const MAX_SWEEPS: usize = 64;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() <= target {
            return Ok((0..n).map(|i| a[i * n + i]).collect());
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                // Rotate rows/columns p and q.
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    let new_kp = c * akp - sn * akq;
                    let new_kq = sn * akp + c * akq;
                    a[k * n + p] = new_kp;
                    a[p * n + k] = new_kp;
                    a[k * n + q] = new_kq;
                    a[q * n + k] = new_kq;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
            }
        }
    }
    let mut off = 0.0f64;
    for p in 0..n {
        for q in (p + 1)..n {
            off += a[p * n + q] * a[p * n + q];
        }
    }
    Err(NumericsError::JacobiStalled { off_norm: off.sqrt() })
}

/// Tests `lambda_max(s) <= slack`.
pub fn is_neg_semidefinite(s: &SymMatrix, slack: f64) -> Result<bool, NumericsError> {
    assert!(slack >= 0.0, "slack must be nonnegative");
    Ok(max_eigenvalue(s)? <= slack)
}

/// Solves `s x = rhs` for symmetric positive definite `s` via Cholesky.
pub fn solve_posdef(s: &SymMatrix, rhs: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if rhs.len() != s.dim() {
        return Err(NumericsError::DimensionMismatch { expected: s.dim(), got: rhs.len() });
    }
    let chol = Cholesky::factor(s)?;
    Ok(chol.solve(rhs))
}

/// Lower-triangular Cholesky factor of a positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn factor(s: &SymMatrix) -> Result<Self, NumericsError> {
        Self::factor_raw(s.dim(), s.entries())
    }

    pub(crate) fn factor_raw(dim: usize, entries: &[f64]) -> Result<Self, NumericsError> {
        if dim == 0 {
            return Err(NumericsError::EmptyMatrix);
        }
        let mut l = vec![0.0f64; dim * dim];
        for j in 0..dim {
            let mut diag = entries[j * dim + j];
            for k in 0..j {
                diag -= l[j * dim + k] * l[j * dim + k];
            }
            if diag <= 0.0 || !diag.is_finite() {
                return Err(NumericsError::NotPositiveDefinite { pivot: j });
            }
            let root = diag.sqrt();
            l[j * dim + j] = root;
            for i in (j + 1)..dim {
                let mut sum = entries[i * dim + j];
                let (row_i, row_j) = (&l[i * dim..i * dim + j], &l[j * dim..j * dim + j]);
                for (a, b) in row_i.iter().zip(row_j) {
                    sum -= a * b;
                }
                l[i * dim + j] = sum / root;
            }
        }
        Ok(Self { dim, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.dim, "right-hand side length must match");
        let n = self.dim;
        let l = &self.lower;
        let mut y = rhs.to_vec();
        for i in 0..n {
            let mut v = y[i];
            for k in 0..i {
                v -= l[i * n + k] * y[k];
            }
            y[i] = v / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut v = y[i];
            for k in (i + 1)..n {
                v -= l[k * n + i] * y[k];
            }
            y[i] = v / l[i * n + i];
        }
        y
    }

    /// Full inverse as a symmetric row-major buffer.
    pub(crate) fn inverse_raw(&self) -> Vec<f64> {
        let n = self.dim;
        let l = &self.lower;
        // Invert L in place column by column, then form L^{-T} L^{-1}.
        let mut linv = vec![0.0f64; n * n];
        for j in 0..n {
            linv[j * n + j] = 1.0 / l[j * n + j];
            for i in (j + 1)..n {
                let mut sum = 0.0;
                for k in j..i {
                    sum -= l[i * n + k] * linv[k * n + j];
                }
                linv[i * n + j] = sum / l[i * n + i];
            }
        }
        let mut inv = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = 0.0;
                for k in i..n {
                    sum += linv[k * n + i] * linv[k * n + j];
                }
                inv[i * n + j] = sum;
                inv[j * n + i] = sum;
            }
        }
        inv
    }

    pub fn log_det(&self) -> f64 {
        let n = self.dim;
        2.0 * (0..n).map(|i| self.lower[i * n + i].ln()).sum::<f64>()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub(crate) fn random_unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = norm2(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}
