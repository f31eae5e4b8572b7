//! Dense linear-algebra kernels shared by the estimators: SPD solves,
//! Moore-Penrose pseudo-inverse, column-space projectors, and eigenvalue
//! bounds. Everything here is deterministic and pure.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (after jitter retry)")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Relative singular-value cutoff for pseudo-inverses.
pub const PINV_RTOL: f64 = 1e-10;

/// Solve `A X = B` for symmetric positive-definite `A` via Cholesky.
///
/// All matrices inverted by the estimators carry a ridge term, so the
/// factorization normally succeeds on the first try. If it fails, one
/// retry is made with `1e-10 * trace(A)/dim` added to the diagonal.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    if a.nrows() != a.ncols() || a.nrows() != b.nrows() {
        return Err(LinalgError::DimensionMismatch(format!(
            "spd_solve: A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    let jitter = 1e-10 * a.trace() / a.nrows() as f64;
    let mut a2 = a.clone();
    for i in 0..a2.nrows() {
        a2[(i, i)] += jitter;
    }
    match a2.cholesky() {
        Some(chol) => Ok(chol.solve(b)),
        None => Err(LinalgError::NotPositiveDefinite),
    }
}

/// Convenience wrapper: `A^{-1}` for SPD `A`.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    spd_solve(a, &DMatrix::identity(a.nrows(), a.nrows()))
}

/// Moore-Penrose pseudo-inverse via SVD. Singular values below
/// `PINV_RTOL * sigma_max` are treated as zero, so rank-deficient
/// inputs (e.g. Gram matrices with fewer rows than columns) are fine.
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DMatrix::zeros(a.ncols(), a.nrows());
    }
    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let tol = PINV_RTOL * sigma_max;
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let mut s_inv = DVector::zeros(svd.singular_values.len());
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s > tol {
            s_inv[i] = 1.0 / s;
        }
    }
    // A+ = V S+ U^T
    v_t.transpose() * DMatrix::from_diagonal(&s_inv) * u.transpose()
}

/// Orthogonal projector onto the column space of `B`: `B (B^T B)^+ B^T`.
pub fn projector_onto_columns(b: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = b.transpose() * b;
    b * pinv(&gram) * b.transpose()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let eig = a.clone().symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let eig = a.clone().symmetric_eigen();
    eig.eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `true` when every entry of `m` is finite.
pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}
