//! Small dense linear-algebra helpers shared by the filters.
//!
//! Everything here works on `nalgebra` dynamic matrices. Covariances coming
//! out of these routines are explicitly symmetrized so that long recursions
//! do not accumulate asymmetric round-off.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Jitter retries used by [`cholesky_with_jitter`]; each retry scales the
/// jitter by 10.
const JITTER_RETRIES: usize = 3;
const JITTER_BASE: f64 = 1e-12;
/// Diagonal loading applied by [`regularized_inverse`] when a plain
/// inversion fails.
const INVERSE_LOADING: f64 = 1e-9;

/// Returns `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn mean_diag(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().max(1) as f64;
    m.trace().abs() / n
}

/// Lower Cholesky factor of a symmetric PSD matrix.
///
/// On failure a diagonal jitter of `1e-12 * trace/n` is added and the
/// factorization retried up to three times, multiplying the jitter by 10 on
/// each attempt. An exactly zero matrix has the zero matrix as its factor.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "cholesky of non-square {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Decomposition("matrix has non-finite entries".into()));
    }
    if m.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(m.nrows(), m.ncols()));
    }
    let sym = symmetrize(m);
    if let Some(ch) = Cholesky::new(sym.clone()) {
        return Ok(ch.l());
    }
    let n = sym.nrows();
    let scale = if mean_diag(&sym) > 0.0 { mean_diag(&sym) } else { 1.0 };
    let mut jitter = JITTER_BASE * scale;
    for _ in 0..JITTER_RETRIES {
        let loaded = &sym + DMatrix::identity(n, n) * jitter;
        if let Some(ch) = Cholesky::new(loaded) {
            return Ok(ch.l());
        }
        jitter *= 10.0;
    }
    Err(Error::Decomposition(format!(
        "matrix is not positive semi-definite (min eigenvalue {:.3e})",
        min_eigenvalue(&sym)
    )))
}

/// Inverse of a symmetric positive-definite matrix.
///
/// Falls back to diagonal loading with `1e-9 * trace/m` when the plain
/// Cholesky inversion fails.
pub fn regularized_inverse(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = symmetrize(s);
    if let Some(ch) = Cholesky::new(sym.clone()) {
        return Ok(symmetrize(&ch.inverse()));
    }
    let n = sym.nrows();
    let scale = if mean_diag(&sym) > 0.0 { mean_diag(&sym) } else { 1.0 };
    let loaded = &sym + DMatrix::identity(n, n) * (INVERSE_LOADING * scale);
    Cholesky::<f64, Dyn>::new(loaded)
        .map(|ch| symmetrize(&ch.inverse()))
        .ok_or_else(|| Error::Decomposition("innovation covariance is singular".into()))
}

/// Solves `X · a = b` for `X` where `a` is symmetric positive definite,
/// i.e. returns `b · a⁻¹`.
pub fn right_solve_spd(b: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(b * regularized_inverse(a)?)
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Squared Mahalanobis norm `rᵀ S⁻¹ r`.
pub fn mahalanobis_sq(r: &DVector<f64>, s: &DMatrix<f64>) -> Result<f64> {
    if s.nrows() != r.len() {
        return Err(Error::Dimension(format!(
            "residual of length {} against {}x{} covariance",
            r.len(),
            s.nrows(),
            s.ncols()
        )));
    }
    if r.len() == 1 {
        return Ok(r[0] * r[0] / s[(0, 0)]);
    }
    let s_inv = regularized_inverse(s)?;
    Ok((r.transpose() * s_inv * r)[(0, 0)].max(0.0))
}

/// Draws one sample from `N(0, cov)` given the lower Cholesky factor of `cov`.
pub fn correlated_normal<R: rand::Rng + ?Sized>(chol: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let n = chol.nrows();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    chol * z
}
