//! Sigma-point generation and unscented-transform propagation.
//!
//! The single-parameter (κ) unscented transform is used throughout: the
//! central point carries weight `κ/(n+κ)` and every other point
//! `1/(2(n+κ))`, identically for means and covariances.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// `2n+1` sigma points with their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSet {
    pub points: Vec<DVector<f64>>,
    pub w_mean: Vec<f64>,
    pub w_cov: Vec<f64>,
    pub kappa: f64,
}

impl SigmaSet {
    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Weighted mean of the points; equals the generating mean.
    pub fn mean(&self) -> DVector<f64> {
        weighted_mean(&self.points, &self.w_mean)
    }
}

/// Default spread `κ = 3 − n`, clamped so that `n + κ ≥ 0.5`.
pub fn default_kappa(n: usize) -> f64 {
    let n = n as f64;
    (3.0 - n).max(0.5 - n)
}

/// Weights `(w_mean, w_cov)` for dimension `n` and spread `kappa`.
pub fn weights(n: usize, kappa: f64) -> (Vec<f64>, Vec<f64>) {
    let denom = n as f64 + kappa;
    let mut w = vec![1.0 / (2.0 * denom); 2 * n + 1];
    w[0] = kappa / denom;
    (w.clone(), w)
}

/// Generates the sigma points of `N(mean, cov)`.
///
/// Column `i` of the lower Cholesky factor of `(n+κ)·cov` is added to and
/// subtracted from the mean.
pub fn sigma_points(mean: &DVector<f64>, cov: &DMatrix<f64>, kappa: f64) -> Result<SigmaSet> {
    let n = mean.len();
    if n == 0 {
        return Err(Error::Empty("sigma point mean"));
    }
    if cov.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "mean of length {n} with {}x{} covariance",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let spread = n as f64 + kappa;
    if !(spread > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "n + kappa must be > 0, got {spread}"
        )));
    }
    let root = linalg::cholesky_with_jitter(&(cov * spread))?;
    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(mean.clone());
    for i in 0..n {
        points.push(mean + root.column(i));
    }
    for i in 0..n {
        points.push(mean - root.column(i));
    }
    let (w_mean, w_cov) = weights(n, kappa);
    Ok(SigmaSet {
        points,
        w_mean,
        w_cov,
        kappa,
    })
}

/// Output of [`ut_propagate`].
#[derive(Debug, Clone)]
pub struct Propagated {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `f(ξ_i)`, index-aligned with the input sigma points.
    pub outputs: Vec<DVector<f64>>,
}

/// Pushes every sigma point through `f` and recovers mean and covariance,
/// adding `additive_cov` (if any) to the covariance.
pub fn ut_propagate<F>(s: &SigmaSet, f: F, additive_cov: Option<&DMatrix<f64>>) -> Result<Propagated>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let outputs: Vec<DVector<f64>> = s.points.iter().map(f).collect();
    let m = outputs[0].len();
    if outputs.iter().any(|o| o.len() != m) {
        return Err(Error::Dimension("f returned vectors of varying length".into()));
    }
    let mean = weighted_mean(&outputs, &s.w_mean);
    let mut cov = weighted_outer(&outputs, &mean, &outputs, &mean, &s.w_cov);
    if let Some(add) = additive_cov {
        if add.shape() != (m, m) {
            return Err(Error::Dimension(format!(
                "additive covariance is {}x{}, f output has length {m}",
                add.nrows(),
                add.ncols()
            )));
        }
        cov += add;
    }
    Ok(Propagated {
        mean,
        cov: linalg::symmetrize(&cov),
        outputs,
    })
}

/// Cross covariance `Σ w_i (ξ_i − x̄)(ζ_i − ȳ)ᵀ` between the sigma points and
/// their images.
pub fn ut_cross_cov(s: &SigmaSet, f_outputs: &[DVector<f64>], y_mean: &DVector<f64>) -> Result<DMatrix<f64>> {
    if f_outputs.len() != s.points.len() {
        return Err(Error::Dimension(format!(
            "{} outputs for {} sigma points",
            f_outputs.len(),
            s.points.len()
        )));
    }
    if f_outputs.iter().any(|o| o.len() != y_mean.len()) {
        return Err(Error::Dimension("output length differs from y_mean".into()));
    }
    let x_mean = s.mean();
    Ok(weighted_outer(&s.points, &x_mean, f_outputs, y_mean, &s.w_cov))
}

fn weighted_mean(points: &[DVector<f64>], w: &[f64]) -> DVector<f64> {
    let mut acc = DVector::zeros(points[0].len());
    for (p, &wi) in points.iter().zip(w) {
        acc.axpy(wi, p, 1.0);
    }
    acc
}

fn weighted_outer(
    a: &[DVector<f64>],
    a_mean: &DVector<f64>,
    b: &[DVector<f64>],
    b_mean: &DVector<f64>,
    w: &[f64],
) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(a_mean.len(), b_mean.len());
    for ((ai, bi), &wi) in a.iter().zip(b).zip(w) {
        let da = ai - a_mean;
        let db = bi - b_mean;
        acc.ger(wi, &da, &db, 1.0);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct(s: &SigmaSet) -> (DVector<f64>, DMatrix<f64>) {
        let p = ut_propagate(s, |x| x.clone(), None).unwrap();
        (p.mean, p.cov)
    }

    #[test]
    fn scalar_points_and_weights() {
        let s = sigma_points(&DVector::zeros(1), &DMatrix::identity(1, 1), 2.0).unwrap();
        let pts: Vec<f64> = s.points.iter().map(|p| p[0]).collect();
        let r3 = 3f64.sqrt();
        assert!((pts[0]).abs() < 1e-15);
        assert!((pts[1] - r3).abs() < 1e-15);
        assert!((pts[2] + r3).abs() < 1e-15);
        assert!((s.w_mean[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.w_mean[1] - 1.0 / 6.0).abs() < 1e-15);
        assert!((s.w_mean[2] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn zero_covariance_collapses_points() {
        let mean = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let s = sigma_points(&mean, &DMatrix::zeros(3, 3), 0.0).unwrap();
        assert_eq!(s.points.len(), 7);
        assert!(s.points.iter().all(|p| p == &mean));
    }

    #[test]
    fn two_dim_identity_reconstruction() {
        let mean = DVector::from_vec(vec![1.0, 2.0]);
        let cov = DMatrix::identity(2, 2);
        let s = sigma_points(&mean, &cov, 1.0).unwrap();
        let r3 = 3f64.sqrt();
        assert!((s.points[1][0] - (1.0 + r3)).abs() < 1e-14);
        assert!((s.points[4][1] - (2.0 - r3)).abs() < 1e-14);
        let (m, c) = reconstruct(&s);
        assert!((m - mean).abs().max() < 1e-12);
        assert!((c - cov).abs().max() < 1e-12);
    }

    #[test]
    fn weights_sum_to_one() {
        for n in 1..6 {
            let (w, _) = weights(n, default_kappa(n));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn default_kappa_clamps() {
        assert_eq!(default_kappa(1), 2.0);
        assert_eq!(default_kappa(3), 0.0);
        assert_eq!(default_kappa(5), -2.0);
        for n in 1..10 {
            assert!(n as f64 + default_kappa(n) >= 0.5);
        }
    }

    #[test]
    fn rejects_nonpositive_spread() {
        let r = sigma_points(&DVector::zeros(2), &DMatrix::identity(2, 2), -2.0);
        assert!(matches!(r, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn constant_function() {
        let s = sigma_points(&DVector::zeros(2), &DMatrix::identity(2, 2), 1.0).unwrap();
        let c = DVector::from_vec(vec![4.0, 5.0, 6.0]);
        let q = DMatrix::identity(3, 3) * 0.25;
        let p = ut_propagate(&s, |_| c.clone(), Some(&q)).unwrap();
        assert!((p.mean - &c).abs().max() < 1e-12);
        assert!((p.cov - &q).abs().max() < 1e-12);
        let cross = ut_cross_cov(&s, &p.outputs, &c).unwrap();
        assert!(cross.abs().max() < 1e-12);
    }

    #[test]
    fn identity_cross_cov_is_cov() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let s = sigma_points(&DVector::zeros(2), &cov, 1.0).unwrap();
        let p = ut_propagate(&s, |x| x.clone(), None).unwrap();
        let cross = ut_cross_cov(&s, &p.outputs, &p.mean).unwrap();
        assert!((cross - cov).abs().max() < 1e-10);
    }

    #[test]
    fn dimension_mismatches_are_errors() {
        let s = sigma_points(&DVector::zeros(2), &DMatrix::identity(2, 2), 1.0).unwrap();
        let bad = DMatrix::identity(3, 3);
        assert!(ut_propagate(&s, |x| x.clone(), Some(&bad)).is_err());
        assert!(ut_cross_cov(&s, &s.points[..3], &DVector::zeros(2)).is_err());
    }
}
