//! Huber M-estimation measurement update.
//!
//! The nonlinear measurement is statistically linearized from the UT
//! moments, `H̃ = P_xzᵀ P⁻¹`, and the part of `P_zz` that `H̃` does not
//! explain is carried as extra measurement noise. With that model the
//! weighted gain and the Joseph-form covariance reduce exactly to the
//! plain UKF update when the weight is 1.

use nalgebra::{DMatrix, DVector};

use super::ukf::{check_measurement, predict_measurement, MeasurementPrediction};
use super::{FilterConfig, HuberDelta, StateEstimate};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::StateSpaceModel;

/// Tuning constant giving 95% efficiency under Gaussian noise.
pub const HUBER_K: f64 = 1.345;

/// Huber weight: 1 inside the threshold, `δ/|r|` outside.
pub fn huber_weight(r: f64, delta: f64) -> f64 {
    debug_assert!(delta > 0.0);
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

/// Threshold on the normalized-innovation scale.
pub fn resolve_delta(delta: HuberDelta) -> f64 {
    match delta {
        HuberDelta::Fixed(d) => d,
        HuberDelta::Auto => HUBER_K,
    }
}

/// `(I − wKH) P (I − wKH)ᵀ + w K R Kᵀ`, symmetrized.
///
/// Positive semi-definite for any real `K`, `H`, PSD `P`, `R` and `w ≥ 0`.
pub fn joseph_update(
    prior_cov: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    w: f64,
) -> Result<DMatrix<f64>> {
    let n = prior_cov.nrows();
    if gain.nrows() != n || h.ncols() != n || gain.ncols() != h.nrows() || r.shape() != (h.nrows(), h.nrows()) {
        return Err(Error::Dimension(format!(
            "joseph update with P {:?}, K {:?}, H {:?}, R {:?}",
            prior_cov.shape(),
            gain.shape(),
            h.shape(),
            r.shape()
        )));
    }
    if w < 0.0 {
        return Err(Error::InvalidParameter(format!("negative Huber weight {w}")));
    }
    let a = DMatrix::identity(n, n) - gain * h * w;
    let cov = &a * prior_cov * a.transpose() + gain * r * gain.transpose() * w;
    Ok(linalg::symmetrize(&cov))
}

pub(crate) fn huber_correct(
    prior: &StateEstimate,
    mp: &MeasurementPrediction,
    z: &DVector<f64>,
    r: &DMatrix<f64>,
    delta: f64,
) -> Result<StateEstimate> {
    let residual = z - &mp.z_pred;
    let s = mp.innovation_cov(r);
    let score = linalg::mahalanobis_sq(&residual, &s)?.sqrt();
    let w = huber_weight(score, delta);

    // H̃ = P_xzᵀ P⁻¹ and the linearization residual Ω = P_zz − H̃ P H̃ᵀ.
    let h_lin = linalg::right_solve_spd(&mp.pxz.transpose(), &prior.cov)?;
    let explained = &h_lin * &prior.cov * h_lin.transpose();
    let r_eff = linalg::symmetrize(&(r + (&mp.pzz - &explained)));

    let s_weighted = linalg::symmetrize(&(&explained + &r_eff / w));
    let gain = linalg::right_solve_spd(&mp.pxz, &s_weighted)?;
    let mean = &prior.mean + &gain * &residual * w;
    let cov = joseph_update(&prior.cov, &gain, &h_lin, &r_eff, w)?;
    Ok(StateEstimate {
        mean,
        cov,
        step: prior.step,
    })
}

/// Huber-weighted UT measurement update with noise covariance `r`.
pub fn huber_update(
    prior: &StateEstimate,
    z: &DVector<f64>,
    model: &dyn StateSpaceModel,
    r: &DMatrix<f64>,
    cfg: &FilterConfig,
) -> Result<StateEstimate> {
    check_measurement(z, r, model.meas_dim())?;
    let mp = predict_measurement(prior, model, cfg)?;
    huber_correct(prior, &mp, z, r, resolve_delta(cfg.huber_delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::ukf_update;
    use crate::model::Ungm;

    #[test]
    fn weight_examples() {
        assert_eq!(huber_weight(0.5, 1.345), 1.0);
        assert!((huber_weight(2.69, 1.345) - 0.5).abs() < 1e-15);
        assert_eq!(huber_weight(-1.345, 1.345), 1.0);
    }

    #[test]
    fn weight_is_continuous_and_non_increasing() {
        let d = 1.345;
        let below = huber_weight(d - 1e-12, d);
        let above = huber_weight(d + 1e-12, d);
        assert!((below - above).abs() < 1e-11);
        let mut last = 1.0;
        for i in 0..1000 {
            let w = huber_weight(i as f64 * 0.01, d);
            assert!(w <= last);
            last = w;
        }
    }

    #[test]
    fn inlier_matches_ukf() {
        let model = Ungm::new(10.0).unwrap();
        let cfg = FilterConfig::default();
        let prior = StateEstimate::scalar(6.0, 3.0, 4);
        let r = DMatrix::from_element(1, 1, 1.0);
        let mp = predict_measurement(&prior, &model, &cfg).unwrap();
        let z = DVector::from_element(1, mp.z_pred[0] + 0.3);
        let a = huber_update(&prior, &z, &model, &r, &cfg).unwrap();
        let b = ukf_update(&prior, &z, &model, &r, &cfg).unwrap();
        assert!((a.mean - b.mean).abs().max() < 1e-10);
        assert!((a.cov - b.cov).abs().max() < 1e-10);
    }

    #[test]
    fn gross_outlier_leaves_prior() {
        let model = Ungm::new(10.0).unwrap();
        let cfg = FilterConfig::default();
        let prior = StateEstimate::scalar(6.0, 3.0, 4);
        let r = DMatrix::from_element(1, 1, 1.0);
        let mp = predict_measurement(&prior, &model, &cfg).unwrap();
        let s = (mp.pzz[(0, 0)] + 1.0).sqrt();
        let z = DVector::from_element(1, mp.z_pred[0] + 1e7 * 1.345 * s);
        let post = huber_update(&prior, &z, &model, &r, &cfg).unwrap();
        assert!(((post.mean[0] - 6.0) / 6.0).abs() < 1e-4);
        assert!(((post.cov[(0, 0)] - 3.0) / 3.0).abs() < 1e-4);
    }

    #[test]
    fn zero_weight_keeps_prior_covariance() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let k = DMatrix::from_row_slice(2, 1, &[0.4, -0.2]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let r = DMatrix::from_element(1, 1, 0.5);
        let out = joseph_update(&p, &k, &h, &r, 0.0).unwrap();
        assert!((out - p).abs().max() < 1e-15);
    }
}
