use nalgebra::{DMatrix, DVector};

use super::{FilterConfig, StateEstimate};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::StateSpaceModel;
use crate::unscented::{self, SigmaSet};

/// UT moments of the predicted measurement at a prior.
#[derive(Debug, Clone)]
pub struct MeasurementPrediction {
    pub sigma: SigmaSet,
    /// `h(ξ_i)` for every prior sigma point.
    pub z_points: Vec<DVector<f64>>,
    pub z_pred: DVector<f64>,
    /// Spread of `h(ξ_i)` without measurement noise.
    pub pzz: DMatrix<f64>,
    pub pxz: DMatrix<f64>,
}

impl MeasurementPrediction {
    /// Innovation covariance `S = P_zz + R`.
    pub fn innovation_cov(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        linalg::symmetrize(&(&self.pzz + r))
    }
}

/// Time update: propagates the sigma points of `est` through the transition
/// and adds `Q`.
pub fn ukf_predict(est: &StateEstimate, model: &dyn StateSpaceModel, cfg: &FilterConfig) -> Result<StateEstimate> {
    let n = est.dim();
    let sigma = unscented::sigma_points(&est.mean, &est.cov, cfg.kappa_for(n))?;
    let k = est.step + 1;
    let prop = unscented::ut_propagate(&sigma, |x| model.transition(x, k), Some(model.process_cov()))?;
    Ok(StateEstimate {
        mean: prop.mean,
        cov: prop.cov,
        step: k,
    })
}

pub fn predict_measurement(
    prior: &StateEstimate,
    model: &dyn StateSpaceModel,
    cfg: &FilterConfig,
) -> Result<MeasurementPrediction> {
    let sigma = unscented::sigma_points(&prior.mean, &prior.cov, cfg.kappa_for(prior.dim()))?;
    let prop = unscented::ut_propagate(&sigma, |x| model.measurement(x), None)?;
    let pxz = unscented::ut_cross_cov(&sigma, &prop.outputs, &prop.mean)?;
    Ok(MeasurementPrediction {
        sigma,
        z_points: prop.outputs,
        z_pred: prop.mean,
        pzz: prop.cov,
        pxz,
    })
}

pub(crate) fn check_measurement(z: &DVector<f64>, r: &DMatrix<f64>, m: usize) -> Result<()> {
    if z.len() != m || r.shape() != (m, m) {
        return Err(Error::Dimension(format!(
            "measurement of length {} and {}x{} noise for a {m}-dimensional sensor",
            z.len(),
            r.nrows(),
            r.ncols()
        )));
    }
    Ok(())
}

/// Standard Kalman correction given precomputed UT moments.
pub(crate) fn kalman_correct(
    prior: &StateEstimate,
    mp: &MeasurementPrediction,
    z: &DVector<f64>,
    r: &DMatrix<f64>,
) -> Result<StateEstimate> {
    let s = mp.innovation_cov(r);
    let gain = linalg::right_solve_spd(&mp.pxz, &s)?;
    let mean = &prior.mean + &gain * (z - &mp.z_pred);
    let cov = &prior.cov - &gain * &s * gain.transpose();
    Ok(StateEstimate {
        mean,
        cov: linalg::symmetrize(&cov),
        step: prior.step,
    })
}

/// Measurement update with a fixed noise covariance `r`.
pub fn ukf_update(
    prior: &StateEstimate,
    z: &DVector<f64>,
    model: &dyn StateSpaceModel,
    r: &DMatrix<f64>,
    cfg: &FilterConfig,
) -> Result<StateEstimate> {
    check_measurement(z, r, model.meas_dim())?;
    let mp = predict_measurement(prior, model, cfg)?;
    kalman_correct(prior, &mp, z, r)
}
