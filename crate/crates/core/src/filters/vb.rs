//! Variational-Bayesian adaptive UKF.
//!
//! The measurement noise covariance carries an inverse-Wishart belief. Each
//! step predicts the belief with the forgetting factor ρ, then runs a fixed
//! number of fixed-point iterations alternating between the state update
//! (using `E[R]`) and the scale update from the current state posterior.

use nalgebra::{DMatrix, DVector};

use super::huber::{huber_weight, resolve_delta};
use super::ukf::{check_measurement, kalman_correct, predict_measurement, ukf_predict, MeasurementPrediction};
use super::{FilterConfig, NoiseBelief, StateEstimate};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::StateSpaceModel;
use crate::unscented;

/// Belief prediction: `v ← ρ(v − m − 1) + m + 1`, `V ← ρV`.
pub fn vb_predict_belief(belief: &NoiseBelief, rho: f64) -> Result<NoiseBelief> {
    belief.validate()?;
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidParameter(format!("rho must lie in (0, 1], got {rho}")));
    }
    let m = belief.dim() as f64;
    Ok(NoiseBelief {
        v: rho * (belief.v - m - 1.0) + m + 1.0,
        scale: &belief.scale * rho,
    })
}

/// Variational measurement update from a predicted state and belief.
///
/// `noise_scale` multiplies `E[R]` inside every iteration (1 for a plain
/// step; an outlier gate passes its inflation factor). With `robust` set,
/// each iteration additionally divides `E[R]` by the Huber weight of the
/// normalized innovation.
pub fn vb_update(
    prior: &StateEstimate,
    belief_pred: &NoiseBelief,
    z: &DVector<f64>,
    model: &dyn StateSpaceModel,
    cfg: &FilterConfig,
    robust: bool,
    noise_scale: f64,
) -> Result<(StateEstimate, NoiseBelief)> {
    let mp = predict_measurement(prior, model, cfg)?;
    vb_correct(prior, &mp, belief_pred, z, model, cfg, robust, noise_scale)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn vb_correct(
    prior: &StateEstimate,
    mp: &MeasurementPrediction,
    belief_pred: &NoiseBelief,
    z: &DVector<f64>,
    model: &dyn StateSpaceModel,
    cfg: &FilterConfig,
    robust: bool,
    noise_scale: f64,
) -> Result<(StateEstimate, NoiseBelief)> {
    belief_pred.validate()?;
    let m = belief_pred.dim();
    check_measurement(z, &belief_pred.scale, model.meas_dim())?;
    // One measurement is assimilated per step.
    let v_post = belief_pred.v + 1.0;
    let dof = v_post - m as f64 - 1.0;
    let delta = resolve_delta(cfg.huber_delta);
    let kappa = cfg.kappa_for(prior.dim());

    let mut scale = belief_pred.scale.clone();
    let mut post = prior.clone();
    for _ in 0..cfg.vb_iters {
        let mut r = &scale * (noise_scale / dof);
        // Precision factor of this step's likelihood relative to E[R].
        let mut precision = 1.0 / noise_scale;
        if robust {
            let s = mp.innovation_cov(&r);
            let score = linalg::mahalanobis_sq(&(z - &mp.z_pred), &s)?.sqrt();
            let w = huber_weight(score, delta);
            r /= w;
            precision *= w;
        }
        post = kalman_correct(prior, mp, z, &r)?;

        let sigma = unscented::sigma_points(&post.mean, &post.cov, kappa)?;
        let mut spread = DMatrix::zeros(m, m);
        for (p, &w) in sigma.points.iter().zip(&sigma.w_cov) {
            let d = z - model.measurement(p);
            spread.ger(w, &d, &d, 1.0);
        }
        scale = linalg::symmetrize(&(&belief_pred.scale + spread * precision));
    }
    Ok((post, NoiseBelief { v: v_post, scale }))
}

fn vb_step(
    est: &StateEstimate,
    belief: &NoiseBelief,
    z: &DVector<f64>,
    model: &dyn StateSpaceModel,
    cfg: &FilterConfig,
    robust: bool,
) -> Result<(StateEstimate, NoiseBelief)> {
    let prior = ukf_predict(est, model, cfg)?;
    let belief_pred = vb_predict_belief(belief, cfg.rho)?;
    vb_update(&prior, &belief_pred, z, model, cfg, robust, 1.0)
}

/// One full VB-AUKF step (state prediction, belief prediction, iterations).
pub fn vb_aukf_step(
    est: &StateEstimate,
    belief: &NoiseBelief,
    z: &DVector<f64>,
    model: &dyn StateSpaceModel,
    cfg: &FilterConfig,
) -> Result<(StateEstimate, NoiseBelief)> {
    vb_step(est, belief, z, model, cfg, false)
}

/// VB-AUKF step with Huber reweighting of `E[R]` in every iteration.
pub fn vb_haukf_step(
    est: &StateEstimate,
    belief: &NoiseBelief,
    z: &DVector<f64>,
    model: &dyn StateSpaceModel,
    cfg: &FilterConfig,
) -> Result<(StateEstimate, NoiseBelief)> {
    vb_step(est, belief, z, model, cfg, true)
}
