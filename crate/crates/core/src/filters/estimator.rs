use nalgebra::{DMatrix, DVector};

use super::huber::{huber_correct, resolve_delta};
use super::pf::{maybe_resample, ParticleCloud};
use super::ukf::{check_measurement, kalman_correct, predict_measurement, ukf_predict, MeasurementPrediction};
use super::vb::{vb_correct, vb_predict_belief};
use super::{FilterConfig, FilterKind, NoiseBelief, StateEstimate};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::StateSpaceModel;
use crate::rng::{self, SimRng, Stream};

/// A recursive filter driven one measurement at a time.
///
/// A step is `predict`, optionally `innovation` (for outlier scoring), then
/// `update`. `noise_scale` multiplies the filter's measurement noise for
/// that update only; 1.0 gives the unmodified filter.
pub trait Estimator: Send {
    fn kind(&self) -> FilterKind;
    fn predict(&mut self, model: &dyn StateSpaceModel) -> Result<()>;
    /// Innovation `z − ẑ` and its covariance `S` at the current prior.
    fn innovation(&self, z: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>;
    fn update(&mut self, model: &dyn StateSpaceModel, z: &DVector<f64>, noise_scale: f64) -> Result<()>;
    /// Latest posterior (or prior, between `predict` and `update`).
    fn estimate(&self) -> &StateEstimate;
    /// Measurement noise covariance the next update would use unscaled.
    fn noise_cov(&self) -> DMatrix<f64>;
}

/// Builds the estimator for `kind`, initialized at `init`.
///
/// `r_nominal` is the fixed noise of UKF/HUKF/PF and the prior mean of the
/// inverse-Wishart belief of the VB filters. `seed` only affects the PF.
pub fn build_estimator(
    kind: FilterKind,
    cfg: &FilterConfig,
    model: &dyn StateSpaceModel,
    init: &StateEstimate,
    r_nominal: &DMatrix<f64>,
    seed: u64,
) -> Result<Box<dyn Estimator>> {
    cfg.validate()?;
    let m = model.meas_dim();
    if r_nominal.shape() != (m, m) {
        return Err(Error::Dimension(format!(
            "nominal noise is {}x{} for a {m}-dimensional sensor",
            r_nominal.nrows(),
            r_nominal.ncols()
        )));
    }
    if init.dim() != model.state_dim() {
        return Err(Error::Dimension("initial estimate does not match the model".into()));
    }
    Ok(match kind {
        FilterKind::Pf => {
            let mut rng = rng::stream(seed, Stream::ParticleFilter);
            let cloud = ParticleCloud::from_gaussian(init, cfg.pf_particles, &mut rng)?;
            Box::new(ParticleFilter {
                cloud,
                rng,
                q_chol: linalg::cholesky_with_jitter(model.process_cov())?,
                r: r_nominal.clone(),
                est: init.clone(),
                z_moments: None,
            })
        }
        _ => {
            let belief = match kind {
                FilterKind::VbAukf | FilterKind::VbHaukf => {
                    Some(NoiseBelief::with_mean(m as f64 + 3.0, r_nominal)?)
                }
                _ => None,
            };
            Box::new(SigmaFilter {
                kind,
                cfg: cfg.clone(),
                est: init.clone(),
                r: r_nominal.clone(),
                belief,
                pending: None,
            })
        }
    })
}

struct Pending {
    mp: MeasurementPrediction,
    belief_pred: Option<NoiseBelief>,
}

/// UKF, HUKF, VB-AUKF and VB-HAUKF share the sigma-point machinery.
struct SigmaFilter {
    kind: FilterKind,
    cfg: FilterConfig,
    est: StateEstimate,
    r: DMatrix<f64>,
    belief: Option<NoiseBelief>,
    pending: Option<Pending>,
}

impl SigmaFilter {
    fn nominal_r(&self, belief_pred: Option<&NoiseBelief>) -> DMatrix<f64> {
        match belief_pred {
            // Same E[R] as the first variational iteration.
            Some(b) => &b.scale / (b.v + 1.0 - b.dim() as f64 - 1.0),
            None => self.r.clone(),
        }
    }
}

impl Estimator for SigmaFilter {
    fn kind(&self) -> FilterKind {
        self.kind
    }

    fn predict(&mut self, model: &dyn StateSpaceModel) -> Result<()> {
        self.est = ukf_predict(&self.est, model, &self.cfg)?;
        let mp = predict_measurement(&self.est, model, &self.cfg)?;
        let belief_pred = match &self.belief {
            Some(b) => Some(vb_predict_belief(b, self.cfg.rho)?),
            None => None,
        };
        self.pending = Some(Pending { mp, belief_pred });
        Ok(())
    }

    fn innovation(&self, z: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = self
            .pending
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("innovation requested before predict".into()))?;
        let r = self.nominal_r(p.belief_pred.as_ref());
        Ok((z - &p.mp.z_pred, p.mp.innovation_cov(&r)))
    }

    fn update(&mut self, model: &dyn StateSpaceModel, z: &DVector<f64>, noise_scale: f64) -> Result<()> {
        let p = self
            .pending
            .take()
            .ok_or_else(|| Error::InvalidParameter("update requested before predict".into()))?;
        match self.kind {
            FilterKind::Ukf => {
                check_measurement(z, &self.r, model.meas_dim())?;
                self.est = kalman_correct(&self.est, &p.mp, z, &(&self.r * noise_scale))?;
            }
            FilterKind::Hukf => {
                check_measurement(z, &self.r, model.meas_dim())?;
                let delta = resolve_delta(self.cfg.huber_delta);
                self.est = huber_correct(&self.est, &p.mp, z, &(&self.r * noise_scale), delta)?;
            }
            FilterKind::VbAukf | FilterKind::VbHaukf => {
                let belief_pred = p.belief_pred.expect("VB filters carry a belief");
                let robust = self.kind == FilterKind::VbHaukf;
                let (est, belief) =
                    vb_correct(&self.est, &p.mp, &belief_pred, z, model, &self.cfg, robust, noise_scale)?;
                self.est = est;
                self.belief = Some(belief);
            }
            FilterKind::Pf => unreachable!("PF is not a sigma-point filter"),
        }
        Ok(())
    }

    fn estimate(&self) -> &StateEstimate {
        &self.est
    }

    fn noise_cov(&self) -> DMatrix<f64> {
        match &self.pending {
            Some(p) => self.nominal_r(p.belief_pred.as_ref()),
            None => match &self.belief {
                Some(b) => b.expected_cov(),
                None => self.r.clone(),
            },
        }
    }
}

struct ParticleFilter {
    cloud: ParticleCloud,
    rng: SimRng,
    q_chol: DMatrix<f64>,
    r: DMatrix<f64>,
    est: StateEstimate,
    z_moments: Option<(DVector<f64>, DMatrix<f64>)>,
}

impl Estimator for ParticleFilter {
    fn kind(&self) -> FilterKind {
        FilterKind::Pf
    }

    fn predict(&mut self, model: &dyn StateSpaceModel) -> Result<()> {
        let k = self.est.step + 1;
        self.cloud.propagate(model, k, &self.q_chol, &mut self.rng);
        self.est = self.cloud.estimate(k);
        self.z_moments = Some(self.cloud.measurement_moments(model));
        Ok(())
    }

    fn innovation(&self, z: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (z_pred, spread) = self
            .z_moments
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("innovation requested before predict".into()))?;
        Ok((z - z_pred, linalg::symmetrize(&(spread + &self.r))))
    }

    fn update(&mut self, model: &dyn StateSpaceModel, z: &DVector<f64>, noise_scale: f64) -> Result<()> {
        check_measurement(z, &self.r, model.meas_dim())?;
        self.z_moments = None;
        self.cloud.reweight(model, z, &(&self.r * noise_scale))?;
        self.est = self.cloud.estimate(self.est.step);
        maybe_resample(&mut self.cloud, &mut self.rng);
        Ok(())
    }

    fn estimate(&self) -> &StateEstimate {
        &self.est
    }

    fn noise_cov(&self) -> DMatrix<f64> {
        self.r.clone()
    }
}
