//! Bootstrap particle filter with systematic resampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::StateEstimate;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::StateSpaceModel;

/// Weighted particle approximation of the state posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    pub particles: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl ParticleCloud {
    /// Draws `count` equally weighted particles from `N(mean, cov)`.
    pub fn from_gaussian<R: Rng + ?Sized>(est: &StateEstimate, count: usize, rng: &mut R) -> Result<Self> {
        if count < 2 {
            return Err(Error::InvalidParameter("a particle cloud needs at least 2 particles".into()));
        }
        let chol = linalg::cholesky_with_jitter(&est.cov)?;
        let particles = (0..count)
            .map(|_| &est.mean + linalg::correlated_normal(&chol, rng))
            .collect();
        Ok(Self {
            particles,
            weights: vec![1.0 / count as f64; count],
        })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.len() < 2 || self.weights.len() != self.len() {
            return Err(Error::InvalidParameter(format!(
                "{} particles with {} weights",
                self.len(),
                self.weights.len()
            )));
        }
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidParameter(format!(
                "weights must be nonnegative and sum to 1 (sum = {sum})"
            )));
        }
        Ok(())
    }

    /// `1 / Σ w_i²`.
    pub fn effective_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Weighted mean and covariance.
    pub fn estimate(&self, step: usize) -> StateEstimate {
        let n = self.particles[0].len();
        let mut mean = DVector::zeros(n);
        for (p, &w) in self.particles.iter().zip(&self.weights) {
            mean.axpy(w, p, 1.0);
        }
        let mut cov = DMatrix::zeros(n, n);
        for (p, &w) in self.particles.iter().zip(&self.weights) {
            let d = p - &mean;
            cov.ger(w, &d, &d, 1.0);
        }
        StateEstimate { mean, cov, step }
    }

    /// Moves every particle through the transition and adds process noise.
    pub(crate) fn propagate<R: Rng + ?Sized>(
        &mut self,
        model: &dyn StateSpaceModel,
        k: usize,
        q_chol: &DMatrix<f64>,
        rng: &mut R,
    ) {
        for p in self.particles.iter_mut() {
            *p = model.transition(p, k) + linalg::correlated_normal(q_chol, rng);
        }
    }

    /// Weighted mean and covariance of `h(x)` over the particles.
    pub(crate) fn measurement_moments(&self, model: &dyn StateSpaceModel) -> (DVector<f64>, DMatrix<f64>) {
        let images: Vec<DVector<f64>> = self.particles.iter().map(|p| model.measurement(p)).collect();
        let m = images[0].len();
        let mut mean = DVector::zeros(m);
        for (z, &w) in images.iter().zip(&self.weights) {
            mean.axpy(w, z, 1.0);
        }
        let mut cov = DMatrix::zeros(m, m);
        for (z, &w) in images.iter().zip(&self.weights) {
            let d = z - &mean;
            cov.ger(w, &d, &d, 1.0);
        }
        (mean, cov)
    }

    /// Multiplies the weights by the Gaussian likelihood of `z` and
    /// renormalizes. Returns `true` if every likelihood underflowed and the
    /// weights were reset to uniform.
    pub(crate) fn reweight(&mut self, model: &dyn StateSpaceModel, z: &DVector<f64>, r: &DMatrix<f64>) -> Result<bool> {
        let r_inv = linalg::regularized_inverse(r)?;
        let log_w: Vec<f64> = self
            .particles
            .iter()
            .zip(&self.weights)
            .map(|(p, &w)| {
                let d = z - model.measurement(p);
                w.ln() - 0.5 * (d.transpose() * &r_inv * &d)[(0, 0)]
            })
            .collect();
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let count = self.len();
        if !max.is_finite() {
            self.weights = vec![1.0 / count as f64; count];
            return Ok(true);
        }
        let mut sum = 0.0;
        for (w, lw) in self.weights.iter_mut().zip(&log_w) {
            *w = (lw - max).exp();
            sum += *w;
        }
        if !(sum > 0.0 && sum.is_finite()) {
            self.weights = vec![1.0 / count as f64; count];
            return Ok(true);
        }
        for w in self.weights.iter_mut() {
            *w /= sum;
        }
        Ok(false)
    }
}

/// Systematic resampling: one uniform offset, `P` evenly spaced pointers.
pub fn systematic_resample<R: Rng + ?Sized>(cloud: &ParticleCloud, rng: &mut R) -> ParticleCloud {
    let count = cloud.len();
    let step = 1.0 / count as f64;
    let u0: f64 = rng.random::<f64>() * step;
    let mut particles = Vec::with_capacity(count);
    let mut cumulative = cloud.weights[0];
    let mut i = 0;
    for j in 0..count {
        let u = u0 + j as f64 * step;
        while u > cumulative && i < count - 1 {
            i += 1;
            cumulative += cloud.weights[i];
        }
        particles.push(cloud.particles[i].clone());
    }
    ParticleCloud {
        particles,
        weights: vec![step; count],
    }
}

/// Result of one particle-filter step.
#[derive(Debug, Clone)]
pub struct PfOutcome {
    pub cloud: ParticleCloud,
    /// Weighted posterior moments, taken before any resampling.
    pub estimate: StateEstimate,
    pub resampled: bool,
    /// All likelihoods underflowed and the weights were reset to uniform.
    pub weight_reset: bool,
}

/// Resamples when the effective sample size drops below half the cloud.
pub(crate) fn maybe_resample<R: Rng + ?Sized>(cloud: &mut ParticleCloud, rng: &mut R) -> bool {
    if cloud.effective_size() < cloud.len() as f64 / 2.0 {
        *cloud = systematic_resample(cloud, rng);
        true
    } else {
        false
    }
}

/// One bootstrap step at time index `k`: propagate, weight by the
/// likelihood of `z` under noise `r`, resample if degenerate.
pub fn pf_step<R: Rng + ?Sized>(
    cloud: &ParticleCloud,
    z: &DVector<f64>,
    model: &dyn StateSpaceModel,
    r: &DMatrix<f64>,
    k: usize,
    rng: &mut R,
) -> Result<PfOutcome> {
    cloud.validate()?;
    let q_chol = linalg::cholesky_with_jitter(model.process_cov())?;
    let mut next = cloud.clone();
    next.propagate(model, k, &q_chol, rng);
    let weight_reset = next.reweight(model, z, r)?;
    let estimate = next.estimate(k);
    let resampled = maybe_resample(&mut next, rng);
    Ok(PfOutcome {
        cloud: next,
        estimate,
        resampled,
        weight_reset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Ungm;
    use crate::rng::{stream, Stream};

    #[test]
    fn flat_likelihood_keeps_uniform_weights() {
        let model = Ungm::new(10.0).unwrap();
        let mut rng = stream(1, Stream::ParticleFilter);
        let cloud = ParticleCloud::from_gaussian(&StateEstimate::scalar(0.0, 1.0, 0), 200, &mut rng).unwrap();
        let r = DMatrix::from_element(1, 1, 1e12);
        let out = pf_step(&cloud, &DVector::from_element(1, 3.0), &model, &r, 1, &mut rng).unwrap();
        assert!(!out.resampled);
        for w in &out.cloud.weights {
            assert!((w - 1.0 / 200.0).abs() < 1e-6);
        }
    }

    #[test]
    fn weights_are_normalized() {
        let model = Ungm::new(10.0).unwrap();
        let mut rng = stream(2, Stream::ParticleFilter);
        let mut cloud = ParticleCloud::from_gaussian(&StateEstimate::scalar(0.0, 1.0, 0), 300, &mut rng).unwrap();
        let r = DMatrix::from_element(1, 1, 1.0);
        for k in 1..20 {
            let out = pf_step(&cloud, &DVector::from_element(1, 2.0 + k as f64), &model, &r, k, &mut rng).unwrap();
            assert!((out.cloud.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            cloud = out.cloud;
        }
    }

    #[test]
    fn systematic_resampling_follows_weights() {
        let cloud = ParticleCloud {
            particles: (0..4).map(|i| DVector::from_element(1, i as f64)).collect(),
            weights: vec![0.0, 0.5, 0.0, 0.5],
        };
        let mut rng = stream(3, Stream::ParticleFilter);
        let out = systematic_resample(&cloud, &mut rng);
        let ones = out.particles.iter().filter(|p| p[0] == 1.0).count();
        let threes = out.particles.iter().filter(|p| p[0] == 3.0).count();
        assert_eq!(ones, 2);
        assert_eq!(threes, 2);
    }

    #[test]
    fn invalid_clouds_are_rejected() {
        let bad = ParticleCloud {
            particles: vec![DVector::zeros(1), DVector::zeros(1)],
            weights: vec![0.7, 0.7],
        };
        assert!(bad.validate().is_err());
    }
}
