//! The five estimators compared by the benchmark: UKF, PF, HUKF, VB-AUKF and
//! VB-HAUKF.
//!
//! Each filter is available twice: as free functions operating on plain
//! values (`ukf_update`, `huber_update`, `vb_aukf_step`, ...) and as a
//! stateful [`Estimator`] that splits every step into predict, innovation
//! and update phases so that an outlier gate can sit in between.

mod estimator;
mod huber;
mod pf;
mod ukf;
mod vb;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::unscented;

pub use estimator::{build_estimator, Estimator};
pub use huber::{huber_update, huber_weight, joseph_update, resolve_delta};
pub use pf::{pf_step, systematic_resample, ParticleCloud, PfOutcome};
pub use ukf::{predict_measurement, ukf_predict, ukf_update, MeasurementPrediction};
pub use vb::{vb_aukf_step, vb_haukf_step, vb_predict_belief, vb_update};

/// Gaussian belief over the state at step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEstimate {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub step: usize,
}

impl StateEstimate {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, step: usize) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::Dimension(format!(
                "mean of length {} with {}x{} covariance",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self { mean, cov, step })
    }

    /// Scalar convenience constructor.
    pub fn scalar(mean: f64, var: f64, step: usize) -> Self {
        Self {
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
            step,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(self.cov.iter()).all(|v| v.is_finite())
    }
}

/// Inverse-Wishart belief `IW(v, V)` over the measurement noise covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBelief {
    pub v: f64,
    pub scale: DMatrix<f64>,
}

impl NoiseBelief {
    pub fn new(v: f64, scale: DMatrix<f64>) -> Result<Self> {
        let b = Self { v, scale };
        b.validate()?;
        Ok(b)
    }

    /// Default prior: `v = m + 3`, `V = (v − m − 1)·I`, so `E[R] = I`.
    pub fn default_prior(m: usize) -> Self {
        let v = m as f64 + 3.0;
        Self {
            v,
            scale: DMatrix::identity(m, m) * (v - m as f64 - 1.0),
        }
    }

    /// Prior whose mean equals `nominal` (`V = (v − m − 1)·R`).
    pub fn with_mean(v: f64, nominal: &DMatrix<f64>) -> Result<Self> {
        let m = nominal.nrows() as f64;
        Self::new(v, nominal * (v - m - 1.0))
    }

    pub fn dim(&self) -> usize {
        self.scale.nrows()
    }

    /// `E[R] = V / (v − m − 1)`.
    pub fn expected_cov(&self) -> DMatrix<f64> {
        &self.scale / (self.v - self.dim() as f64 - 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.dim() as f64;
        if !self.scale.is_square() || self.scale.nrows() == 0 {
            return Err(Error::InvalidBelief("scale matrix must be square and non-empty".into()));
        }
        if !(self.v > m + 1.0) {
            return Err(Error::InvalidBelief(format!(
                "degrees of freedom {} must exceed m + 1 = {}",
                self.v,
                m + 1.0
            )));
        }
        if linalg::min_eigenvalue(&self.scale) <= 0.0 {
            return Err(Error::InvalidBelief("scale matrix is not positive definite".into()));
        }
        Ok(())
    }
}

/// Huber threshold δ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HuberDelta {
    Fixed(f64),
    /// `1.345` on the normalized-innovation scale.
    Auto,
}

impl Serialize for HuberDelta {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            HuberDelta::Fixed(d) => s.serialize_f64(*d),
            HuberDelta::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for HuberDelta {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(HuberDelta::Fixed(v)),
            Raw::Text(t) if t == "auto" => Ok(HuberDelta::Auto),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a positive number or \"auto\", got \"{t}\""
            ))),
        }
    }
}

impl fmt::Display for HuberDelta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HuberDelta::Fixed(d) => write!(f, "{d}"),
            HuberDelta::Auto => f.write_str("auto"),
        }
    }
}

/// Tuning shared by all filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// UT spread; `None` selects `3 − n` (clamped).
    pub kappa: Option<f64>,
    /// Inverse-Wishart forgetting factor in `(0, 1]`.
    pub rho: f64,
    /// Number of variational fixed-point iterations.
    pub vb_iters: usize,
    pub huber_delta: HuberDelta,
    pub pf_particles: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            kappa: None,
            rho: 0.97,
            vb_iters: 3,
            huber_delta: HuberDelta::Auto,
            pf_particles: 500,
        }
    }
}

impl FilterConfig {
    pub fn kappa_for(&self, n: usize) -> f64 {
        self.kappa.unwrap_or_else(|| unscented::default_kappa(n))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "rho must lie in (0, 1], got {}",
                self.rho
            )));
        }
        if self.vb_iters == 0 {
            return Err(Error::InvalidParameter("vb_iters must be >= 1".into()));
        }
        if let HuberDelta::Fixed(d) = self.huber_delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "huber_delta must be > 0, got {d}"
                )));
            }
        }
        if self.pf_particles < 2 {
            return Err(Error::InvalidParameter("pf_particles must be >= 2".into()));
        }
        Ok(())
    }
}

/// Filter identifiers used by the benchmark and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FilterKind {
    Pf,
    Ukf,
    Hukf,
    VbAukf,
    VbHaukf,
}

impl FilterKind {
    pub const ALL: [FilterKind; 5] = [
        FilterKind::Pf,
        FilterKind::Ukf,
        FilterKind::Hukf,
        FilterKind::VbAukf,
        FilterKind::VbHaukf,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FilterKind::Pf => "PF",
            FilterKind::Ukf => "UKF",
            FilterKind::Hukf => "HUKF",
            FilterKind::VbAukf => "VB-AUKF",
            FilterKind::VbHaukf => "VB-HAUKF",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for FilterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace('_', "-").as_str() {
            "PF" => Ok(FilterKind::Pf),
            "UKF" => Ok(FilterKind::Ukf),
            "HUKF" => Ok(FilterKind::Hukf),
            "VB-AUKF" => Ok(FilterKind::VbAukf),
            "VB-HAUKF" => Ok(FilterKind::VbHaukf),
            other => Err(Error::InvalidParameter(format!("unknown filter '{other}'"))),
        }
    }
}

impl TryFrom<String> for FilterKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FilterKind> for String {
    fn from(k: FilterKind) -> String {
        k.label().to_string()
    }
}
