//! State-space models, the UNGM benchmark system and the four measurement
//! noise regimes used by the benchmark.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, Stream};

/// Discrete-time model `x_k = f(x_{k-1}, k) + w`, `z_k = h(x_k) + v`.
///
/// `transition` and `measurement` return only the deterministic parts;
/// noise is added by callers.
pub trait StateSpaceModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn meas_dim(&self) -> usize;
    fn transition(&self, x: &DVector<f64>, k: usize) -> DVector<f64>;
    fn measurement(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Process noise covariance `Q`.
    fn process_cov(&self) -> &DMatrix<f64>;
}

/// Deterministic part of the UNGM transition.
pub fn ungm_transition(x: f64, k: usize) -> f64 {
    debug_assert!(k >= 1, "UNGM step index starts at 1");
    0.5 * x + 25.0 * x / (1.0 + x * x) + 8.0 * (1.2 * (k as f64 - 1.0)).cos()
}

/// Deterministic part of the UNGM measurement, `x²/20`.
pub fn ungm_measurement(x: f64) -> f64 {
    x * x / 20.0
}

/// Univariate nonstationary growth model with scalar process variance `q`.
#[derive(Debug, Clone)]
pub struct Ungm {
    q: DMatrix<f64>,
}

impl Ungm {
    pub fn new(process_var: f64) -> Result<Self> {
        if !(process_var >= 0.0 && process_var.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "process variance must be finite and >= 0, got {process_var}"
            )));
        }
        Ok(Self {
            q: DMatrix::from_element(1, 1, process_var),
        })
    }
}

impl StateSpaceModel for Ungm {
    fn state_dim(&self) -> usize {
        1
    }
    fn meas_dim(&self) -> usize {
        1
    }
    fn transition(&self, x: &DVector<f64>, k: usize) -> DVector<f64> {
        DVector::from_element(1, ungm_transition(x[0], k))
    }
    fn measurement(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, ungm_measurement(x[0]))
    }
    fn process_cov(&self) -> &DMatrix<f64> {
        &self.q
    }
}

/// Linear-Gaussian model `x_k = A x_{k-1} + b`, `z_k = H x_k`.
///
/// Mostly useful as a reference system: every UKF-family filter must agree
/// with the closed-form Kalman filter on it.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, h: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || b.len() != n || h.ncols() != n || q.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "inconsistent linear model: A {:?}, b {}, H {:?}, Q {:?}",
                a.shape(),
                b.len(),
                h.shape(),
                q.shape()
            )));
        }
        validate_psd(&q, "process covariance")?;
        Ok(Self { a, b, h, q })
    }
}

impl StateSpaceModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn meas_dim(&self) -> usize {
        self.h.nrows()
    }
    fn transition(&self, x: &DVector<f64>, _k: usize) -> DVector<f64> {
        &self.a * x + &self.b
    }
    fn measurement(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x
    }
    fn process_cov(&self) -> &DMatrix<f64> {
        &self.q
    }
}

pub(crate) fn validate_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("{what} is not square")));
    }
    if linalg::min_eigenvalue(m) < -1e-10 {
        return Err(Error::InvalidParameter(format!(
            "{what} is not positive semi-definite"
        )));
    }
    Ok(())
}

/// The four measurement-noise cases of the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NoiseCase {
    /// Stationary Gaussian with known variance.
    A,
    /// Gaussian with the time-varying variance schedule.
    B,
    /// Two-component Gaussian mixture (contamination).
    C,
    /// Mixture whose first component follows the case-B schedule.
    D,
}

impl NoiseCase {
    pub fn label(self) -> &'static str {
        match self {
            NoiseCase::A => "a",
            NoiseCase::B => "b",
            NoiseCase::C => "c",
            NoiseCase::D => "d",
        }
    }
}

impl std::fmt::Display for NoiseCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for NoiseCase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(NoiseCase::A),
            "b" => Ok(NoiseCase::B),
            "c" => Ok(NoiseCase::C),
            "d" => Ok(NoiseCase::D),
            other => Err(Error::InvalidParameter(format!("unknown noise case '{other}'"))),
        }
    }
}

/// Measurement-noise regime description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseRegime {
    pub case: NoiseCase,
    /// Variance for case A.
    pub base_var: f64,
    /// Contamination fraction `a` for cases C and D.
    pub contamination: f64,
    /// Standard deviation of the nominal mixture component (case C).
    pub r1: f64,
    /// Standard deviation of the contaminating mixture component.
    pub r2: f64,
    /// Total number of steps, needed by the case-B schedule.
    pub steps: usize,
}

impl NoiseRegime {
    pub const DEFAULT_STEPS: usize = 500;

    /// Regime with the default parameters (`R = 1`, `a = 0.1`, `R1 = 1`,
    /// `R2 = 10`, `M = 500`).
    pub fn with_case(case: NoiseCase) -> Self {
        Self {
            case,
            base_var: 1.0,
            contamination: 0.1,
            r1: 1.0,
            r2: 10.0,
            steps: Self::DEFAULT_STEPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_var >= 0.0 && self.base_var.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "base variance must be >= 0, got {}",
                self.base_var
            )));
        }
        if !(0.0..=1.0).contains(&self.contamination) {
            return Err(Error::InvalidParameter(format!(
                "contamination must lie in [0, 1], got {}",
                self.contamination
            )));
        }
        if !(self.r1 > 0.0 && self.r1.is_finite()) || !(self.r2 > 0.0 && self.r2.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "mixture standard deviations must be > 0, got R1={} R2={}",
                self.r1, self.r2
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidParameter("M must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for NoiseRegime {
    fn default() -> Self {
        Self::with_case(NoiseCase::A)
    }
}

impl TryFrom<String> for NoiseCase {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NoiseCase> for String {
    fn from(c: NoiseCase) -> String {
        c.label().to_string()
    }
}

/// Time-varying measurement variance of case B at step `k` of `m` steps.
///
/// The boundary `k = 1.5·M/4` belongs to the second branch.
pub fn case_b_variance(k: usize, m: usize) -> Result<f64> {
    if k < 1 || k > m {
        return Err(Error::InvalidParameter(format!(
            "step {k} outside [1, {m}]"
        )));
    }
    let kf = k as f64;
    let mf = m as f64;
    let v = if kf < 1.5 * mf / 4.0 {
        3.0 + 2.0 * (2.0 + (0.3 * (kf - mf / 4.0)).atan())
    } else {
        3.0 + 2.0 * (2.0 + (-0.3 * (kf - mf / 2.0)).atan())
    };
    Ok(v)
}

/// Lower and upper bound of the case-B schedule.
pub fn case_b_bounds() -> (f64, f64) {
    (3.0 + 2.0 * (2.0 - FRAC_PI_2), 3.0 + 2.0 * (2.0 + FRAC_PI_2))
}

/// Draws one scalar measurement-noise sample for step `k`.
pub fn sample_meas_noise<R: Rng + ?Sized>(regime: &NoiseRegime, k: usize, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    match regime.case {
        NoiseCase::A => regime.base_var.sqrt() * z,
        NoiseCase::B => schedule_var(k, regime.steps).sqrt() * z,
        NoiseCase::C | NoiseCase::D => {
            let u: f64 = rng.random();
            if u < regime.contamination {
                regime.r2 * z
            } else if regime.case == NoiseCase::C {
                regime.r1 * z
            } else {
                schedule_var(k, regime.steps).sqrt() * z
            }
        }
    }
}

// Steps outside the schedule are clamped to its ends.
fn schedule_var(k: usize, m: usize) -> f64 {
    case_b_variance(k.clamp(1, m.max(1)), m.max(1)).expect("clamped step is in range")
}

/// Ground truth and noisy measurements for `k = 1..=M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub truth: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

/// Simulates `steps` steps of `model` starting from `x0`.
///
/// Randomness comes from the trajectory stream of `seed`; the same inputs
/// always reproduce the same trajectory bit for bit.
pub fn simulate(
    model: &dyn StateSpaceModel,
    regime: &NoiseRegime,
    steps: usize,
    x0: &DVector<f64>,
    seed: u64,
) -> Result<Trajectory> {
    regime.validate()?;
    if steps == 0 {
        return Err(Error::InvalidParameter("M must be >= 1".into()));
    }
    if x0.len() != model.state_dim() {
        return Err(Error::Dimension(format!(
            "initial state has length {}, model expects {}",
            x0.len(),
            model.state_dim()
        )));
    }
    let q_chol = linalg::cholesky_with_jitter(model.process_cov())?;
    let mut rng = rng::stream(seed, Stream::Trajectory);
    let mut truth = Vec::with_capacity(steps);
    let mut measurements = Vec::with_capacity(steps);
    let mut x = x0.clone();
    for k in 1..=steps {
        x = model.transition(&x, k) + linalg::correlated_normal(&q_chol, &mut rng);
        let mut z = model.measurement(&x);
        for zi in z.iter_mut() {
            *zi += sample_meas_noise(regime, k, &mut rng);
        }
        truth.push(x.clone());
        measurements.push(z);
    }
    Ok(Trajectory {
        truth,
        measurements,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ungm_transition_examples() {
        assert_eq!(ungm_transition(0.0, 1), 8.0);
        assert_eq!(ungm_transition(1.0, 1), 21.0);
        // 1.5 + 7.5 + 8 cos(6), cos(6) = 0.960170286650366
        let expected = 1.5 + 7.5 + 8.0 * 0.960_170_286_650_366_f64;
        assert!((ungm_transition(3.0, 6) - expected).abs() < 1e-12);
        assert!((ungm_transition(3.0, 6) - 16.681_362_293_202_93).abs() < 1e-10);
    }

    #[test]
    fn ungm_measurement_examples() {
        assert_eq!(ungm_measurement(0.0), 0.0);
        assert_eq!(ungm_measurement(10.0), 5.0);
        assert_eq!(ungm_measurement(-10.0), 5.0);
        assert!((ungm_measurement(3.0) - 0.45).abs() < 1e-15);
    }

    #[test]
    fn case_b_examples() {
        assert_eq!(case_b_variance(100, 400).unwrap(), 7.0);
        assert_eq!(case_b_variance(200, 400).unwrap(), 7.0);
        // 3 + 2(2 + atan 6), atan 6 = 1.4056476493802699
        let v = case_b_variance(120, 400).unwrap();
        assert!((v - 9.811_295_298_760_54).abs() < 1e-12);
    }

    #[test]
    fn case_b_boundary_uses_second_branch() {
        // 1.5 * 400 / 4 = 150 -> 3 + 2(2 + atan(-0.3 * (150 - 200))) = 3 + 2(2 + atan 15)
        let v = case_b_variance(150, 400).unwrap();
        assert!((v - (7.0 + 2.0 * 15f64.atan())).abs() < 1e-12);
    }

    #[test]
    fn case_b_rejects_out_of_range() {
        assert!(case_b_variance(0, 10).is_err());
        assert!(case_b_variance(11, 10).is_err());
    }

    #[test]
    fn regime_validation() {
        let mut r = NoiseRegime::with_case(NoiseCase::C);
        assert!(r.validate().is_ok());
        r.contamination = 1.5;
        assert!(r.validate().is_err());
        let mut r = NoiseRegime::with_case(NoiseCase::C);
        r.r2 = 0.0;
        assert!(r.validate().is_err());
        let mut r = NoiseRegime::with_case(NoiseCase::B);
        r.steps = 0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn noise_free_single_step() {
        let model = Ungm::new(0.0).unwrap();
        let mut regime = NoiseRegime::with_case(NoiseCase::A);
        regime.base_var = 0.0;
        let traj = simulate(&model, &regime, 1, &DVector::zeros(1), 3).unwrap();
        assert_eq!(traj.truth[0][0], 8.0);
        assert!((traj.measurements[0][0] - 3.2).abs() < 1e-12);
    }

    #[test]
    fn simulate_is_deterministic() {
        let model = Ungm::new(10.0).unwrap();
        let regime = NoiseRegime::with_case(NoiseCase::D);
        let x0 = DVector::from_element(1, 0.1);
        let a = simulate(&model, &regime, 200, &x0, 11).unwrap();
        let b = simulate(&model, &regime, 200, &x0, 11).unwrap();
        assert_eq!(a, b);
        let c = simulate(&model, &regime, 200, &x0, 12).unwrap();
        assert_ne!(a.measurements, c.measurements);
    }

    #[test]
    fn case_a_residual_mean_is_small() {
        let model = Ungm::new(10.0).unwrap();
        let regime = NoiseRegime::with_case(NoiseCase::A);
        let traj = simulate(&model, &regime, 500, &DVector::from_element(1, 0.1), 5).unwrap();
        let mean: f64 = traj
            .truth
            .iter()
            .zip(&traj.measurements)
            .map(|(x, z)| z[0] - ungm_measurement(x[0]))
            .sum::<f64>()
            / 500.0;
        assert!(mean.abs() < 4.0 * (1.0f64 / 500.0).sqrt());
    }
}
