//! Split conformal prediction for classification and sliding-window
//! conformal outlier detection (COD) for filters.
//!
//! Class labels are 0-based indices into the probability vector.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, Stream};

const SIMPLEX_TOL: f64 = 1e-9;

/// Rank `⌈(n+1)(1−α)⌉` of the conformal quantile, computed with a small
/// tolerance so that exact products such as `20·0.95` are not pushed up by
/// round-off.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let t = (n as f64 + 1.0) * (1.0 - alpha);
    (t - 1e-9 * t.max(1.0)).ceil().max(1.0) as usize
}

/// The `⌈(n+1)(1−α)⌉`-th smallest score, or `+∞` when that rank exceeds `n`.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("calibration scores"));
    }
    check_alpha(alpha)?;
    let rank = conformal_rank(scores.len(), alpha);
    if rank > scores.len() {
        return Ok(f64::INFINITY);
    }
    let mut buf = scores.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    Ok(*kth)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn check_simplex(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Empty("probability vector"));
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidParameter(format!(
            "probabilities must be nonnegative and sum to 1 (sum = {sum})"
        )));
    }
    Ok(())
}

/// `1 − probs[label]`.
pub fn nonconformity_score(probs: &[f64], label: usize) -> Result<f64> {
    check_simplex(probs)?;
    if label >= probs.len() {
        return Err(Error::InvalidParameter(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(1.0 - probs[label])
}

/// Classes whose score `1 − p` does not exceed `q_hat`.
pub fn prediction_set(probs: &[f64], q_hat: f64) -> Vec<usize> {
    probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| 1.0 - p <= q_hat)
        .map(|(i, _)| i)
        .collect()
}

/// Mahalanobis norm of the innovation, `√((z−ẑ)ᵀ S⁻¹ (z−ẑ))`.
pub fn innovation_score(z: &DVector<f64>, z_pred: &DVector<f64>, s: &DMatrix<f64>) -> Result<f64> {
    if z.len() != z_pred.len() {
        return Err(Error::Dimension("measurement and prediction lengths differ".into()));
    }
    Ok(linalg::mahalanobis_sq(&(z - z_pred), s)?.sqrt())
}

/// FIFO of the most recent `w` non-conformity scores.
#[derive(Debug, Clone)]
pub struct CalibrationWindow {
    scores: VecDeque<f64>,
    capacity: usize,
    alpha: f64,
}

impl CalibrationWindow {
    pub fn new(capacity: usize, alpha: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidParameter("window size must be >= 1".into()));
        }
        check_alpha(alpha)?;
        Ok(Self {
            scores: VecDeque::with_capacity(capacity),
            capacity,
            alpha,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.scores.len() == self.capacity
    }

    pub fn scores(&self) -> impl Iterator<Item = &f64> {
        self.scores.iter()
    }

    /// Appends `score`, evicting the oldest entry when full.
    pub fn push(&mut self, score: f64) {
        if self.is_full() {
            self.scores.pop_front();
        }
        self.scores.push_back(score);
    }

    /// Conformal quantile of the current contents (`+∞` while empty).
    pub fn quantile(&self) -> f64 {
        if self.scores.is_empty() {
            return f64::INFINITY;
        }
        let (a, b) = self.scores.as_slices();
        let joined: Vec<f64> = a.iter().chain(b).copied().collect();
        conformal_quantile(&joined, self.alpha).expect("window is non-empty and alpha validated")
    }

    /// Threshold used for gating: `+∞` until the window is full.
    pub fn threshold(&self) -> f64 {
        if self.is_full() {
            self.quantile()
        } else {
            f64::INFINITY
        }
    }
}

/// Outcome of gating one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodDecision {
    pub score: f64,
    pub threshold: f64,
    pub is_outlier: bool,
    pub inflation_applied: bool,
}

impl CodDecision {
    /// Whether the score fell at or below the threshold.
    pub fn covered(&self) -> bool {
        self.score <= self.threshold
    }
}

/// Whether a flagged score still enters the calibration window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlaggedScores {
    /// Plain sliding window over every score.
    #[default]
    Include,
    /// Keep flagged scores out. The window then only ever sees scores below
    /// its own threshold, so the threshold ratchets down and the flag rate
    /// grows far beyond α even on exchangeable scores.
    Exclude,
}

/// Gates one score: flags it when the window is full and the score exceeds
/// the conformal threshold. Unflagged scores are pushed into the window
/// after the decision; flagged ones are handled according to `flagged`.
pub fn gate_score(score: f64, win: &mut CalibrationWindow, flagged: FlaggedScores) -> CodDecision {
    let threshold = win.threshold();
    let is_outlier = score > threshold;
    if !is_outlier || flagged == FlaggedScores::Include {
        win.push(score);
    }
    CodDecision {
        score,
        threshold,
        is_outlier,
        inflation_applied: is_outlier,
    }
}

/// [`gate_score`] with the default window policy plus covariance
/// inflation: returns `γR` for flagged steps and `R` otherwise.
pub fn cod_gate(
    score: f64,
    win: &mut CalibrationWindow,
    r: &DMatrix<f64>,
    gamma: f64,
) -> Result<(CodDecision, DMatrix<f64>)> {
    if !(gamma > 1.0) {
        return Err(Error::InvalidParameter(format!("gamma must exceed 1, got {gamma}")));
    }
    let decision = gate_score(score, win, FlaggedScores::default());
    let r_eff = if decision.inflation_applied { r * gamma } else { r.clone() };
    Ok((decision, r_eff))
}

/// Outlier-gate settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodConfig {
    pub window: usize,
    pub alpha: f64,
    pub gamma: f64,
    #[serde(rename = "flagged_scores")]
    pub flagged: FlaggedScores,
}

impl Default for CodConfig {
    fn default() -> Self {
        Self {
            window: 100,
            alpha: 0.05,
            gamma: 10.0,
            flagged: FlaggedScores::default(),
        }
    }
}

impl CodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidParameter("COD window must be >= 1".into()));
        }
        check_alpha(self.alpha)?;
        // γ = 1 is accepted here: it disables inflation while keeping the
        // gate in the loop, which the paired-design checks rely on.
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma must be >= 1, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Stateful gate owned by one filter instance.
#[derive(Debug, Clone)]
pub struct CodGate {
    window: CalibrationWindow,
    gamma: f64,
    flagged: FlaggedScores,
}

impl CodGate {
    pub fn new(cfg: &CodConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            window: CalibrationWindow::new(cfg.window, cfg.alpha)?,
            gamma: cfg.gamma,
            flagged: cfg.flagged,
        })
    }

    pub fn window(&self) -> &CalibrationWindow {
        &self.window
    }

    /// Fills the window with held-out scores without gating them, so that
    /// gating starts without a warm-up period.
    pub fn prime<I: IntoIterator<Item = f64>>(&mut self, scores: I) {
        for s in scores {
            self.window.push(s);
        }
    }

    /// Gates `score`; returns the decision and the noise multiplier for this
    /// step (γ when flagged, 1 otherwise).
    pub fn decide(&mut self, score: f64) -> (CodDecision, f64) {
        let d = gate_score(score, &mut self.window, self.flagged);
        let scale = if d.inflation_applied { self.gamma } else { 1.0 };
        (d, scale)
    }
}

/// Empirical coverage of a flag sequence against the `1 − α − C/√w` bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageReport {
    pub empirical_coverage: f64,
    pub lower_bound: f64,
    pub bound_ok: bool,
}

pub const DEFAULT_BOUND_CONSTANT: f64 = 2.0;

/// `flags[k]` is `s_k ≤ q̂_k`; warm-up steps must already be excluded.
pub fn coverage_report(flags: &[bool], alpha: f64, w: usize, c: f64) -> Result<CoverageReport> {
    if flags.is_empty() {
        return Err(Error::Empty("coverage flags"));
    }
    if w == 0 {
        return Err(Error::InvalidParameter("window size must be >= 1".into()));
    }
    let covered = flags.iter().filter(|&&f| f).count();
    let empirical_coverage = covered as f64 / flags.len() as f64;
    let lower_bound = 1.0 - alpha - c / (w as f64).sqrt();
    Ok(CoverageReport {
        empirical_coverage,
        lower_bound,
        bound_ok: empirical_coverage >= lower_bound,
    })
}

/// Runs the sliding-window predictor over a score stream, pushing every
/// score, and returns `s_k ≤ q̂_k` for each step after the first `w`.
pub fn sliding_window_flags(scores: &[f64], w: usize, alpha: f64) -> Result<Vec<bool>> {
    let mut win = CalibrationWindow::new(w, alpha)?;
    let mut flags = Vec::with_capacity(scores.len().saturating_sub(w));
    for &s in scores {
        if win.is_full() {
            flags.push(s <= win.quantile());
        }
        win.push(s);
    }
    Ok(flags)
}

/// Small calibration/test scenario: 20 nominal calibration scores and a
/// batch of test scores, a few of which come from an anomalous source.
#[derive(Debug, Clone)]
pub struct DemoScenario {
    pub calibration: Vec<f64>,
    pub test: Vec<f64>,
    /// Indices of `test` drawn from the anomalous source.
    pub injected: Vec<usize>,
    pub alpha: f64,
    pub threshold: f64,
    /// Indices of `test` whose score exceeds the threshold.
    pub flagged: Vec<usize>,
}

/// Builds the demo: normalized scores in `[0, 1]`, nominal ones from
/// `Beta(2, 5)`-like draws and anomalies close to 1.
pub fn demo_scenario(seed: u64, alpha: f64) -> Result<DemoScenario> {
    const N: usize = 20;
    let mut rng = rng::stream(seed, Stream::Scores);
    let nominal = |rng: &mut rng::SimRng| -> f64 {
        // Mean of two uniforms on [0, 0.7]: a bump centred at 0.35.
        0.35 * (rng.random::<f64>() + rng.random::<f64>())
    };
    let calibration: Vec<f64> = (0..N).map(|_| nominal(&mut rng)).collect();
    let mut test = Vec::with_capacity(N);
    let mut injected = Vec::new();
    for i in 0..N {
        if rng.random::<f64>() < 0.15 {
            injected.push(i);
            test.push(0.85 + 0.15 * rng.random::<f64>());
        } else {
            test.push(nominal(&mut rng));
        }
    }
    let threshold = conformal_quantile(&calibration, alpha)?;
    let flagged = test
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(i, _)| i)
        .collect();
    Ok(DemoScenario {
        calibration,
        test,
        injected,
        alpha,
        threshold,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_examples() {
        assert_eq!(nonconformity_score(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        assert_eq!(nonconformity_score(&[0.25; 4], 3).unwrap(), 0.75);
        assert!((nonconformity_score(&[0.7, 0.2, 0.1], 1).unwrap() - 0.8).abs() < 1e-15);
        assert!(nonconformity_score(&[0.7, 0.2, 0.1], 3).is_err());
        assert!(nonconformity_score(&[0.7, 0.2, 0.2], 0).is_err());
        assert!(nonconformity_score(&[1.2, -0.2], 0).is_err());
    }

    #[test]
    fn quantile_examples() {
        let scores: Vec<f64> = (0..20).map(|i| (i as f64 * 7.3) % 5.0).collect();
        let max = scores.iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(conformal_rank(20, 0.05), 20);
        assert_eq!(conformal_quantile(&scores, 0.05).unwrap(), max);
        assert_eq!(conformal_quantile(&[0.4; 9], 0.2).unwrap(), 0.4);
        assert_eq!(conformal_rank(4, 0.5), 3);
        assert_eq!(conformal_quantile(&[4.0, 1.0, 3.0, 2.0], 0.5).unwrap(), 3.0);
        assert_eq!(conformal_quantile(&[1.0, 2.0], 0.05).unwrap(), f64::INFINITY);
        assert!(conformal_quantile(&[], 0.1).is_err());
        assert!(conformal_quantile(&[1.0], 1.0).is_err());
    }

    #[test]
    fn prediction_set_examples() {
        assert_eq!(prediction_set(&[0.2, 0.3, 0.5], f64::INFINITY), vec![0, 1, 2]);
        assert_eq!(prediction_set(&[0.0, 1.0, 0.0], 0.0), vec![1]);
        assert_eq!(prediction_set(&[0.5, 0.3, 0.2], 0.7), vec![0, 1]);
    }

    #[test]
    fn innovation_score_examples() {
        let one = |v: f64| DVector::from_element(1, v);
        let s = DMatrix::from_element(1, 1, 4.0);
        assert_eq!(innovation_score(&one(1.0), &one(1.0), &s).unwrap(), 0.0);
        assert!((innovation_score(&one(3.0), &one(1.0), &s).unwrap() - 1.0).abs() < 1e-15);
        let z = DVector::from_vec(vec![3.0, 4.0]);
        let s2 = DMatrix::identity(2, 2);
        assert!((innovation_score(&z, &DVector::zeros(2), &s2).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn window_evicts_oldest_first() {
        let mut w = CalibrationWindow::new(3, 0.1).unwrap();
        for s in [1.0, 2.0, 3.0, 4.0] {
            w.push(s);
        }
        assert_eq!(w.scores().copied().collect::<Vec<_>>(), vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn warm_up_never_flags() {
        let mut w = CalibrationWindow::new(5, 0.05).unwrap();
        let r = DMatrix::from_element(1, 1, 2.0);
        for i in 0..4 {
            let (d, r_eff) = cod_gate(1e6 * (i + 1) as f64, &mut w, &r, 10.0).unwrap();
            assert!(!d.is_outlier);
            assert_eq!(r_eff, r);
        }
    }

    #[test]
    fn score_below_max_is_not_inflated() {
        // w = 19, alpha = 0.05: rank 19 = the window maximum.
        let mut w = CalibrationWindow::new(19, 0.05).unwrap();
        for i in 0..19 {
            w.push(i as f64);
        }
        assert_eq!(w.threshold(), 18.0);
        let r = DMatrix::from_element(1, 1, 2.0);
        let (d, r_eff) = cod_gate(18.0, &mut w, &r, 10.0).unwrap();
        assert!(!d.is_outlier && !d.inflation_applied);
        assert_eq!(r_eff[(0, 0)], 2.0);
    }

    #[test]
    fn outlier_inflates_and_is_pushed() {
        let mut w = CalibrationWindow::new(4, 0.5).unwrap();
        for s in [1.0, 2.0, 3.0, 4.0] {
            w.push(s);
        }
        let r = DMatrix::from_element(1, 1, 2.0);
        let (d, r_eff) = cod_gate(50.0, &mut w, &r, 10.0).unwrap();
        assert!(d.is_outlier && d.inflation_applied);
        assert_eq!(r_eff[(0, 0)], 20.0);
        assert_eq!(w.scores().copied().collect::<Vec<_>>(), vec![2.0, 3.0, 4.0, 50.0]);
        assert!(cod_gate(1.0, &mut w, &r, 1.0).is_err());
    }

    #[test]
    fn flagged_score_policies() {
        let fill = || {
            let mut w = CalibrationWindow::new(4, 0.5).unwrap();
            for s in [1.0, 2.0, 3.0, 4.0] {
                w.push(s);
            }
            w
        };
        let window_after = |policy| {
            let mut w = fill();
            let d = gate_score(50.0, &mut w, policy);
            assert!(d.is_outlier);
            w.scores().copied().collect::<Vec<_>>()
        };
        assert_eq!(window_after(FlaggedScores::Exclude), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(window_after(FlaggedScores::Include), vec![2.0, 3.0, 4.0, 50.0]);
    }

    #[test]
    fn excluding_flags_drifts_the_threshold_down() {
        use rand::Rng;
        let mut rng = crate::rng::stream(5, crate::rng::Stream::Scores);
        let scores: Vec<f64> = (0..20_000).map(|_| rng.random::<f64>()).collect();
        let rate = |policy| {
            let mut w = CalibrationWindow::new(100, 0.05).unwrap();
            let flags = scores.iter().filter(|&&s| gate_score(s, &mut w, policy).is_outlier).count();
            flags as f64 / (scores.len() - 100) as f64
        };
        let include = rate(FlaggedScores::Include);
        let exclude = rate(FlaggedScores::Exclude);
        assert!((include - 0.05).abs() < 0.01, "{include}");
        assert!(exclude > 0.5, "{exclude}");
    }

    #[test]
    fn coverage_report_all_covered() {
        let rep = coverage_report(&[true; 10], 0.1, 100, 2.0).unwrap();
        assert_eq!(rep.empirical_coverage, 1.0);
        assert!(rep.bound_ok);
        assert!(coverage_report(&[], 0.1, 100, 2.0).is_err());
    }

    #[test]
    fn bound_width_for_large_window() {
        let rep = coverage_report(&[true], 0.05, 1000, DEFAULT_BOUND_CONSTANT).unwrap();
        let gap = 1.0 - 0.05 - rep.lower_bound;
        assert!((gap - 0.063_245_553_203_367_6).abs() < 1e-12);
        let rep1 = coverage_report(&[true], 0.05, 1000, 1.0).unwrap();
        assert!((1.0 - 0.05 - rep1.lower_bound - 0.031_622_776_601_683_79).abs() < 1e-12);
    }

    #[test]
    fn demo_flags_injected_outliers() {
        let demo = demo_scenario(42, 0.05).unwrap();
        assert_eq!(demo.calibration.len(), 20);
        let max = demo.calibration.iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(demo.threshold, max);
        for i in &demo.injected {
            assert!(demo.flagged.contains(i));
        }
    }
}
