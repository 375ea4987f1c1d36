//! Geomagnetic fingerprint matching on a synthetic survey grid.
//!
//! Readings arrive in the sensor (carrier) frame together with the device
//! attitude and are rotated into the global frame before matching. Matching
//! is a softmax classifier over grid nodes; split-conformal calibration turns
//! its probabilities into prediction sets.

use std::io::{Read, Write};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conformal::{conformal_quantile, nonconformity_score, prediction_set, CodConfig, CodGate};
use crate::error::{Error, Result};
use crate::model::{sample_meas_noise, NoiseCase, NoiseRegime};
use crate::rng::{self, Stream};

/// Magnetometer reading in the carrier frame with the device attitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagSample {
    /// Field in µT; x right, y front, z top of the device.
    pub m_ccs: Vector3<f64>,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Carrier-to-global rotation `R_z(yaw)·R_y(pitch)·R_x(roll)`.
pub fn attitude_matrix(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    rot_z(yaw) * rot_y(pitch) * rot_x(roll)
}

pub fn ccs_to_gcs(s: &MagSample) -> Vector3<f64> {
    attitude_matrix(s.roll, s.pitch, s.yaw) * s.m_ccs
}

/// Inverse of [`ccs_to_gcs`]: expresses a global-frame field in the carrier
/// frame of a device with the given attitude.
pub fn gcs_to_ccs(m_gcs: &Vector3<f64>, roll: f64, pitch: f64, yaw: f64) -> MagSample {
    let m_ccs = rot_x(-roll) * rot_y(-pitch) * rot_z(-yaw) * m_gcs;
    MagSample { m_ccs, roll, pitch, yaw }
}

/// Survey grid node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridNode {
    pub id: usize,
    pub x: f64,
    pub y: f64,
}

impl GridNode {
    pub fn distance(&self, other: &GridNode) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// `nx × ny` nodes spaced `spacing` meters apart, row-major from the origin.
pub fn grid(nx: usize, ny: usize, spacing: f64) -> Vec<GridNode> {
    (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i, j)))
        .enumerate()
        .map(|(id, (i, j))| GridNode {
            id,
            x: i as f64 * spacing,
            y: j as f64 * spacing,
        })
        .collect()
}

/// Reference signature of one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Signature {
    pub mean: Vector3<f64>,
    pub dispersion: f64,
}

pub const MIN_DISPERSION: f64 = 1e-3;

#[derive(Debug, Serialize, Deserialize)]
struct DbRow {
    node_id: usize,
    x_m: f64,
    y_m: f64,
    sig_x: f64,
    sig_y: f64,
    sig_z: f64,
    dispersion: f64,
}

/// Grid nodes with their reference signatures. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintDb {
    nodes: Vec<GridNode>,
    signatures: Vec<Signature>,
}

impl FingerprintDb {
    pub fn new(nodes: Vec<GridNode>, signatures: Vec<Signature>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidParameter("a fingerprint database needs at least 2 nodes".into()));
        }
        if nodes.len() != signatures.len() {
            return Err(Error::Dimension(format!(
                "{} nodes with {} signatures",
                nodes.len(),
                signatures.len()
            )));
        }
        if let Some((i, n)) = nodes.iter().enumerate().find(|(i, n)| n.id != *i) {
            return Err(Error::InvalidParameter(format!(
                "node ids must be 0..K in order, row {i} has id {}",
                n.id
            )));
        }
        for (i, a) in nodes.iter().enumerate() {
            if nodes[i + 1..].iter().any(|b| a.x == b.x && a.y == b.y) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate node coordinates ({}, {})",
                    a.x, a.y
                )));
            }
        }
        if let Some(s) = signatures
            .iter()
            .find(|s| !(s.dispersion > 0.0) || !s.mean.iter().all(|v| v.is_finite()))
        {
            return Err(Error::InvalidParameter(format!("invalid signature {s:?}")));
        }
        Ok(Self { nodes, signatures })
    }

    /// Signature per node from labeled global-frame samples: the sample mean
    /// and the per-axis sample standard deviation (floored).
    pub fn from_samples(nodes: Vec<GridNode>, samples: &[(usize, Vector3<f64>)]) -> Result<Self> {
        let k = nodes.len();
        let mut sums = vec![Vector3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (label, m) in samples {
            let i = check_label(*label, k)?;
            sums[i] += m;
            counts[i] += 1;
        }
        if let Some(i) = counts.iter().position(|&c| c < 2) {
            return Err(Error::InvalidParameter(format!("node {i} has fewer than 2 samples")));
        }
        let means: Vec<Vector3<f64>> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
        let mut sq = vec![0.0; k];
        for (label, m) in samples {
            sq[*label] += (m - means[*label]).norm_squared();
        }
        let signatures = means
            .into_iter()
            .zip(sq.iter().zip(&counts))
            .map(|(mean, (&ss, &c))| Signature {
                mean,
                dispersion: (ss / (3.0 * (c - 1) as f64)).sqrt().max(MIN_DISPERSION),
            })
            .collect();
        Self::new(nodes, signatures)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[GridNode] {
        &self.nodes
    }

    pub fn signatures(&self) -> &[Signature] {
        &self.signatures
    }

    /// One row per node: `node_id,x_m,y_m,sig_x,sig_y,sig_z,dispersion`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for (n, s) in self.nodes.iter().zip(&self.signatures) {
            out.serialize(DbRow {
                node_id: n.id,
                x_m: n.x,
                y_m: n.y,
                sig_x: s.mean.x,
                sig_y: s.mean.y,
                sig_z: s.mean.z,
                dispersion: s.dispersion,
            })?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the format of [`write_csv`](Self::write_csv); lines starting
    /// with `#` are skipped.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let mut nodes = Vec::new();
        let mut signatures = Vec::new();
        for row in rdr.deserialize() {
            let row: DbRow = row?;
            nodes.push(GridNode {
                id: row.node_id,
                x: row.x_m,
                y: row.y_m,
            });
            signatures.push(Signature {
                mean: Vector3::new(row.sig_x, row.sig_y, row.sig_z),
                dispersion: row.dispersion,
            });
        }
        Self::new(nodes, signatures)
    }
}

fn check_label(label: usize, k: usize) -> Result<usize> {
    if label >= k {
        return Err(Error::InvalidParameter(format!("label {label} outside 0..{k}")));
    }
    Ok(label)
}

/// Softmax of `−‖q − μ_i‖² / (2σ_i²)` over the nodes.
pub fn match_probabilities(db: &FingerprintDb, query: &Vector3<f64>) -> Result<Vec<f64>> {
    if db.is_empty() {
        return Err(Error::Empty("fingerprint database"));
    }
    let logits: Vec<f64> = db
        .signatures
        .iter()
        .map(|s| -(query - s.mean).norm_squared() / (2.0 * s.dispersion * s.dispersion))
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::InvalidParameter("query produced no finite logit".into()));
    }
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / sum).collect())
}

/// Index of the largest probability (first one on ties).
pub fn argmax(probs: &[f64]) -> usize {
    probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
        .0
}

/// Non-conformity scores `1 − p̂(label)` of held-out labeled samples.
pub fn calibration_scores(db: &FingerprintDb, labeled: &[(usize, Vector3<f64>)]) -> Result<Vec<f64>> {
    labeled
        .iter()
        .map(|(label, m)| {
            check_label(*label, db.len())?;
            nonconformity_score(&match_probabilities(db, m)?, *label)
        })
        .collect()
}

/// Result of [`localize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    /// Most probable node index.
    pub node: usize,
    pub probabilities: Vec<f64>,
    /// Conformal prediction set, ascending node indices.
    pub set: Vec<usize>,
    pub threshold: f64,
    /// Set when no calibration scores were available and the set
    /// defaulted to every node.
    pub uncalibrated: bool,
}

pub fn localize(
    db: &FingerprintDb,
    query: &Vector3<f64>,
    calibration: &[f64],
    alpha: f64,
) -> Result<Localization> {
    let probabilities = match_probabilities(db, query)?;
    let node = argmax(&probabilities);
    let (threshold, uncalibrated) = if calibration.is_empty() {
        (f64::INFINITY, true)
    } else {
        (conformal_quantile(calibration, alpha)?, false)
    };
    let set = prediction_set(&probabilities, threshold);
    Ok(Localization {
        node,
        probabilities,
        set,
        threshold,
        uncalibrated,
    })
}

/// One Gaussian anomaly of the synthetic field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub center: (f64, f64),
    pub width: f64,
    pub amplitude: Vector3<f64>,
}

/// Smooth global-frame field: a uniform background plus 3–5 bumps.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel {
    pub background: Vector3<f64>,
    pub bumps: Vec<Bump>,
}

impl FieldModel {
    /// Random field over `[0, extent.0] × [0, extent.1]`.
    pub fn random<R: Rng + ?Sized>(extent: (f64, f64), amplitude: f64, rng: &mut R) -> Self {
        let count = rng.random_range(3..=5);
        let scale = extent.0.max(extent.1).max(1.0);
        let bumps = (0..count)
            .map(|_| Bump {
                center: (rng.random::<f64>() * extent.0, rng.random::<f64>() * extent.1),
                width: scale * (0.15 + 0.25 * rng.random::<f64>()),
                amplitude: Vector3::from_fn(|_, _| amplitude * rng.sample::<f64, _>(StandardNormal)),
            })
            .collect();
        Self {
            background: Vector3::new(22.0, 5.0, -42.0),
            bumps,
        }
    }

    pub fn at(&self, x: f64, y: f64) -> Vector3<f64> {
        self.bumps.iter().fold(self.background, |acc, b| {
            let d2 = (x - b.center.0).powi(2) + (y - b.center.1).powi(2);
            acc + b.amplitude * (-d2 / (2.0 * b.width * b.width)).exp()
        })
    }
}

/// Synthetic survey site and sensor settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiteConfig {
    pub nx: usize,
    pub ny: usize,
    /// Node spacing in meters.
    pub spacing: f64,
    /// Standard deviation of the bump amplitudes, µT.
    pub field_amplitude: f64,
    /// Per-axis white sensor noise, µT.
    pub sensor_noise: f64,
    /// Labeled survey samples per node; half build the signatures, half
    /// calibrate the prediction sets.
    pub samples_per_node: usize,
}

impl Default for SiteConfig {
    fn default() -> Self {
        Self {
            nx: 4,
            ny: 4,
            spacing: 3.0,
            field_amplitude: 12.0,
            sensor_noise: 1.0,
            samples_per_node: 40,
        }
    }
}

impl SiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nx * self.ny < 2 {
            return Err(Error::InvalidParameter("the grid needs at least 2 nodes".into()));
        }
        if !(self.spacing > 0.0) || !(self.field_amplitude >= 0.0) || !(self.sensor_noise > 0.0) {
            return Err(Error::InvalidParameter(
                "spacing and sensor noise must be > 0, field amplitude >= 0".into(),
            ));
        }
        if self.samples_per_node < 4 {
            return Err(Error::InvalidParameter("samples_per_node must be >= 4".into()));
        }
        Ok(())
    }
}

/// Per-axis sensor noise, optionally contaminated.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadingNoise {
    regime: NoiseRegime,
}

impl ReadingNoise {
    pub fn clean(sigma: f64) -> Self {
        let mut regime = NoiseRegime::with_case(NoiseCase::A);
        regime.base_var = sigma * sigma;
        Self { regime }
    }

    /// Two-component mixture: `N(0, σ²)` with probability `1 − a`,
    /// `N(0, σ_out²)` otherwise.
    pub fn contaminated(sigma: f64, fraction: f64, outlier_sigma: f64) -> Result<Self> {
        let mut regime = NoiseRegime::with_case(NoiseCase::C);
        regime.r1 = sigma;
        regime.r2 = outlier_sigma;
        regime.contamination = fraction;
        regime.validate()?;
        Ok(Self { regime })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<f64> {
        Vector3::from_fn(|_, _| sample_meas_noise(&self.regime, 1, rng))
    }
}

/// A reading at `node` taken with a random device attitude.
pub fn sample_reading<R: Rng + ?Sized>(
    field: &FieldModel,
    node: &GridNode,
    noise: &ReadingNoise,
    rng: &mut R,
) -> MagSample {
    let m = field.at(node.x, node.y) + noise.sample(rng);
    let roll = rng.random_range(-0.3..0.3);
    let pitch = rng.random_range(-0.3..0.3);
    let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    gcs_to_ccs(&m, roll, pitch, yaw)
}

/// A surveyed site: the true field, the database built from the first half
/// of the survey and calibration scores from the second half.
#[derive(Debug, Clone)]
pub struct Site {
    pub field: FieldModel,
    pub db: FingerprintDb,
    pub calibration: Vec<f64>,
}

/// Generates and surveys a site with clean sensor noise.
pub fn survey_site(cfg: &SiteConfig, seed: u64) -> Result<Site> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, Stream::Fingerprint);
    let nodes = grid(cfg.nx, cfg.ny, cfg.spacing);
    let extent = ((cfg.nx - 1) as f64 * cfg.spacing, (cfg.ny - 1) as f64 * cfg.spacing);
    let field = FieldModel::random(extent, cfg.field_amplitude, &mut rng);
    let noise = ReadingNoise::clean(cfg.sensor_noise);
    let half = cfg.samples_per_node / 2;
    let mut build = Vec::with_capacity(nodes.len() * half);
    let mut hold_out = Vec::with_capacity(nodes.len() * (cfg.samples_per_node - half));
    for node in &nodes {
        for j in 0..cfg.samples_per_node {
            let m = ccs_to_gcs(&sample_reading(&field, node, &noise, &mut rng));
            if j < half {
                build.push((node.id, m));
            } else {
                hold_out.push((node.id, m));
            }
        }
    }
    let db = FingerprintDb::from_samples(nodes, &build)?;
    let calibration = calibration_scores(&db, &hold_out)?;
    Ok(Site { field, db, calibration })
}

/// `count` clean labeled readings at uniformly drawn nodes, independent of
/// the survey.
pub fn held_out_queries(site: &Site, sensor_noise: f64, count: usize, seed: u64) -> Vec<(usize, Vector3<f64>)> {
    let mut rng = rng::stream(seed.wrapping_add(0x5851_f42d), Stream::Fingerprint);
    let noise = ReadingNoise::clean(sensor_noise);
    let nodes = site.db.nodes();
    (0..count)
        .map(|_| {
            let node = &nodes[rng.random_range(0..nodes.len())];
            (node.id, ccs_to_gcs(&sample_reading(&site.field, node, &noise, &mut rng)))
        })
        .collect()
}

/// Outlier score of a single reading: normalized distance to the nearest
/// signature.
pub fn reading_score(db: &FingerprintDb, m: &Vector3<f64>) -> f64 {
    db.signatures
        .iter()
        .map(|s| (m - s.mean).norm() / s.dispersion)
        .fold(f64::INFINITY, f64::min)
}

/// Precision-weighted mean of readings whose noise variances are scaled by
/// `scales` (γ for gated readings, 1 otherwise).
pub fn fuse_readings(readings: &[Vector3<f64>], scales: &[f64]) -> Result<Vector3<f64>> {
    if readings.is_empty() {
        return Err(Error::Empty("readings"));
    }
    if readings.len() != scales.len() {
        return Err(Error::Dimension("one scale per reading required".into()));
    }
    let mut acc = Vector3::zeros();
    let mut total = 0.0;
    for (m, s) in readings.iter().zip(scales) {
        acc += m / *s;
        total += 1.0 / s;
    }
    Ok(acc / total)
}

/// Online matching trial with contaminated readings.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingConfig {
    pub site: SiteConfig,
    /// Readings fused per query.
    pub readings_per_query: usize,
    /// Queries per node.
    pub queries_per_node: usize,
    pub contamination: f64,
    pub outlier_sigma: f64,
    pub cod: CodConfig,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            site: SiteConfig::default(),
            readings_per_query: 5,
            queries_per_node: 4,
            contamination: 0.1,
            outlier_sigma: 10.0,
            cod: CodConfig::default(),
        }
    }
}

/// Accuracy and error of one matching trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchScore {
    /// Fraction of queries matched to the true node.
    pub accuracy: f64,
    /// Mean distance between matched and true node, meters.
    pub mean_error_m: f64,
}

/// Same queries matched without and with reading-level outlier gating.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchComparison {
    pub ungated: MatchScore,
    pub gated: MatchScore,
    /// Fraction of readings the gate flagged.
    pub flag_rate: f64,
}

/// Surveys a site, then matches contaminated queries at every node twice:
/// with a plain mean of the readings and with COD-gated readings
/// down-weighted by γ. The gate's window is primed with scores of clean
/// survey readings.
pub fn matching_trial(cfg: &MatchingConfig, seed: u64) -> Result<MatchComparison> {
    if cfg.readings_per_query == 0 || cfg.queries_per_node == 0 {
        return Err(Error::InvalidParameter("readings and queries per node must be >= 1".into()));
    }
    let site = survey_site(&cfg.site, seed)?;
    let db = &site.db;
    let mut rng = rng::stream(seed.wrapping_add(0x9e37_79b9), Stream::Fingerprint);

    let clean = ReadingNoise::clean(cfg.site.sensor_noise);
    let mut gate = CodGate::new(&cfg.cod)?;
    let nodes = db.nodes().to_vec();
    let mut primer = Vec::with_capacity(cfg.cod.window);
    while primer.len() < cfg.cod.window {
        let node = &nodes[primer.len() % nodes.len()];
        primer.push(reading_score(db, &ccs_to_gcs(&sample_reading(&site.field, node, &clean, &mut rng))));
    }
    gate.prime(primer);

    let noisy = ReadingNoise::contaminated(cfg.site.sensor_noise, cfg.contamination, cfg.outlier_sigma)?;
    let (mut hits, mut err) = ([0usize; 2], [0.0f64; 2]);
    let (mut flags, mut readings_seen) = (0usize, 0usize);
    let mut queries = 0usize;
    for _ in 0..cfg.queries_per_node {
        for node in &nodes {
            let readings: Vec<Vector3<f64>> = (0..cfg.readings_per_query)
                .map(|_| ccs_to_gcs(&sample_reading(&site.field, node, &noisy, &mut rng)))
                .collect();
            let scales: Vec<f64> = readings
                .iter()
                .map(|m| gate.decide(reading_score(db, m)).1)
                .collect();
            flags += scales.iter().filter(|&&s| s > 1.0).count();
            readings_seen += readings.len();
            let plain = fuse_readings(&readings, &vec![1.0; readings.len()])?;
            let gated = fuse_readings(&readings, &scales)?;
            for (i, q) in [plain, gated].iter().enumerate() {
                let matched = argmax(&match_probabilities(db, q)?);
                hits[i] += usize::from(matched == node.id);
                err[i] += nodes[matched].distance(node);
            }
            queries += 1;
        }
    }
    let score = |i: usize| MatchScore {
        accuracy: hits[i] as f64 / queries as f64,
        mean_error_m: err[i] / queries as f64,
    };
    Ok(MatchComparison {
        ungated: score(0),
        gated: score(1),
        flag_rate: flags as f64 / readings_seen as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn close(a: &Vector3<f64>, b: &Vector3<f64>, tol: f64) -> bool {
        (a - b).amax() < tol
    }

    #[test]
    fn axis_examples() {
        let m = Vector3::new(1.0, 2.0, 3.0);
        let s = |roll, pitch, yaw, m| MagSample { m_ccs: m, roll, pitch, yaw };
        assert_eq!(ccs_to_gcs(&s(0.0, 0.0, 0.0, m)), m);
        assert!(close(
            &ccs_to_gcs(&s(0.0, 0.0, FRAC_PI_2, Vector3::x())),
            &Vector3::y(),
            1e-15
        ));
        assert!(close(&ccs_to_gcs(&s(PI, 0.0, 0.0, m)), &Vector3::new(1.0, -2.0, -3.0), 1e-15));
        assert!(close(
            &ccs_to_gcs(&s(0.0, FRAC_PI_2, 0.0, Vector3::z())),
            &Vector3::x(),
            1e-15
        ));
    }

    #[test]
    fn inverse_round_trip() {
        let m = Vector3::new(20.0, -3.0, 41.0);
        let s = gcs_to_ccs(&m, 0.4, -1.1, 2.7);
        assert!(close(&ccs_to_gcs(&s), &m, 1e-12));
        assert!((s.m_ccs.norm() - m.norm()).abs() < 1e-12);
    }

    #[test]
    fn grid_layout() {
        let g = grid(3, 2, 3.0);
        assert_eq!(g.len(), 6);
        assert_eq!((g[4].id, g[4].x, g[4].y), (4, 3.0, 3.0));
        assert_eq!(g[0].distance(&g[5]), 45f64.sqrt());
    }

    fn db2(a: Vector3<f64>, b: Vector3<f64>, sigma: f64) -> FingerprintDb {
        FingerprintDb::new(
            grid(2, 1, 3.0),
            vec![
                Signature { mean: a, dispersion: sigma },
                Signature { mean: b, dispersion: sigma },
            ],
        )
        .unwrap()
    }

    #[test]
    fn probability_examples() {
        let db = db2(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), 0.5);
        let p = match_probabilities(&db, &Vector3::zeros()).unwrap();
        assert!(p[0] > p[1]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let same = db2(Vector3::new(1.0, 1.0, 1.0), Vector3::new(1.0, 1.0, 1.0), 2.0);
        assert_eq!(match_probabilities(&same, &Vector3::zeros()).unwrap(), vec![0.5, 0.5]);

        // Signatures at distance d and 2d from the query.
        let (d, sigma) = (0.7, 0.9);
        let db = db2(Vector3::new(d, 0.0, 0.0), Vector3::new(0.0, 2.0 * d, 0.0), sigma);
        let p = match_probabilities(&db, &Vector3::zeros()).unwrap();
        let expected = ((4.0 * d * d - d * d) / (2.0 * sigma * sigma)).exp();
        assert!((p[0] / p[1] - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn database_validation() {
        let sig = Signature { mean: Vector3::zeros(), dispersion: 1.0 };
        assert!(FingerprintDb::new(grid(1, 1, 3.0), vec![sig]).is_err());
        let dup = vec![GridNode { id: 0, x: 0.0, y: 0.0 }, GridNode { id: 1, x: 0.0, y: 0.0 }];
        assert!(FingerprintDb::new(dup, vec![sig, sig]).is_err());
        let bad = Signature { mean: Vector3::zeros(), dispersion: 0.0 };
        assert!(FingerprintDb::new(grid(2, 1, 3.0), vec![sig, bad]).is_err());
    }

    #[test]
    fn signatures_from_samples() {
        let samples = vec![
            (0, Vector3::new(1.0, 0.0, 0.0)),
            (0, Vector3::new(3.0, 0.0, 0.0)),
            (1, Vector3::new(5.0, 5.0, 5.0)),
            (1, Vector3::new(5.0, 5.0, 5.0)),
        ];
        let db = FingerprintDb::from_samples(grid(2, 1, 3.0), &samples).unwrap();
        assert_eq!(db.signatures()[0].mean, Vector3::new(2.0, 0.0, 0.0));
        // Squared deviations 1 + 1 over 3 axes and n − 1 = 1.
        assert!((db.signatures()[0].dispersion - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(db.signatures()[1].dispersion, MIN_DISPERSION);
    }

    #[test]
    fn csv_round_trip() {
        let site = survey_site(&SiteConfig::default(), 3).unwrap();
        let mut buf = Vec::new();
        site.db.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("node_id,x_m,y_m,sig_x,sig_y,sig_z,dispersion\n"));
        assert_eq!(text.lines().count(), 17);
        assert_eq!(FingerprintDb::read_csv(buf.as_slice()).unwrap(), site.db);
        let commented = format!("# seed = 3\n{text}");
        assert_eq!(FingerprintDb::read_csv(commented.as_bytes()).unwrap(), site.db);
        let short = "node_id,x_m,y_m,sig_x,sig_y,sig_z,dispersion\n0,0,0,1,2,3,1\n1,3,0,1,2\n";
        assert!(matches!(FingerprintDb::read_csv(short.as_bytes()), Err(Error::Csv(_))));
        let typed = "node_id,x_m,y_m,sig_x,sig_y,sig_z,dispersion\n0,0,0,1,2,3,1\n1,3,0,1,2,x,1\n";
        assert!(matches!(FingerprintDb::read_csv(typed.as_bytes()), Err(Error::Csv(_))));
    }

    #[test]
    fn empty_calibration_gives_every_node() {
        let site = survey_site(&SiteConfig::default(), 1).unwrap();
        let loc = localize(&site.db, &Vector3::zeros(), &[], 0.05).unwrap();
        assert!(loc.uncalibrated);
        assert_eq!(loc.set.len(), 16);
        // alpha so small that the rank exceeds n
        let loc = localize(&site.db, &Vector3::zeros(), &site.calibration, 1e-6).unwrap();
        assert!(!loc.uncalibrated);
        assert_eq!(loc.set.len(), 16);
    }

    #[test]
    fn separable_sites_give_singleton_sets() {
        let cfg = SiteConfig {
            field_amplitude: 40.0,
            sensor_noise: 0.05,
            ..SiteConfig::default()
        };
        let site = survey_site(&cfg, 8).unwrap();
        let mut rng = rng::stream(99, Stream::Fingerprint);
        let noise = ReadingNoise::clean(cfg.sensor_noise);
        let (mut covered, mut size) = (0, 0);
        let n = 400;
        for i in 0..n {
            let node = &site.db.nodes()[i % 16];
            let q = ccs_to_gcs(&sample_reading(&site.field, node, &noise, &mut rng));
            let loc = localize(&site.db, &q, &site.calibration, 0.05).unwrap();
            covered += usize::from(loc.set.contains(&node.id));
            size += loc.set.len();
        }
        assert!(covered as f64 / n as f64 >= 0.95);
        assert!((size as f64 / n as f64 - 1.0).abs() < 0.05);
    }

    #[test]
    fn fusion_weights() {
        let r = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(10.0, 0.0, 0.0)];
        assert_eq!(fuse_readings(&r, &[1.0, 1.0]).unwrap(), Vector3::new(5.0, 0.0, 0.0));
        let g = fuse_readings(&r, &[1.0, 9.0]).unwrap();
        assert!((g.x - 1.0).abs() < 1e-12);
        assert!(fuse_readings(&[], &[]).is_err());
    }

    #[test]
    fn trial_is_deterministic() {
        let cfg = MatchingConfig::default();
        assert_eq!(matching_trial(&cfg, 5).unwrap(), matching_trial(&cfg, 5).unwrap());
    }
}
