//! TOML run configuration shared by every command.
//!
//! Every section and key is optional; missing ones take their defaults.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bench::{ExperimentSpec, ModelSetup, Variant};
use crate::conformal::CodConfig;
use crate::error::{Error, Result};
use crate::filters::{FilterConfig, FilterKind, HuberDelta};
use crate::fingerprint::{MatchingConfig, SiteConfig};
use crate::model::{simulate, NoiseCase, NoiseRegime, Trajectory};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSetup,
    pub regime: NoiseRegime,
    pub filter: FilterConfig,
    pub cod: CodConfig,
    pub bench: BenchSection,
    pub fingerprint: FingerprintSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            model: ModelSetup::default(),
            regime: NoiseRegime::default(),
            filter: FilterConfig::default(),
            cod: CodConfig::default(),
            bench: BenchSection::default(),
            fingerprint: FingerprintSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub runs: usize,
    /// Regimes to run; `regime.case` is replaced by each entry in turn.
    pub cases: Vec<NoiseCase>,
    pub filters: Vec<FilterKind>,
    /// COD settings to run every filter with.
    pub cod: Vec<bool>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            runs: 100,
            cases: vec![NoiseCase::A, NoiseCase::B, NoiseCase::C, NoiseCase::D],
            filters: FilterKind::ALL.to_vec(),
            cod: vec![false, true],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FingerprintSection {
    /// Miscoverage level of the prediction sets.
    pub alpha: f64,
    /// Held-out queries matched by `fingerprint match`.
    pub queries: usize,
    /// Database path; defaults to `fingerprint_db.csv` in the output
    /// directory.
    pub db: Option<PathBuf>,
    /// Calibration score path; defaults to `fingerprint_calibration.csv` in
    /// the output directory.
    pub calibration: Option<PathBuf>,
    pub site: SiteConfig,
    pub matching: MatchingSection,
}

impl Default for FingerprintSection {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            queries: 1000,
            db: None,
            calibration: None,
            site: SiteConfig::default(),
            matching: MatchingSection::default(),
        }
    }
}

/// Contaminated online queries used to compare matching with and without
/// outlier gating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingSection {
    pub readings_per_query: usize,
    pub queries_per_node: usize,
    pub contamination: f64,
    pub outlier_sigma: f64,
}

impl Default for MatchingSection {
    fn default() -> Self {
        let m = MatchingConfig::default();
        Self {
            readings_per_query: m.readings_per_query,
            queries_per_node: m.queries_per_node,
            contamination: m.contamination,
            outlier_sigma: m.outlier_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl RunConfig {
    /// Parses and validates a configuration.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.regime.validate()?;
        self.filter.validate()?;
        self.cod.validate()?;
        self.fingerprint.site.validate()?;
        if self.bench.runs == 0 {
            return Err(Error::Config("bench.runs must be >= 1".into()));
        }
        for (name, empty) in [
            ("bench.cases", self.bench.cases.is_empty()),
            ("bench.filters", self.bench.filters.is_empty()),
            ("bench.cod", self.bench.cod.is_empty()),
        ] {
            if empty {
                return Err(Error::Config(format!("{name} must not be empty")));
            }
        }
        let f = &self.fingerprint;
        if !(f.alpha > 0.0 && f.alpha < 1.0) {
            return Err(Error::Config(format!("fingerprint.alpha must lie in (0, 1), got {}", f.alpha)));
        }
        if f.queries == 0 || f.matching.readings_per_query == 0 || f.matching.queries_per_node == 0 {
            return Err(Error::Config(
                "fingerprint.queries, readings_per_query and queries_per_node must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn db_path(&self) -> PathBuf {
        self.fingerprint
            .db
            .clone()
            .unwrap_or_else(|| self.output.dir.join("fingerprint_db.csv"))
    }

    pub fn calibration_path(&self) -> PathBuf {
        self.fingerprint
            .calibration
            .clone()
            .unwrap_or_else(|| self.output.dir.join("fingerprint_calibration.csv"))
    }

    /// The configuration with every automatic value replaced by the value
    /// actually used.
    pub fn resolved(&self) -> Self {
        let mut r = self.clone();
        r.filter.kappa = Some(self.filter.kappa_for(1));
        if r.filter.huber_delta == HuberDelta::Auto {
            r.filter.huber_delta = HuberDelta::Fixed(crate::filters::resolve_delta(HuberDelta::Auto));
        }
        r.fingerprint.db = Some(self.db_path());
        r.fingerprint.calibration = Some(self.calibration_path());
        r
    }

    /// Resolved configuration as `# `-prefixed TOML lines.
    pub fn metadata_header(&self) -> String {
        let body = toml::to_string(&self.resolved()).expect("configuration serializes to TOML");
        let mut out = format!("# robustloc {}\n", env!("CARGO_PKG_VERSION"));
        for line in body.lines() {
            if line.is_empty() {
                out.push_str("#\n");
            } else {
                out.push_str("# ");
                out.push_str(line);
                out.push('\n');
            }
        }
        out
    }

    /// Trajectory of `regime.steps` steps from the configured model.
    pub fn trajectory(&self) -> Result<Trajectory> {
        let model = self.model.ungm()?;
        let x0 = DVector::from_element(1, self.model.x0);
        simulate(&model, &self.regime, self.regime.steps, &x0, self.seed)
    }

    /// Experiment for one regime of the bench section.
    pub fn experiment(&self, case: NoiseCase) -> ExperimentSpec {
        let variants = self
            .bench
            .filters
            .iter()
            .flat_map(|&filter| self.bench.cod.iter().map(move |&cod| Variant { filter, cod }))
            .collect();
        ExperimentSpec {
            regime: NoiseRegime {
                case,
                ..self.regime.clone()
            },
            variants,
            runs: self.bench.runs,
            base_seed: self.seed,
            model: self.model.clone(),
            filter: self.filter.clone(),
            cod: self.cod,
        }
    }

    pub fn matching(&self) -> MatchingConfig {
        let m = &self.fingerprint.matching;
        MatchingConfig {
            site: self.fingerprint.site.clone(),
            readings_per_query: m.readings_per_query,
            queries_per_node: m.queries_per_node,
            contamination: m.contamination,
            outlier_sigma: m.outlier_sigma,
            cod: self.cod,
        }
    }
}
