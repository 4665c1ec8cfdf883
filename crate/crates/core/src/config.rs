//! Pipeline configuration: a TOML file, validated before any data is read.
//! Command-line overrides take precedence over file values, which take
//! precedence over defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conservation::{ConservationError, ConservationKind, ConservationSpec, EvaluationMode, ReferencePolicy};
use crate::frame::ScanGeometry;
use crate::propagation::{CombineMode, PropagationError, TypeBModel, TypeBSpec};
use crate::safety::{RiskModel, SafetyError, SafetyLimit};
use crate::stats;

pub const DEFAULT_WINDOW_SIZE: usize = 10;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Conservation(#[from] ConservationError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
    pub confidence: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: stats::DEFAULT_RESAMPLES,
            seed: 0,
            confidence: stats::DEFAULT_CONFIDENCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypothesisConfig {
    pub alpha: f64,
    pub permutations: usize,
    pub covariates: Vec<String>,
}

impl Default for HypothesisConfig {
    fn default() -> Self {
        Self {
            alpha: stats::DEFAULT_ALPHA,
            permutations: stats::DEFAULT_PERMUTATIONS,
            covariates: Vec::new(),
        }
    }
}

/// A registry entry: a Type B model plus where and how it enters the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeBEntry {
    pub source_id: String,
    pub model: TypeBModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_range: Option<(f64, f64)>,
    /// Defaults to the pipeline's `operating_range`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operating_point: Option<f64>,
    #[serde(default = "unit")]
    pub sensitivity: f64,
}

fn unit() -> f64 {
    1.0
}

impl TypeBEntry {
    pub fn spec(&self) -> TypeBSpec {
        TypeBSpec {
            source_id: self.source_id.clone(),
            model: self.model,
            valid_range: self.valid_range,
        }
    }
}

/// How a joint-pair uncertainty is attributed to a single joint position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairAttribution {
    /// `u_joint = u_pair / sqrt(2)`
    #[default]
    EqualSplit,
    /// Use the pair uncertainty as is.
    Whole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawSpec {
    id: String,
    #[serde(flatten)]
    kind: ConservationKind,
    #[serde(default)]
    reference_policy: Option<ReferencePolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "default_window_size")]
    window_size: usize,
    #[serde(default)]
    reference_policy: ReferencePolicy,
    #[serde(default)]
    mode: EvaluationMode,
    #[serde(default)]
    propagation_mode: CombineMode,
    #[serde(default)]
    operating_range: Option<f64>,
    #[serde(default)]
    scan_geometry: Option<ScanGeometry>,
    #[serde(default)]
    pair_attribution: PairAttribution,
    #[serde(default = "default_workers")]
    workers: usize,
    #[serde(default)]
    bootstrap: BootstrapConfig,
    #[serde(default)]
    hypothesis: HypothesisConfig,
    #[serde(default)]
    conservation: Vec<RawSpec>,
    #[serde(default)]
    type_b: Vec<TypeBEntry>,
    #[serde(default)]
    risk: Option<RiskModel>,
    #[serde(default = "SafetyLimit::iso_13849")]
    safety: SafetyLimit,
}

fn default_window_size() -> usize {
    DEFAULT_WINDOW_SIZE
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub window_size: usize,
    pub mode: EvaluationMode,
    pub propagation_mode: CombineMode,
    /// Meters; turns absolute uncertainties into relative ones.
    pub operating_range: Option<f64>,
    pub scan_geometry: Option<ScanGeometry>,
    pub pair_attribution: PairAttribution,
    /// Windows analysed concurrently. Reports are still emitted in order.
    pub workers: usize,
    pub bootstrap: BootstrapConfig,
    pub hypothesis: HypothesisConfig,
    pub conservation: Vec<ConservationSpec>,
    pub type_b: Vec<TypeBEntry>,
    pub risk: Option<RiskModel>,
    pub safety: SafetyLimit,
}

impl PipelineConfig {
    /// A configuration with defaults for everything but the specs.
    pub fn new(conservation: Vec<ConservationSpec>) -> Self {
        Self {
            window_size: DEFAULT_WINDOW_SIZE,
            mode: EvaluationMode::Conservation,
            propagation_mode: CombineMode::AsPrinted,
            operating_range: None,
            scan_geometry: None,
            pair_attribution: PairAttribution::EqualSplit,
            workers: 1,
            bootstrap: BootstrapConfig::default(),
            hypothesis: HypothesisConfig::default(),
            conservation,
            type_b: Vec::new(),
            risk: None,
            safety: SafetyLimit::iso_13849(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text)?;
        let conservation = raw
            .conservation
            .into_iter()
            .map(|s| ConservationSpec {
                id: s.id,
                kind: s.kind,
                reference_policy: s.reference_policy.unwrap_or(raw.reference_policy),
            })
            .collect();
        Ok(Self {
            window_size: raw.window_size,
            mode: raw.mode,
            propagation_mode: raw.propagation_mode,
            operating_range: raw.operating_range,
            scan_geometry: raw.scan_geometry,
            pair_attribution: raw.pair_attribution,
            workers: raw.workers,
            bootstrap: raw.bootstrap,
            hypothesis: raw.hypothesis,
            conservation,
            type_b: raw.type_b,
            risk: raw.risk,
            safety: raw.safety,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        let raw = RawConfig {
            window_size: self.window_size,
            reference_policy: ReferencePolicy::default(),
            mode: self.mode,
            propagation_mode: self.propagation_mode,
            operating_range: self.operating_range,
            scan_geometry: self.scan_geometry,
            pair_attribution: self.pair_attribution,
            workers: self.workers,
            bootstrap: self.bootstrap.clone(),
            hypothesis: self.hypothesis.clone(),
            conservation: self
                .conservation
                .iter()
                .map(|s| RawSpec {
                    id: s.id.clone(),
                    kind: s.kind.clone(),
                    reference_policy: Some(s.reference_policy),
                })
                .collect(),
            type_b: self.type_b.clone(),
            risk: self.risk,
            safety: self.safety.clone(),
        };
        toml::to_string(&raw).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.window_size < 2 {
            return invalid(format!("window_size must be at least 2, got {}", self.window_size));
        }
        if self.bootstrap.resamples < 1 {
            return invalid("bootstrap.resamples must be at least 1".into());
        }
        let c = self.bootstrap.confidence;
        if !(c > 0.0 && c < 1.0) {
            return invalid(format!("bootstrap.confidence must lie in (0, 1), got {c}"));
        }
        let a = self.hypothesis.alpha;
        if !(a > 0.0 && a < 1.0) {
            return invalid(format!("hypothesis.alpha must lie in (0, 1), got {a}"));
        }
        if self.hypothesis.permutations < 1 {
            return invalid("hypothesis.permutations must be at least 1".into());
        }
        if self.workers < 1 {
            return invalid("workers must be at least 1".into());
        }
        if let Some(r) = self.operating_range {
            if !(r > 0.0 && r.is_finite()) {
                return invalid(format!("operating_range must be positive, got {r}"));
            }
        }
        if let Some(g) = self.scan_geometry {
            if !(g.angle_step > 0.0 && g.field_of_view > 0.0) {
                return invalid("scan_geometry needs positive field_of_view and angle_step".into());
            }
        }
        if self.conservation.is_empty() {
            return invalid("at least one [[conservation]] spec is required".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for spec in &self.conservation {
            spec.validate()?;
            if !ids.insert(spec.id.as_str()) {
                return invalid(format!("duplicate conservation id '{}'", spec.id));
            }
        }
        let kinds: std::collections::BTreeSet<_> =
            self.conservation.iter().map(|s| s.payload_kind().to_string()).collect();
        if kinds.len() > 1 {
            return invalid("all conservation specs must apply to the same frame kind".into());
        }
        for entry in &self.type_b {
            entry.spec().validate()?;
            if !(entry.sensitivity >= 0.0 && entry.sensitivity.is_finite()) {
                return invalid(format!("type_b '{}': sensitivity must be non-negative", entry.source_id));
            }
            let needs_point = !matches!(entry.model, TypeBModel::ConstantAbsolute { .. });
            if needs_point && entry.operating_point.or(self.operating_range).is_none() {
                return invalid(format!(
                    "type_b '{}' needs an operating_point (or a pipeline operating_range)",
                    entry.source_id
                ));
            }
        }
        if let Some(risk) = &self.risk {
            risk.validate()?;
        }
        self.safety.validate()?;
        Ok(())
    }
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub window_size: Option<usize>,
    pub confidence: Option<f64>,
    pub mode: Option<EvaluationMode>,
    pub propagation: Option<CombineMode>,
    pub workers: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, config: &mut PipelineConfig) {
        if let Some(s) = self.seed {
            config.bootstrap.seed = s;
        }
        if let Some(w) = self.window_size {
            config.window_size = w;
        }
        if let Some(c) = self.confidence {
            config.bootstrap.confidence = c;
        }
        if let Some(m) = self.mode {
            config.mode = m;
        }
        if let Some(p) = self.propagation {
            config.propagation_mode = p;
        }
        if let Some(w) = self.workers {
            config.workers = w;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
window_size = 10
operating_range = 4.0
reference_policy = "ground-truth"

[bootstrap]
resamples = 500
seed = 7

[hypothesis]
covariates = ["velocity"]

[[conservation]]
id = "neck-hip"
kind = "joint-pair-distance"
pairs = [[1, 8]]
reference = [0.52]

[[conservation]]
id = "upper-arm"
kind = "joint-pair-distance"
pairs = [[2, 3], [5, 6]]
reference_policy = "window-mean"

[[type_b]]
source_id = "kinect"
model = { kind = "linear-in-range", slope = 8e-4, intercept = -1e-4 }
operating_point = 2.0

[risk]
l_bio = 1.0
"#;

    #[test]
    fn parses_sample() {
        let c = PipelineConfig::from_toml_str(SAMPLE).unwrap();
        c.validate().unwrap();
        assert_eq!(c.conservation.len(), 2);
        assert_eq!(c.conservation[0].reference_policy, ReferencePolicy::GroundTruth);
        assert_eq!(c.conservation[1].reference_policy, ReferencePolicy::WindowMean);
        assert_eq!(c.bootstrap.confidence, 0.95);
        assert_eq!(c.bootstrap.resamples, 500);
        assert_eq!(c.hypothesis.permutations, 2000);
        assert_eq!(c.safety.lambda, 1e-6);
        assert_eq!(c.type_b[0].sensitivity, 1.0);
    }

    #[test]
    fn roundtrips_through_toml() {
        let c = PipelineConfig::from_toml_str(SAMPLE).unwrap();
        let again = PipelineConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = PipelineConfig::from_toml_str(SAMPLE).unwrap();
        c.window_size = 1;
        assert!(c.validate().is_err());

        let mut c = PipelineConfig::from_toml_str(SAMPLE).unwrap();
        c.bootstrap.confidence = 1.0;
        assert!(c.validate().is_err());

        let mut c = PipelineConfig::from_toml_str(SAMPLE).unwrap();
        c.safety.lambda = 0.0;
        assert!(c.validate().is_err());

        let mut c = PipelineConfig::from_toml_str(SAMPLE).unwrap();
        c.type_b[0].operating_point = None;
        c.operating_range = None;
        assert!(c.validate().is_err());

        assert!(PipelineConfig::from_toml_str("bogus_key = 1").is_err());
        assert!(PipelineConfig::from_toml_str("[risk]\nseverity_constant = 2.0\n").is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let mut c = PipelineConfig::from_toml_str(SAMPLE).unwrap();
        Overrides {
            seed: Some(99),
            window_size: Some(20),
            confidence: Some(0.99),
            mode: Some(EvaluationMode::Baseline),
            propagation: Some(CombineMode::GumSquared),
            workers: None,
        }
        .apply(&mut c);
        assert_eq!(c.bootstrap.seed, 99);
        assert_eq!(c.window_size, 20);
        assert_eq!(c.bootstrap.confidence, 0.99);
        assert_eq!(c.mode, EvaluationMode::Baseline);
        assert_eq!(c.propagation_mode, CombineMode::GumSquared);
        assert_eq!(c.bootstrap.resamples, 500);
    }
}
