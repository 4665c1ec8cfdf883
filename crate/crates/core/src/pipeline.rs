//! Window evaluation: deviations, bootstrap, dependency test, propagation and
//! the safety verdict, one report per window.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, PairAttribution, PipelineConfig};
use crate::conservation::{self, ConservationKind, DeviationSeries, EvaluationMode, Referencing};
use crate::frame::MeasurementFrame;
use crate::ingest::{Window, Windower};
use crate::propagation::{self, CombineMode, SensitivityTerm, UncertaintyKind};
use crate::rng::{derive_seed, tag};
use crate::safety::{self, SafetyVerdict};
use crate::stats::{self, BootstrapResult, DependencyReport, HypothesisResult, UncertaintyEstimate};

pub const SCHEMA_VERSION: u32 = 1;

/// Identifier used for the aggregate over all specs.
pub const POOLED_ID: &str = "pooled";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecReport {
    pub spec_id: String,
    pub referencing: Referencing,
    pub n: usize,
    pub estimate: UncertaintyEstimate,
    /// Mean signed deviation and its bootstrap interval. Zero by construction
    /// for self-referenced series.
    pub signed_mean: f64,
    pub signed_interval: (f64, f64),
    pub standard_error: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisEntry {
    pub spec_id: String,
    #[serde(flatten)]
    pub result: HypothesisResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyEntry {
    pub spec_id: String,
    #[serde(flatten)]
    pub report: DependencyReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationBreakdown {
    pub terms: Vec<SensitivityTerm>,
    pub mode: CombineMode,
    pub u_combined: f64,
    /// The other combination rule, reported alongside and never used for the
    /// verdict.
    pub alternative_mode: CombineMode,
    pub u_alternative: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowError {
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub schema_version: u32,
    pub window_id: u64,
    pub t_start: f64,
    pub t_end: f64,
    pub frames: usize,
    pub mode: EvaluationMode,
    pub specs: Vec<SpecReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooled: Option<UncertaintyEstimate>,
    pub hypotheses: Vec<HypothesisEntry>,
    pub dependencies: Vec<DependencyEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propagation: Option<PropagationBreakdown>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<SafetyVerdict>,
    pub errors: Vec<WindowError>,
    /// Bootstrap distributions per spec, kept for plot data. Not serialized.
    #[serde(skip)]
    pub bootstraps: Vec<(String, BootstrapResult)>,
}

impl WindowReport {
    /// `None` when no safety check was configured.
    pub fn passed(&self) -> Option<bool> {
        self.verdict.as_ref().map(|v| v.pass)
    }

    fn error(&mut self, stage: &str, spec_id: Option<&str>, message: impl ToString) {
        let message = message.to_string();
        log::warn!(
            "window {} {stage}{}: {message}",
            self.window_id,
            spec_id.map(|s| format!(" [{s}]")).unwrap_or_default()
        );
        self.errors.push(WindowError {
            stage: stage.into(),
            spec_id: spec_id.map(str::to_string),
            message,
        });
    }
}

/// Evaluates one window. Never fails: problems are recorded in `errors`.
pub fn analyze_window(config: &PipelineConfig, window: &Window) -> WindowReport {
    let frames = &window.frames;
    let mut report = WindowReport {
        schema_version: SCHEMA_VERSION,
        window_id: window.id,
        t_start: frames.first().map_or(0.0, |f| f.timestamp),
        t_end: frames.last().map_or(0.0, |f| f.timestamp),
        frames: frames.len(),
        mode: config.mode,
        specs: Vec::new(),
        pooled: None,
        hypotheses: Vec::new(),
        dependencies: Vec::new(),
        propagation: None,
        verdict: None,
        errors: Vec::new(),
        bootstraps: Vec::new(),
    };
    let master = config.bootstrap.seed;
    let confidence = config.bootstrap.confidence;
    let mut series_all: Vec<DeviationSeries> = Vec::new();

    for (s, spec) in config.conservation.iter().enumerate() {
        let series = match conservation::deviation_series(
            frames,
            spec,
            window.id,
            &config.hypothesis.covariates,
            config.mode,
        ) {
            Ok(v) => v,
            Err(e) => {
                report.error("conservation", Some(&spec.id), e);
                continue;
            }
        };
        let (series, referencing) = series;
        let seed = derive_seed(master, &[window.id, tag::BOOTSTRAP, s as u64]);
        let boot = match stats::bootstrap(&series, config.bootstrap.resamples, seed) {
            Ok(b) => b,
            Err(e) => {
                report.error("bootstrap", Some(&spec.id), e);
                continue;
            }
        };
        let estimate = match stats::uncertainty_at(&boot, confidence, config.operating_range) {
            Ok(e) => e.labelled(&spec.id, window.id),
            Err(e) => {
                report.error("bootstrap", Some(&spec.id), e);
                continue;
            }
        };

        if config.mode == EvaluationMode::Conservation {
            for (c, covariate) in config.hypothesis.covariates.iter().enumerate() {
                if !series.covariates.contains_key(covariate) {
                    report.error(
                        "hypothesis",
                        Some(&spec.id),
                        format!("covariate '{covariate}' not available in this window"),
                    );
                    continue;
                }
                let hseed = derive_seed(master, &[window.id, tag::HYPOTHESIS, s as u64, c as u64]);
                match stats::test_dependency(
                    &series,
                    covariate,
                    config.hypothesis.alpha,
                    config.hypothesis.permutations,
                    hseed,
                ) {
                    Ok(h) => {
                        if h.rejected {
                            match stats::dependency_report(&series, covariate) {
                                Ok(d) => report.dependencies.push(DependencyEntry {
                                    spec_id: spec.id.clone(),
                                    report: d,
                                }),
                                Err(e) => report.error("hypothesis", Some(&spec.id), e),
                            }
                        }
                        report.hypotheses.push(HypothesisEntry {
                            spec_id: spec.id.clone(),
                            result: h,
                        });
                    }
                    Err(e) => report.error("hypothesis", Some(&spec.id), e),
                }
            }
        }

        report.specs.push(SpecReport {
            spec_id: spec.id.clone(),
            referencing,
            n: series.len(),
            signed_mean: boot.signed_point_estimate,
            signed_interval: boot.signed_interval(confidence),
            standard_error: boot.standard_error,
            seed,
            estimate,
        });
        report.bootstraps.push((spec.id.clone(), boot));
        series_all.push(series);
    }

    report.pooled = match series_all.len() {
        0 => None,
        1 => Some(report.specs[0].estimate.clone().labelled(POOLED_ID, window.id)),
        _ => {
            let values: Vec<f64> = series_all.iter().flat_map(|s| s.values.iter().copied()).collect();
            let seed = derive_seed(master, &[window.id, tag::POOLED]);
            match stats::bootstrap_values(&values, config.bootstrap.resamples, seed)
                .and_then(|b| stats::uncertainty_at(&b, confidence, config.operating_range))
            {
                Ok(e) => Some(e.labelled(POOLED_ID, window.id)),
                Err(e) => {
                    report.error("bootstrap", Some(POOLED_ID), e);
                    None
                }
            }
        }
    };

    if let Some(pooled) = report.pooled.clone() {
        match propagate(config, pooled.u) {
            Ok(p) => report.propagation = Some(p),
            Err(e) => report.error("propagation", None, e),
        }
    }

    if let (Some(risk), Some(p)) = (&config.risk, &report.propagation) {
        let verdict = match p.relative {
            Some(rel) => safety::map_to_pfh(rel).and_then(|_| safety::check_limit(rel, risk, &config.safety)),
            None => safety::check_limit(p.u_combined, risk, &config.safety),
        };
        match verdict {
            Ok(v) => report.verdict = Some(v),
            Err(e) => report.error("safety", None, e),
        }
    }
    report
}

fn all_joint_pairs(config: &PipelineConfig) -> bool {
    config
        .conservation
        .iter()
        .all(|s| matches!(s.kind, ConservationKind::JointPairDistance { .. }))
}

fn propagate(config: &PipelineConfig, u_type_a: f64) -> Result<PropagationBreakdown, String> {
    let u_a = if all_joint_pairs(config) && config.pair_attribution == PairAttribution::EqualSplit {
        propagation::per_joint_from_pair(u_type_a)
    } else {
        u_type_a
    };
    let mut terms = vec![SensitivityTerm::new("type-a", 1.0, u_a, UncertaintyKind::TypeA)];
    for entry in &config.type_b {
        let point = entry.operating_point.or(config.operating_range).unwrap_or(0.0);
        let value = propagation::type_b_eval(&entry.spec(), point).map_err(|e| e.to_string())?;
        terms.push(SensitivityTerm::new(
            entry.source_id.clone(),
            entry.sensitivity,
            value.u,
            UncertaintyKind::TypeB,
        ));
    }
    let alternative_mode = match config.propagation_mode {
        CombineMode::AsPrinted => CombineMode::GumSquared,
        CombineMode::GumSquared => CombineMode::AsPrinted,
    };
    let u_combined = propagation::combine(&terms, config.propagation_mode).map_err(|e| e.to_string())?;
    let u_alternative = propagation::combine(&terms, alternative_mode).map_err(|e| e.to_string())?;
    Ok(PropagationBreakdown {
        terms,
        mode: config.propagation_mode,
        u_combined,
        alternative_mode,
        u_alternative,
        relative: config.operating_range.map(|r| u_combined / r),
    })
}

/// Online evaluation: push frames, receive a report whenever a window closes.
pub struct Pipeline {
    config: PipelineConfig,
    windower: Windower,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let windower = Windower::new(config.window_size);
        Ok(Self { config, windower })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn push(&mut self, frame: MeasurementFrame) -> Option<WindowReport> {
        self.windower
            .push(frame)
            .map(|w| analyze_window(&self.config, &w))
    }

    /// Frames in the incomplete trailing window, which are dropped.
    pub fn finish(&mut self) -> usize {
        self.windower.finish()
    }

    pub fn peak_buffered(&self) -> usize {
        self.windower.peak_buffered()
    }
}

/// Lazily evaluates a frame stream. With `workers > 1`, that many windows are
/// evaluated concurrently; output order and content do not depend on it.
pub struct ReportStream<I> {
    frames: I,
    config: PipelineConfig,
    windower: Windower,
    ready: VecDeque<WindowReport>,
    exhausted: bool,
    dropped: usize,
}

impl<I: Iterator<Item = MeasurementFrame>> ReportStream<I> {
    pub fn new(config: PipelineConfig, frames: I) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self {
            windower: Windower::new(config.window_size),
            frames,
            config,
            ready: VecDeque::new(),
            exhausted: false,
            dropped: 0,
        })
    }

    /// Frames dropped in the trailing partial window, known once exhausted.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn peak_buffered(&self) -> usize {
        self.windower.peak_buffered()
    }

    fn fill(&mut self) {
        let mut batch = Vec::with_capacity(self.config.workers);
        while batch.len() < self.config.workers {
            match self.frames.next() {
                Some(f) => {
                    if let Some(w) = self.windower.push(f) {
                        batch.push(w);
                    }
                }
                None => {
                    self.exhausted = true;
                    self.dropped = self.windower.finish();
                    break;
                }
            }
        }
        let config = &self.config;
        if batch.len() > 1 {
            let reports: Vec<WindowReport> = batch.par_iter().map(|w| analyze_window(config, w)).collect();
            self.ready.extend(reports);
        } else {
            self.ready.extend(batch.iter().map(|w| analyze_window(config, w)));
        }
    }
}

impl<I: Iterator<Item = MeasurementFrame>> Iterator for ReportStream<I> {
    type Item = WindowReport;

    fn next(&mut self) -> Option<WindowReport> {
        while self.ready.is_empty() && !self.exhausted {
            self.fill();
        }
        self.ready.pop_front()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conservation::{ConservationSpec, JointPair, ReferencePolicy, ScanReference};
    use crate::frame::{JointId, JointObservation, ScanFrame, SkeletonFrame};
    use crate::propagation::TypeBModel;
    use crate::safety::RiskModel;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn scan_config(reference: f64) -> PipelineConfig {
        let mut c = PipelineConfig::new(vec![ConservationSpec {
            id: "wall".into(),
            kind: ConservationKind::StaticScan {
                reference: Some(ScanReference::Uniform(reference)),
                max_range: 49.0,
                reference_rate: 0.0,
            },
            reference_policy: ReferencePolicy::GroundTruth,
        }]);
        c.bootstrap.resamples = 200;
        c
    }

    fn scans(n: usize, beams: usize, range: f64, sigma: f64, seed: u64) -> Vec<MeasurementFrame> {
        let mut rng = crate::rng::stream(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        (0..n)
            .map(|i| {
                let ranges = (0..beams)
                    .map(|_| Some(range + if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 }))
                    .collect();
                MeasurementFrame::scan(
                    i as f64 * 0.04,
                    ScanFrame {
                        angle_start: -137.5,
                        angle_step: 275.0 / (beams.max(2) - 1) as f64,
                        ranges,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn noiseless_stream_passes_with_zero_uncertainty() {
        let mut c = scan_config(4.0);
        c.risk = Some(RiskModel {
            severity_constant: 1.0,
            l_bio: 1.0,
        });
        let reports: Vec<_> = ReportStream::new(c, scans(30, 5, 4.0, 0.0, 1).into_iter())
            .unwrap()
            .collect();
        assert_eq!(reports.len(), 3);
        for r in &reports {
            assert_eq!(r.specs[0].estimate.u, 0.0);
            assert_eq!(r.propagation.as_ref().unwrap().u_combined, 0.0);
            assert!(r.verdict.as_ref().unwrap().pass);
            assert!(r.errors.is_empty());
        }
    }

    #[test]
    fn verdict_present_iff_risk_configured() {
        let frames = scans(20, 5, 4.0, 0.01, 2);
        let c = scan_config(4.0);
        let r: Vec<_> = ReportStream::new(c.clone(), frames.clone().into_iter()).unwrap().collect();
        assert!(r.iter().all(|r| r.verdict.is_none() && r.passed().is_none()));
        let mut c = c;
        c.risk = Some(RiskModel {
            severity_constant: 1.0,
            l_bio: 1.0,
        });
        let r: Vec<_> = ReportStream::new(c, frames.into_iter()).unwrap().collect();
        assert!(r.iter().all(|r| r.verdict.is_some()));
    }

    #[test]
    fn parallel_matches_sequential() {
        let frames = scans(95, 8, 3.0, 0.02, 3);
        let mut c = scan_config(3.0);
        let seq: Vec<_> = ReportStream::new(c.clone(), frames.clone().into_iter()).unwrap().collect();
        c.workers = 4;
        let par: Vec<_> = ReportStream::new(c, frames.into_iter()).unwrap().collect();
        assert_eq!(seq, par);
        assert_eq!(seq.len(), 9);
    }

    #[test]
    fn online_push_matches_stream() {
        let frames = scans(40, 4, 2.0, 0.01, 4);
        let c = scan_config(2.0);
        let mut p = Pipeline::new(c.clone()).unwrap();
        let online: Vec<_> = frames.iter().cloned().filter_map(|f| p.push(f)).collect();
        assert_eq!(p.finish(), 0);
        let batch: Vec<_> = ReportStream::new(c, frames.into_iter()).unwrap().collect();
        assert_eq!(online, batch);
        assert_eq!(p.peak_buffered(), 10);
    }

    #[test]
    fn type_b_terms_enter_the_budget() {
        let mut c = scan_config(4.0);
        c.operating_range = Some(4.0);
        c.type_b.push(crate::config::TypeBEntry {
            source_id: "arm".into(),
            model: TypeBModel::ConstantAbsolute { u: 0.001 },
            valid_range: None,
            operating_point: None,
            sensitivity: 1.0,
        });
        let r: Vec<_> = ReportStream::new(c, scans(10, 5, 4.0, 0.0, 5).into_iter()).unwrap().collect();
        let p = r[0].propagation.as_ref().unwrap();
        assert_eq!(p.terms.len(), 2);
        assert!((p.u_combined - 0.001f64.sqrt()).abs() < 1e-15);
        assert!((p.u_alternative - 0.001).abs() < 1e-15);
        assert!((p.relative.unwrap() - 0.001f64.sqrt() / 4.0).abs() < 1e-15);
    }

    fn skeleton_frames(n: usize, seed: u64) -> Vec<MeasurementFrame> {
        let mut rng = crate::rng::stream(seed);
        (0..n)
            .map(|i| {
                let x = i as f64 * 0.02;
                let mut joints = std::collections::BTreeMap::new();
                for (id, p) in [(1u8, [x, 1.45, 0.0]), (8, [x, 0.95, 0.0]), (2, [x - 0.18, 1.43, 0.0]), (3, [x - 0.22, 1.15, 0.0])] {
                    let jitter: f64 = rng.random_range(-0.002..0.002);
                    joints.insert(JointId::new(id).unwrap(), JointObservation::new([p[0] + jitter, p[1], p[2]]));
                }
                MeasurementFrame::skeleton(i as f64 / 30.0, SkeletonFrame { joints })
            })
            .collect()
    }

    #[test]
    fn pooled_and_hypotheses_for_multiple_specs() {
        let j = |i| JointId::new(i).unwrap();
        let mut c = PipelineConfig::new(vec![
            ConservationSpec {
                id: "trunk".into(),
                kind: ConservationKind::JointPairDistance {
                    pairs: vec![JointPair(j(1), j(8))],
                    reference: vec![],
                },
                reference_policy: ReferencePolicy::WindowMean,
            },
            ConservationSpec {
                id: "arm".into(),
                kind: ConservationKind::JointPairDistance {
                    pairs: vec![JointPair(j(2), j(3))],
                    reference: vec![],
                },
                reference_policy: ReferencePolicy::WindowMean,
            },
        ]);
        c.bootstrap.resamples = 100;
        c.hypothesis.permutations = 50;
        c.hypothesis.covariates = vec!["velocity".into(), "nonexistent".into()];
        let r: Vec<_> = ReportStream::new(c, skeleton_frames(20, 6).into_iter()).unwrap().collect();
        assert_eq!(r.len(), 2);
        for w in &r {
            assert_eq!(w.specs.len(), 2);
            assert_eq!(w.pooled.as_ref().unwrap().spec_id, POOLED_ID);
            assert_eq!(w.hypotheses.len(), 2);
            // The missing covariate is reported, not fatal.
            assert_eq!(w.errors.iter().filter(|e| e.stage == "hypothesis").count(), 2);
            let p = w.propagation.as_ref().unwrap();
            let u = w.pooled.as_ref().unwrap().u;
            assert!((p.terms[0].u - u / 2f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn kind_mismatch_is_a_window_error() {
        let c = scan_config(4.0);
        let r: Vec<_> = ReportStream::new(c, skeleton_frames(10, 7).into_iter()).unwrap().collect();
        assert_eq!(r.len(), 1);
        assert!(r[0].specs.is_empty());
        assert!(r[0].pooled.is_none());
        assert_eq!(r[0].errors[0].stage, "conservation");
    }

    #[test]
    fn baseline_mode_skips_hypotheses() {
        let mut c = scan_config(4.0);
        c.mode = EvaluationMode::Baseline;
        c.hypothesis.covariates = vec!["velocity".into()];
        let r: Vec<_> = ReportStream::new(c, scans(10, 5, 4.0, 0.01, 8).into_iter()).unwrap().collect();
        assert_eq!(r[0].specs[0].referencing, Referencing::Baseline);
        assert!(r[0].hypotheses.is_empty());
    }
}
