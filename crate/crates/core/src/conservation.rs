//! Conservation equations evaluated over measurement windows.
//!
//! Every conserved quantity (a bone length, the range to a static obstacle, a
//! constant channel) is compared against its reference value; the signed
//! difference is the deviation attributed to measurement uncertainty. The
//! baseline mode drops the conservation reference entirely and measures the
//! spread of the raw quantity around its own window mean.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{JointId, MeasurementFrame, PayloadKind, ScanFrame, SkeletonFrame};
use crate::geom;

/// Covariate name for per-sample joint speed (m/s).
pub const VELOCITY: &str = "velocity";

/// Default maximum plausible range; returns at or beyond it are dropouts.
pub const DEFAULT_MAX_RANGE: f64 = 49.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConservationError {
    #[error("joint {0} missing or invalid")]
    MissingJoint(JointId),
    #[error("reference must be strictly positive, got {0}")]
    NonPositiveReference(f64),
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("insufficient samples: need at least {needed}, found {found}")]
    InsufficientSamples { needed: usize, found: usize },
    #[error("degenerate timestamps at frame {0}: time step is not positive")]
    DegenerateTimestamps(usize),
    #[error("no ground-truth reference for target {0}")]
    MissingReference(usize),
    #[error("spec expects {expected} frames, window contains {found}")]
    KindMismatch {
        expected: PayloadKind,
        found: PayloadKind,
    },
    #[error("invalid conservation spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointPair(pub JointId, pub JointId);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferencePolicy {
    /// Externally known reference values (measured or dataset ground truth).
    GroundTruth,
    /// Reference estimated as the window mean of the conserved quantity.
    #[default]
    WindowMean,
}

/// Per-beam reference ranges, either one value for every beam or a profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScanReference {
    Uniform(f64),
    PerBeam(Vec<Option<f64>>),
}

impl ScanReference {
    pub fn resolve(&self, beams: usize) -> Result<Vec<Option<f64>>, ConservationError> {
        match self {
            ScanReference::Uniform(r) => Ok(vec![Some(*r); beams]),
            ScanReference::PerBeam(v) if v.len() == beams => Ok(v.clone()),
            ScanReference::PerBeam(v) => Err(ConservationError::LengthMismatch {
                expected: beams,
                found: v.len(),
            }),
        }
    }
}

fn default_max_range() -> f64 {
    DEFAULT_MAX_RANGE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConservationKind {
    /// Distance between two joints stays constant over time.
    JointPairDistance {
        pairs: Vec<JointPair>,
        #[serde(default)]
        reference: Vec<Option<f64>>,
    },
    /// Ranges to a static scene stay constant. `reference_rate` (m/s) allows
    /// a scene moving at a known constant radial rate; the conserved quantity
    /// is then `range - rate * t`.
    StaticScan {
        #[serde(default)]
        reference: Option<ScanReference>,
        #[serde(default = "default_max_range")]
        max_range: f64,
        #[serde(default)]
        reference_rate: f64,
    },
    GenericConstant {
        channel: String,
        #[serde(default)]
        reference: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConservationSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: ConservationKind,
    #[serde(default)]
    pub reference_policy: ReferencePolicy,
}

impl ConservationSpec {
    pub fn payload_kind(&self) -> PayloadKind {
        match self.kind {
            ConservationKind::JointPairDistance { .. } => PayloadKind::Skeleton,
            ConservationKind::StaticScan { .. } => PayloadKind::Scan,
            ConservationKind::GenericConstant { .. } => PayloadKind::Generic,
        }
    }

    pub fn validate(&self) -> Result<(), ConservationError> {
        let invalid = |msg: String| Err(ConservationError::InvalidSpec(msg));
        if self.id.is_empty() {
            return invalid("empty spec id".into());
        }
        match &self.kind {
            ConservationKind::JointPairDistance { pairs, reference } => {
                if pairs.is_empty() {
                    return invalid(format!("{}: no joint pairs", self.id));
                }
                if let Some(p) = pairs.iter().find(|p| p.0 == p.1) {
                    return invalid(format!("{}: pair ({}, {}) repeats a joint", self.id, p.0, p.1));
                }
                if !reference.is_empty() && reference.len() != pairs.len() {
                    return Err(ConservationError::LengthMismatch {
                        expected: pairs.len(),
                        found: reference.len(),
                    });
                }
                check_positive(reference.iter().flatten())?;
                if self.reference_policy == ReferencePolicy::GroundTruth {
                    if let Some(i) = (0..pairs.len()).find(|&i| reference.get(i).copied().flatten().is_none()) {
                        return Err(ConservationError::MissingReference(i));
                    }
                }
            }
            ConservationKind::StaticScan {
                reference,
                max_range,
                reference_rate,
            } => {
                if !(*max_range > 0.0) {
                    return invalid(format!("{}: max_range must be positive", self.id));
                }
                if !reference_rate.is_finite() {
                    return invalid(format!("{}: reference_rate must be finite", self.id));
                }
                match reference {
                    Some(ScanReference::Uniform(r)) => check_positive(std::iter::once(r))?,
                    Some(ScanReference::PerBeam(v)) => check_positive(v.iter().flatten())?,
                    None if self.reference_policy == ReferencePolicy::GroundTruth => {
                        return Err(ConservationError::MissingReference(0));
                    }
                    None => {}
                }
            }
            ConservationKind::GenericConstant { channel, reference } => {
                if channel.is_empty() {
                    return invalid(format!("{}: empty channel name", self.id));
                }
                if let Some(r) = reference {
                    if !r.is_finite() {
                        return invalid(format!("{}: reference must be finite", self.id));
                    }
                }
                if self.reference_policy == ReferencePolicy::GroundTruth && reference.is_none() {
                    return Err(ConservationError::MissingReference(0));
                }
            }
        }
        Ok(())
    }
}

fn check_positive<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<(), ConservationError> {
    for &v in values {
        if !(v > 0.0) || !v.is_finite() {
            return Err(ConservationError::NonPositiveReference(v));
        }
    }
    Ok(())
}

/// Signed violations of one conservation spec over one window.
///
/// `values`, `timestamps`, `targets` and each covariate list are aligned.
/// Several targets (pairs, beams) may share a frame, so timestamps are
/// non-decreasing overall and strictly increasing per target.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviationSeries {
    pub spec_id: String,
    pub window_id: u64,
    pub values: Vec<f64>,
    pub timestamps: Vec<f64>,
    /// Pair index, beam index, or 0 for generic channels.
    pub targets: Vec<u32>,
    pub covariates: BTreeMap<String, Vec<f64>>,
}

impl DeviationSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn abs_values(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.abs()).collect()
    }

    fn push(&mut self, value: f64, timestamp: f64, target: u32) {
        self.values.push(value);
        self.timestamps.push(timestamp);
        self.targets.push(target);
    }
}

/// How the reference behind a deviation series was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Referencing {
    GroundTruth,
    /// Self-referenced: the mean deviation is zero by construction, so only
    /// dispersion is informative.
    WindowMean,
    /// Raw spread around the window mean, no conservation reference.
    Baseline,
}

impl Referencing {
    pub fn is_self_referenced(self) -> bool {
        !matches!(self, Referencing::GroundTruth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvaluationMode {
    #[default]
    Conservation,
    Baseline,
}

/// `|p_j - p_k| - reference` for one skeleton frame.
pub fn evaluate_joint_pair(
    frame: &SkeletonFrame,
    pair: JointPair,
    reference: f64,
) -> Result<f64, ConservationError> {
    if !(reference > 0.0) {
        return Err(ConservationError::NonPositiveReference(reference));
    }
    let a = frame.position(pair.0).ok_or(ConservationError::MissingJoint(pair.0))?;
    let b = frame.position(pair.1).ok_or(ConservationError::MissingJoint(pair.1))?;
    Ok(geom::distance(a, b) - reference)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamDeviation {
    pub beam: usize,
    pub deviation: f64,
}

fn valid_range(r: Option<f64>, max_range: f64) -> Option<f64> {
    r.filter(|r| r.is_finite() && *r >= 0.0 && *r < max_range)
}

/// Element-wise `range - reference` over valid beams of one sweep.
pub fn evaluate_static_scan(
    frame: &ScanFrame,
    reference: &[Option<f64>],
    max_range: f64,
) -> Result<Vec<BeamDeviation>, ConservationError> {
    if reference.len() != frame.beam_count() {
        return Err(ConservationError::LengthMismatch {
            expected: frame.beam_count(),
            found: reference.len(),
        });
    }
    let mut out = Vec::with_capacity(frame.beam_count());
    for (beam, (&range, &reference)) in frame.ranges.iter().zip(reference).enumerate() {
        let (Some(range), Some(reference)) = (valid_range(range, max_range), reference) else {
            continue;
        };
        if !(reference > 0.0) {
            return Err(ConservationError::NonPositiveReference(reference));
        }
        out.push(BeamDeviation {
            beam,
            deviation: range - reference,
        });
    }
    Ok(out)
}

/// Per-frame speed of one joint (m/s), aligned with `frames`.
///
/// Frames where the joint is missing yield `None`; the finite differences run
/// over the frames where it is present. Interior points use central
/// differences of the position vector, endpoints one-sided differences.
pub fn compute_velocity(
    frames: &[MeasurementFrame],
    joint: JointId,
) -> Result<Vec<Option<f64>>, ConservationError> {
    let mut present: Vec<(usize, f64, [f64; 3])> = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let skel = f.as_skeleton().ok_or(ConservationError::KindMismatch {
            expected: PayloadKind::Skeleton,
            found: f.kind(),
        })?;
        if let Some(p) = skel.position(joint) {
            present.push((i, f.timestamp, p));
        }
    }
    if present.len() < 2 {
        return Err(ConservationError::InsufficientSamples {
            needed: 2,
            found: present.len(),
        });
    }
    for w in present.windows(2) {
        if !(w[1].1 > w[0].1) {
            return Err(ConservationError::DegenerateTimestamps(w[1].0));
        }
    }
    let mut out = vec![None; frames.len()];
    let last = present.len() - 1;
    for k in 0..=last {
        let (lo, hi) = match k {
            0 => (0, 1),
            k if k == last => (last - 1, last),
            k => (k - 1, k + 1),
        };
        let dt = present[hi].1 - present[lo].1;
        let speed = geom::distance(present[hi].2, present[lo].2) / dt;
        out[present[k].0] = Some(speed);
    }
    Ok(out)
}

/// Reference values estimated from the window itself.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedReference {
    /// One entry per target; `None` where fewer than two valid samples exist.
    pub values: Vec<Option<f64>>,
    pub self_referenced: bool,
}

/// Conserved quantity per (frame, target), `None` where invalid.
struct Samples {
    timestamps: Vec<f64>,
    /// frame-major: `quantity[frame][target]`
    quantity: Vec<Vec<Option<f64>>>,
    targets: usize,
}

fn check_kind(window: &[MeasurementFrame], expected: PayloadKind) -> Result<(), ConservationError> {
    match window.iter().find(|f| f.kind() != expected) {
        Some(f) => Err(ConservationError::KindMismatch {
            expected,
            found: f.kind(),
        }),
        None => Ok(()),
    }
}

/// `subtract_rate` removes known scene motion (conservation mode only).
fn collect_samples(
    window: &[MeasurementFrame],
    spec: &ConservationSpec,
    subtract_rate: bool,
) -> Result<Samples, ConservationError> {
    check_kind(window, spec.payload_kind())?;
    let timestamps = window.iter().map(|f| f.timestamp).collect();
    let (quantity, targets) = match &spec.kind {
        ConservationKind::JointPairDistance { pairs, .. } => {
            let q = window
                .iter()
                .filter_map(MeasurementFrame::as_skeleton)
                .map(|s| {
                    pairs
                        .iter()
                        .map(|p| Some(geom::distance(s.position(p.0)?, s.position(p.1)?)))
                        .collect()
                })
                .collect();
            (q, pairs.len())
        }
        ConservationKind::StaticScan {
            max_range,
            reference_rate,
            ..
        } => {
            let beams = window
                .first()
                .and_then(MeasurementFrame::as_scan)
                .map_or(0, ScanFrame::beam_count);
            let rate = if subtract_rate { *reference_rate } else { 0.0 };
            let mut q = Vec::with_capacity(window.len());
            for f in window {
                let scan = f.as_scan().expect("kind checked");
                if scan.beam_count() != beams {
                    return Err(ConservationError::LengthMismatch {
                        expected: beams,
                        found: scan.beam_count(),
                    });
                }
                q.push(
                    scan.ranges
                        .iter()
                        .map(|&r| valid_range(r, *max_range).map(|r| r - rate * f.timestamp))
                        .collect(),
                );
            }
            (q, beams)
        }
        ConservationKind::GenericConstant { channel, .. } => {
            let q = window
                .iter()
                .filter_map(MeasurementFrame::as_generic)
                .map(|g| vec![g.channels.get(channel).copied().filter(|v| v.is_finite())])
                .collect();
            (q, 1)
        }
    };
    Ok(Samples {
        timestamps,
        quantity,
        targets,
    })
}

fn window_means(samples: &Samples) -> Result<Vec<Option<f64>>, ConservationError> {
    let mut sums = vec![(0.0_f64, 0_usize); samples.targets];
    for row in &samples.quantity {
        for (acc, q) in sums.iter_mut().zip(row) {
            if let Some(q) = q {
                acc.0 += q;
                acc.1 += 1;
            }
        }
    }
    let means: Vec<Option<f64>> = sums
        .iter()
        .map(|&(s, n)| (n >= 2).then(|| s / n as f64))
        .collect();
    if means.iter().all(Option::is_none) {
        let best = sums.iter().map(|s| s.1).max().unwrap_or(0);
        return Err(ConservationError::InsufficientSamples { needed: 2, found: best });
    }
    Ok(means)
}

/// Arithmetic mean of the conserved quantity per target over the window.
pub fn estimate_reference(
    window: &[MeasurementFrame],
    spec: &ConservationSpec,
) -> Result<EstimatedReference, ConservationError> {
    let samples = collect_samples(window, spec, true)?;
    Ok(EstimatedReference {
        values: window_means(&samples)?,
        self_referenced: true,
    })
}

fn ground_truth(
    spec: &ConservationSpec,
    targets: usize,
) -> Result<Vec<Option<f64>>, ConservationError> {
    match &spec.kind {
        ConservationKind::JointPairDistance { reference, .. } => {
            let refs: Vec<Option<f64>> = (0..targets)
                .map(|i| reference.get(i).copied().flatten())
                .collect();
            if let Some(i) = refs.iter().position(Option::is_none) {
                return Err(ConservationError::MissingReference(i));
            }
            check_positive(refs.iter().flatten())?;
            Ok(refs)
        }
        ConservationKind::StaticScan { reference, .. } => {
            let refs = reference
                .as_ref()
                .ok_or(ConservationError::MissingReference(0))?
                .resolve(targets)?;
            check_positive(refs.iter().flatten())?;
            Ok(refs)
        }
        ConservationKind::GenericConstant { reference, .. } => Ok(vec![Some(
            reference.ok_or(ConservationError::MissingReference(0))?,
        )]),
    }
}

/// Evaluates one spec over one window and returns its deviation series.
///
/// Samples where a target is invalid are dropped, never interpolated.
/// Requested covariates that cannot be provided for every sample are left
/// out of the series.
pub fn deviation_series(
    window: &[MeasurementFrame],
    spec: &ConservationSpec,
    window_id: u64,
    covariates: &[String],
    mode: EvaluationMode,
) -> Result<(DeviationSeries, Referencing), ConservationError> {
    let samples = collect_samples(window, spec, mode == EvaluationMode::Conservation)?;
    let (references, referencing) = match (mode, spec.reference_policy) {
        (EvaluationMode::Baseline, _) => (window_means(&samples)?, Referencing::Baseline),
        (EvaluationMode::Conservation, ReferencePolicy::WindowMean) => {
            (window_means(&samples)?, Referencing::WindowMean)
        }
        (EvaluationMode::Conservation, ReferencePolicy::GroundTruth) => {
            (ground_truth(spec, samples.targets)?, Referencing::GroundTruth)
        }
    };

    let mut series = DeviationSeries {
        spec_id: spec.id.clone(),
        window_id,
        ..Default::default()
    };
    let mut sources: Vec<(usize, usize)> = Vec::new();
    for (f, row) in samples.quantity.iter().enumerate() {
        for (t, (q, r)) in row.iter().zip(&references).enumerate() {
            if let (Some(q), Some(r)) = (q, r) {
                series.push(q - r, samples.timestamps[f], t as u32);
                sources.push((f, t));
            }
        }
    }
    if series.is_empty() {
        return Err(ConservationError::InsufficientSamples { needed: 1, found: 0 });
    }

    for name in covariates {
        if let Some(values) = covariate_values(window, spec, name, &sources)? {
            series.covariates.insert(name.clone(), values);
        }
    }
    Ok((series, referencing))
}

fn covariate_values(
    window: &[MeasurementFrame],
    spec: &ConservationSpec,
    name: &str,
    sources: &[(usize, usize)],
) -> Result<Option<Vec<f64>>, ConservationError> {
    match &spec.kind {
        ConservationKind::JointPairDistance { pairs, .. } if name == VELOCITY => {
            let mut speeds: BTreeMap<JointId, Vec<Option<f64>>> = BTreeMap::new();
            for p in pairs {
                for j in [p.0, p.1] {
                    if speeds.contains_key(&j) {
                        continue;
                    }
                    match compute_velocity(window, j) {
                        Ok(v) => {
                            speeds.insert(j, v);
                        }
                        Err(ConservationError::InsufficientSamples { .. }) => return Ok(None),
                        Err(e) => return Err(e),
                    }
                }
            }
            // A pair's speed is the mean speed of its two joints.
            let values: Option<Vec<f64>> = sources
                .iter()
                .map(|&(f, t)| {
                    let p = pairs[t];
                    Some(0.5 * (speeds[&p.0][f]? + speeds[&p.1][f]?))
                })
                .collect();
            Ok(values)
        }
        ConservationKind::GenericConstant { .. } => Ok(sources
            .iter()
            .map(|&(f, _)| {
                window[f]
                    .as_generic()
                    .and_then(|g| g.channels.get(name).copied())
                    .filter(|v| v.is_finite())
            })
            .collect()),
        _ => Ok(None),
    }
}

/// Deviations of the raw measured quantity from its own window mean, with no
/// conservation reference.
pub fn baseline_spread(
    window: &[MeasurementFrame],
    spec: &ConservationSpec,
    window_id: u64,
) -> Result<DeviationSeries, ConservationError> {
    deviation_series(window, spec, window_id, &[], EvaluationMode::Baseline).map(|(s, _)| s)
}
