//! Type B sensor models and combination of uncertainty contributions.
//!
//! The default combination rule sums the unsquared products `s_j * u_j`
//! under one square root. [`CombineMode::GumSquared`] is the usual quadrature
//! sum and is kept separate for cross-checking; one is never substituted for
//! the other.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom;
use crate::stats::UncertaintyEstimate;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropagationError {
    #[error("operating point {x} outside valid range [{lo}, {hi}]")]
    OutOfRange { x: f64, lo: f64, hi: f64 },
    #[error("no terms to combine")]
    EmptyTerms,
    #[error("term '{0}' has a negative or non-finite sensitivity or uncertainty")]
    InvalidTerm(String),
    #[error("human and robot positions coincide")]
    CoincidentPositions,
    #[error("cannot average estimates at different confidence levels")]
    MixedConfidence,
    #[error("no estimates to average")]
    NoEstimates,
    #[error("invalid Type B model '{0}'")]
    InvalidModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TypeBModel {
    ConstantAbsolute { u: f64 },
    ConstantRelative { fraction: f64 },
    /// `slope * x + intercept`, clamped at zero.
    LinearInRange { slope: f64, intercept: f64 },
}

/// A-priori uncertainty model of one source, typically from a data sheet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeBSpec {
    pub source_id: String,
    pub model: TypeBModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_range: Option<(f64, f64)>,
}

impl TypeBSpec {
    /// Kinect V2 depth uncertainty, linear in camera distance.
    pub fn kinect_v2() -> Self {
        Self {
            source_id: "kinect-v2".into(),
            model: TypeBModel::LinearInRange {
                slope: 8e-4,
                intercept: -1e-4,
            },
            valid_range: None,
        }
    }

    /// UR10e positioning repeatability, 0.1 mm.
    pub fn ur10e() -> Self {
        Self {
            source_id: "ur10e".into(),
            model: TypeBModel::ConstantAbsolute { u: 0.1e-3 },
            valid_range: None,
        }
    }

    /// RealSense D435 depth, up to 2% of range.
    pub fn realsense_d435() -> Self {
        Self {
            source_id: "realsense-d435".into(),
            model: TypeBModel::ConstantRelative { fraction: 0.02 },
            valid_range: None,
        }
    }

    /// Manually measured reference lengths, 5% of the measured length.
    pub fn manual_reference() -> Self {
        Self {
            source_id: "manual-reference".into(),
            model: TypeBModel::ConstantRelative { fraction: 0.05 },
            valid_range: None,
        }
    }

    pub fn validate(&self) -> Result<(), PropagationError> {
        let finite = match self.model {
            TypeBModel::ConstantAbsolute { u } => u.is_finite() && u >= 0.0,
            TypeBModel::ConstantRelative { fraction } => fraction.is_finite() && fraction >= 0.0,
            TypeBModel::LinearInRange { slope, intercept } => slope.is_finite() && intercept.is_finite(),
        };
        let range_ok = self.valid_range.is_none_or(|(lo, hi)| lo <= hi);
        if finite && range_ok && !self.source_id.is_empty() {
            Ok(())
        } else {
            Err(PropagationError::InvalidModel(self.source_id.clone()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TypeBValue {
    pub u: f64,
    /// The linear model went negative and was clamped to zero.
    pub clamped: bool,
}

pub fn type_b_eval(spec: &TypeBSpec, operating_point: f64) -> Result<TypeBValue, PropagationError> {
    if let Some((lo, hi)) = spec.valid_range {
        if !(operating_point >= lo && operating_point <= hi) {
            return Err(PropagationError::OutOfRange {
                x: operating_point,
                lo,
                hi,
            });
        }
    }
    let raw = match spec.model {
        TypeBModel::ConstantAbsolute { u } => u,
        TypeBModel::ConstantRelative { fraction } => fraction * operating_point,
        TypeBModel::LinearInRange { slope, intercept } => slope * operating_point + intercept,
    };
    if raw < 0.0 {
        log::warn!(
            "Type B model '{}' is negative ({raw:e}) at {operating_point}; clamped to 0",
            spec.source_id
        );
        return Ok(TypeBValue { u: 0.0, clamped: true });
    }
    Ok(TypeBValue { u: raw, clamped: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyKind {
    TypeA,
    TypeB,
}

/// One summand `|da/dx| * u(x)` of a combined uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTerm {
    pub symbol: String,
    pub sensitivity: f64,
    pub u: f64,
    pub kind: UncertaintyKind,
}

impl SensitivityTerm {
    pub fn new(symbol: impl Into<String>, sensitivity: f64, u: f64, kind: UncertaintyKind) -> Self {
        Self {
            symbol: symbol.into(),
            sensitivity,
            u,
            kind,
        }
    }

    pub fn contribution(&self) -> f64 {
        self.sensitivity * self.u
    }

    fn check(&self) -> Result<(), PropagationError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.sensitivity) && ok(self.u) {
            Ok(())
        } else {
            Err(PropagationError::InvalidTerm(self.symbol.clone()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombineMode {
    /// `sqrt(sum s_j * u_j)`
    #[default]
    AsPrinted,
    /// `sqrt(sum (s_j * u_j)^2)`
    GumSquared,
}

pub fn combine(terms: &[SensitivityTerm], mode: CombineMode) -> Result<f64, PropagationError> {
    if terms.is_empty() {
        return Err(PropagationError::EmptyTerms);
    }
    for t in terms {
        t.check()?;
    }
    let sum: f64 = match mode {
        CombineMode::AsPrinted => terms.iter().map(SensitivityTerm::contribution).sum(),
        CombineMode::GumSquared => terms.iter().map(|t| t.contribution().powi(2)).sum(),
    };
    Ok(sum.sqrt())
}

/// Composite detection term whose contribution is the product
/// `(s_op * u_op) * (s_ls * u_ls)` of the pose-detector and laser-scanner
/// contributions.
pub fn split_detection(u_op: f64, s_op: f64, u_ls: f64, s_ls: f64) -> SensitivityTerm {
    SensitivityTerm::new("det", s_op * s_ls, u_op * u_ls, UncertaintyKind::TypeA)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionUncertainty {
    pub u: f64,
    pub components: Vec<SensitivityTerm>,
    pub mode: CombineMode,
    pub confidence: f64,
}

impl PositionUncertainty {
    pub fn recompute(&self) -> Result<f64, PropagationError> {
        combine(&self.components, self.mode)
    }
}

/// Combined uncertainty on the human position: the detection term plus any
/// environmental terms.
pub fn human_position_uncertainty(
    det_term: SensitivityTerm,
    env_terms: &[SensitivityTerm],
    mode: CombineMode,
    confidence: f64,
) -> Result<PositionUncertainty, PropagationError> {
    let mut components = Vec::with_capacity(env_terms.len() + 1);
    components.push(det_term);
    components.extend_from_slice(env_terms);
    Ok(PositionUncertainty {
        u: combine(&components, mode)?,
        components,
        mode,
        confidence,
    })
}

pub fn hr_distance(r_h: [f64; 3], r_r: [f64; 3]) -> f64 {
    geom::distance(r_h, r_r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceUncertainty {
    /// `sum_p (r_H,p - r_R,p) / d_HR`, signed.
    pub prefactor: f64,
    /// `prefactor * (u_rH + u_rR)`; may be negative or zero.
    pub signed: f64,
    /// `|prefactor| * (u_rH + u_rR)`, safe to hand to limit checks.
    pub magnitude: f64,
    /// The signed prefactor vanished for a nonzero separation.
    pub degenerate: bool,
}

/// Human–robot distance uncertainty from the summed signed component
/// differences divided by the distance, times `u_rH + u_rR`.
pub fn hr_distance_uncertainty(
    r_h: [f64; 3],
    r_r: [f64; 3],
    u_rh: f64,
    u_rr: f64,
) -> Result<DistanceUncertainty, PropagationError> {
    let d = hr_distance(r_h, r_r);
    if !(d > 0.0) {
        return Err(PropagationError::CoincidentPositions);
    }
    let delta = geom::sub(r_h, r_r);
    let prefactor = (delta[0] + delta[1] + delta[2]) / d;
    let degenerate = prefactor.abs() <= 1e-12;
    if degenerate {
        log::warn!("distance-uncertainty prefactor vanishes at separation {d}");
    }
    let total = u_rh + u_rr;
    Ok(DistanceUncertainty {
        prefactor,
        signed: prefactor * total,
        magnitude: prefactor.abs() * total,
        degenerate,
    })
}

/// Distance uncertainty by the combination rule: the gradient of the
/// Euclidean distance w.r.t. either position has unit norm, so both
/// sensitivities are 1.
pub fn hr_distance_combined(u_rh: f64, u_rr: f64, mode: CombineMode) -> Result<f64, PropagationError> {
    combine(
        &[
            SensitivityTerm::new("r_H", 1.0, u_rh, UncertaintyKind::TypeA),
            SensitivityTerm::new("r_R", 1.0, u_rr, UncertaintyKind::TypeB),
        ],
        mode,
    )
}

/// Splits a joint-pair uncertainty equally over its two joints
/// (`u_pair / sqrt(2)`), assuming all joints are detected equally well.
pub fn per_joint_from_pair(u_pair: f64) -> f64 {
    u_pair / std::f64::consts::SQRT_2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedEstimate {
    pub estimate: UncertaintyEstimate,
    /// `spec_id@window_id` of every input.
    pub provenance: Vec<String>,
}

/// Arithmetic mean of `u`, of the point estimates, and of the relative values
/// (when every input has one). Intervals are averaged endpoint-wise.
pub fn average_estimates(estimates: &[UncertaintyEstimate]) -> Result<AveragedEstimate, PropagationError> {
    let first = estimates.first().ok_or(PropagationError::NoEstimates)?;
    if estimates.iter().any(|e| e.confidence != first.confidence) {
        return Err(PropagationError::MixedConfidence);
    }
    let n = estimates.len() as f64;
    let mean = |f: &dyn Fn(&UncertaintyEstimate) -> f64| estimates.iter().map(f).sum::<f64>() / n;
    let relative = estimates
        .iter()
        .map(|e| e.relative)
        .collect::<Option<Vec<f64>>>()
        .map(|r| r.iter().sum::<f64>() / n);
    let estimate = if estimates.len() == 1 {
        first.clone()
    } else {
        UncertaintyEstimate {
            spec_id: "average".into(),
            window_id: first.window_id,
            u: mean(&|e| e.u),
            confidence: first.confidence,
            interval: (mean(&|e| e.interval.0), mean(&|e| e.interval.1)),
            point_estimate: mean(&|e| e.point_estimate),
            relative,
        }
    };
    Ok(AveragedEstimate {
        estimate,
        provenance: estimates
            .iter()
            .map(|e| format!("{}@{}", e.spec_id, e.window_id))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: f64, u: f64) -> SensitivityTerm {
        SensitivityTerm::new("x", s, u, UncertaintyKind::TypeA)
    }

    fn est(u: f64, relative: Option<f64>) -> UncertaintyEstimate {
        UncertaintyEstimate {
            spec_id: "s".into(),
            window_id: 0,
            u,
            confidence: 0.95,
            interval: (u, u),
            point_estimate: u,
            relative,
        }
    }

    #[test]
    fn type_b_examples() {
        let k = type_b_eval(&TypeBSpec::kinect_v2(), 2.0).unwrap();
        assert!((k.u - 0.0015).abs() < 1e-18);
        assert!(!k.clamped);
        assert_eq!(type_b_eval(&TypeBSpec::ur10e(), 123.0).unwrap().u, 0.0001);
        let rs = type_b_eval(&TypeBSpec::realsense_d435(), 3.0).unwrap();
        assert!((rs.u - 0.06).abs() < 1e-15);
    }

    #[test]
    fn type_b_clamps_and_ranges() {
        let k = type_b_eval(&TypeBSpec::kinect_v2(), 0.1).unwrap();
        assert_eq!(k.u, 0.0);
        assert!(k.clamped);
        let mut spec = TypeBSpec::kinect_v2();
        spec.valid_range = Some((0.5, 4.5));
        assert!(matches!(type_b_eval(&spec, 5.0), Err(PropagationError::OutOfRange { .. })));
        assert!(type_b_eval(&spec, 4.5).is_ok());
    }

    #[test]
    fn combine_examples() {
        assert!((combine(&[t(1.0, 0.04)], CombineMode::AsPrinted).unwrap() - 0.2).abs() < 1e-15);
        let two = [t(1.0, 0.04), t(1.0, 0.05)];
        assert!((combine(&two, CombineMode::AsPrinted).unwrap() - 0.3).abs() < 1e-15);
        let gum = combine(&two, CombineMode::GumSquared).unwrap();
        assert!((gum - 0.0041_f64.sqrt()).abs() < 1e-15);
        assert!((gum - 0.064).abs() < 1e-3);
        assert_eq!(combine(&[], CombineMode::AsPrinted), Err(PropagationError::EmptyTerms));
        assert!(matches!(
            combine(&[t(-1.0, 0.1)], CombineMode::AsPrinted),
            Err(PropagationError::InvalidTerm(_))
        ));
    }

    #[test]
    fn split_detection_examples() {
        assert_eq!(split_detection(0.01, 1.0, 0.0, 1.0).contribution(), 0.0);
        let c = split_detection(0.0038, 1.0, 0.0038, 1.0).contribution();
        assert!((c - 1.444e-5).abs() < 1e-18);
        let c = split_detection(0.007, 2.0, 0.5, 2.0).contribution();
        assert!((c - 0.014).abs() < 1e-15);
        assert_eq!(split_detection(0.1, 1.0, 0.1, 1.0).symbol, "det");
    }

    #[test]
    fn human_position_examples() {
        let p = human_position_uncertainty(t(1.0, 0.0001), &[], CombineMode::AsPrinted, 0.95).unwrap();
        assert!((p.u - 0.01).abs() < 1e-15);
        let q = human_position_uncertainty(t(1.0, 0.0001), &[t(1.0, 0.0)], CombineMode::AsPrinted, 0.95)
            .unwrap();
        assert_eq!(p.u, q.u);
        let r = human_position_uncertainty(t(1.0, 0.04), &[t(1.0, 0.05)], CombineMode::AsPrinted, 0.95)
            .unwrap();
        assert!((r.u - 0.3).abs() < 1e-15);
        assert_eq!(r.recompute().unwrap(), r.u);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(hr_distance([1.0, 0.0, 0.0], [0.0; 3]), 1.0);
        assert_eq!(hr_distance([0.4, 0.5, 0.6], [0.4, 0.5, 0.6]), 0.0);
        assert!((hr_distance([1.0, 2.0, 3.0], [0.0; 3]) - 14f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn distance_uncertainty_examples() {
        let d = hr_distance_uncertainty([1.0, 1.0, 1.0], [0.0; 3], 0.01, 0.001).unwrap();
        let expected = 0.011 * 3f64.sqrt();
        assert!((d.signed - expected).abs() / expected < 1e-12);
        assert_eq!(d.signed, d.magnitude);

        let d = hr_distance_uncertainty([2.0, -1.0, 0.5], [0.0; 3], 0.0, 0.0).unwrap();
        assert_eq!(d.signed, 0.0);

        let d = hr_distance_uncertainty([1.0, -1.0, 0.0], [0.0; 3], 0.01, 0.001).unwrap();
        assert_eq!(d.prefactor, 0.0);
        assert!(d.degenerate);

        let d = hr_distance_uncertainty([-1.0, -1.0, 0.0], [0.0; 3], 0.01, 0.0).unwrap();
        assert!(d.signed < 0.0);
        assert!(d.magnitude > 0.0);

        assert_eq!(
            hr_distance_uncertainty([1.0; 3], [1.0; 3], 0.1, 0.1),
            Err(PropagationError::CoincidentPositions)
        );
    }

    #[test]
    fn averaging() {
        let a = average_estimates(&[est(0.008, Some(0.00008)), est(0.015, Some(0.00015))]).unwrap();
        assert!((a.estimate.u - 0.0115).abs() < 1e-15);
        assert!((a.estimate.relative.unwrap() - 0.000115).abs() < 1e-15);
        assert_eq!(a.provenance.len(), 2);

        let single = est(0.004, None);
        assert_eq!(average_estimates(std::slice::from_ref(&single)).unwrap().estimate, single);

        let a = average_estimates(&[est(0.01, None), est(0.01, None), est(0.01, None)]).unwrap();
        assert!((a.estimate.u - 0.01).abs() < 1e-15);
        assert_eq!(a.estimate.relative, None);

        let mut other = est(0.01, None);
        other.confidence = 0.99;
        assert_eq!(
            average_estimates(&[est(0.01, None), other]),
            Err(PropagationError::MixedConfidence)
        );
        assert_eq!(average_estimates(&[]), Err(PropagationError::NoEstimates));
    }

    #[test]
    fn per_joint_attribution() {
        assert!((per_joint_from_pair(2f64.sqrt()) - 1.0).abs() < 1e-15);
    }
}
