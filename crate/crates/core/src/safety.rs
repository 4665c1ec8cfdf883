//! Mapping of uncertainties onto a probability-per-hour safety limit.
//!
//! The uncertainty is read directly as a dangerous-failure probability per
//! hour; no exposure or demand-rate model is applied. `l_bio` has no default.

use serde::{Deserialize, Serialize};
use libm::erfc;
use thiserror::Error;

/// Name recorded in verdicts for the direct uncertainty-to-PFH identification.
pub const DIRECT_MAPPING: &str = "direct-identification";

/// ISO 13849 upper bound on dangerous failures per hour.
pub const ISO_13849_PFH_MAX: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SafetyError {
    #[error("relative uncertainty {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("safety limit must be positive, got {0}")]
    InvalidLimit(f64),
    #[error("risk model parameter '{name}' must be positive, got {value}")]
    InvalidRiskModel { name: &'static str, value: f64 },
    #[error("uncertainty must be finite and non-negative, got {0}")]
    InvalidUncertainty(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyLimit {
    /// Probability per hour.
    pub lambda: f64,
    pub label: String,
}

impl SafetyLimit {
    pub fn new(lambda: f64, label: impl Into<String>) -> Result<Self, SafetyError> {
        let limit = Self {
            lambda,
            label: label.into(),
        };
        limit.validate()?;
        Ok(limit)
    }

    pub fn iso_13849() -> Self {
        Self {
            lambda: ISO_13849_PFH_MAX,
            label: "ISO 13849 PFH_max".into(),
        }
    }

    pub fn validate(&self) -> Result<(), SafetyError> {
        if self.lambda > 0.0 && self.lambda.is_finite() {
            Ok(())
        } else {
            Err(SafetyError::InvalidLimit(self.lambda))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskModel {
    /// Harm severity, constant per incident.
    #[serde(default = "unit_severity")]
    pub severity_constant: f64,
    /// Converts an uncertainty into a probability per hour. Mandatory.
    pub l_bio: f64,
}

fn unit_severity() -> f64 {
    1.0
}

impl RiskModel {
    pub fn validate(&self) -> Result<(), SafetyError> {
        for (name, value) in [("severity_constant", self.severity_constant), ("l_bio", self.l_bio)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(SafetyError::InvalidRiskModel { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    /// Mapped dangerous-failure probability per hour.
    pub pfh: f64,
    /// `u_C * l_bio`.
    pub r: f64,
    pub pass: bool,
    pub limit: SafetyLimit,
    /// `log10(lambda / pfh)`; negative when the limit is exceeded. Written as
    /// the string `"inf"` when `pfh` is zero.
    #[serde(with = "unbounded")]
    pub margin_orders: f64,
    pub mapping: String,
}

mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid margin '{t}'"))),
        }
    }
}

/// Reads a relative uncertainty as a probability per hour.
pub fn map_to_pfh(u_relative: f64) -> Result<f64, SafetyError> {
    if !(0.0..=1.0).contains(&u_relative) {
        return Err(SafetyError::OutOfRange(u_relative));
    }
    Ok(u_relative)
}

/// `r = u_C * l_bio`, passing when `r <= lambda`.
pub fn check_limit(u_c: f64, model: &RiskModel, limit: &SafetyLimit) -> Result<SafetyVerdict, SafetyError> {
    model.validate()?;
    limit.validate()?;
    if !(u_c >= 0.0 && u_c.is_finite()) {
        return Err(SafetyError::InvalidUncertainty(u_c));
    }
    let r = u_c * model.l_bio;
    let pfh = r;
    Ok(SafetyVerdict {
        pfh,
        r,
        pass: r <= limit.lambda,
        limit: limit.clone(),
        margin_orders: (limit.lambda / pfh).log10(),
        mapping: DIRECT_MAPPING.into(),
    })
}

/// Probability that the true human–robot distance is at most `d_min`, for a
/// Gaussian centred on the measured distance with standard deviation `u_d`.
pub fn distance_constraint_probability(d_hr: f64, u_d: f64, d_min: f64) -> f64 {
    if u_d <= 0.0 {
        return if d_hr <= d_min { 1.0 } else { 0.0 };
    }
    standard_normal_cdf((d_min - d_hr) / u_d)
}

fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}
