//! Measurement frames as they arrive from a sensor stream.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Number of keypoints in the Body25 skeleton model.
pub const BODY25_JOINTS: u8 = 25;

/// Index of a Body25 keypoint, always in `0..25`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct JointId(u8);

impl JointId {
    pub fn new(id: u8) -> Option<Self> {
        (id < BODY25_JOINTS).then_some(Self(id))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl TryFrom<u8> for JointId {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Self::new(value).ok_or_else(|| format!("joint id {value} outside Body25 range 0..=24"))
    }
}

impl From<JointId> for u8 {
    fn from(id: JointId) -> u8 {
        id.0
    }
}

impl fmt::Display for JointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointObservation {
    /// Meters, camera/world frame.
    pub position: [f64; 3],
    /// Detector confidence in `[0, 1]` when the source reports one.
    pub confidence: Option<f64>,
}

impl JointObservation {
    pub fn new(position: [f64; 3]) -> Self {
        Self {
            position,
            confidence: None,
        }
    }

    /// A joint is usable when its position is finite and the detector did not
    /// report zero confidence (OpenPose emits `c = 0` for undetected keypoints).
    pub fn is_valid(&self) -> bool {
        self.position.iter().all(|v| v.is_finite()) && self.confidence.is_none_or(|c| c > 0.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkeletonFrame {
    pub joints: BTreeMap<JointId, JointObservation>,
}

impl SkeletonFrame {
    /// Returns the joint position if the joint is present and valid.
    pub fn position(&self, id: JointId) -> Option<[f64; 3]> {
        self.joints
            .get(&id)
            .filter(|j| j.is_valid())
            .map(|j| j.position)
    }
}

/// One sweep of a 2D laser scanner. Angles are degrees at this boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanFrame {
    pub angle_start: f64,
    pub angle_step: f64,
    /// Meters; `None` marks a beam without a valid return.
    pub ranges: Vec<Option<f64>>,
}

impl ScanFrame {
    pub fn beam_count(&self) -> usize {
        self.ranges.len()
    }

    pub fn beam_angle_rad(&self, beam: usize) -> f64 {
        (self.angle_start + self.angle_step * beam as f64).to_radians()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenericFrame {
    pub channels: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Skeleton(SkeletonFrame),
    Scan(ScanFrame),
    Generic(GenericFrame),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadKind {
    Skeleton,
    Scan,
    Generic,
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PayloadKind::Skeleton => "skeleton",
            PayloadKind::Scan => "scan",
            PayloadKind::Generic => "generic",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFrame {
    /// Seconds, monotone non-decreasing within a stream.
    pub timestamp: f64,
    pub payload: Payload,
}

impl MeasurementFrame {
    pub fn skeleton(timestamp: f64, frame: SkeletonFrame) -> Self {
        Self {
            timestamp,
            payload: Payload::Skeleton(frame),
        }
    }

    pub fn scan(timestamp: f64, frame: ScanFrame) -> Self {
        Self {
            timestamp,
            payload: Payload::Scan(frame),
        }
    }

    pub fn generic(timestamp: f64, frame: GenericFrame) -> Self {
        Self {
            timestamp,
            payload: Payload::Generic(frame),
        }
    }

    pub fn kind(&self) -> PayloadKind {
        match self.payload {
            Payload::Skeleton(_) => PayloadKind::Skeleton,
            Payload::Scan(_) => PayloadKind::Scan,
            Payload::Generic(_) => PayloadKind::Generic,
        }
    }

    pub fn as_skeleton(&self) -> Option<&SkeletonFrame> {
        match &self.payload {
            Payload::Skeleton(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_scan(&self) -> Option<&ScanFrame> {
        match &self.payload {
            Payload::Scan(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_generic(&self) -> Option<&GenericFrame> {
        match &self.payload {
            Payload::Generic(g) => Some(g),
            _ => None,
        }
    }
}

/// Angular layout of a scanner sweep, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub field_of_view: f64,
    pub angle_step: f64,
}

impl ScanGeometry {
    /// SICK S3000 layout: 275° field of view sampled every 0.385°.
    pub const S3000: ScanGeometry = ScanGeometry {
        field_of_view: 275.0,
        angle_step: 0.385,
    };

    /// Beams in one sweep, counting both edges of the field of view.
    pub fn beam_count(&self) -> usize {
        // Small epsilon so an exact multiple is not lost to rounding.
        ((self.field_of_view / self.angle_step) + 1e-9).floor() as usize + 1
    }

    pub fn angle_start(&self) -> f64 {
        -self.field_of_view / 2.0
    }
}

impl Default for ScanGeometry {
    fn default() -> Self {
        Self::S3000
    }
}
