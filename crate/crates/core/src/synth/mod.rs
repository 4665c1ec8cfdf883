//! Synthetic measurement streams with known truth, and brute-force oracles.
//!
//! Streams are lazy; a [`GroundTruth`] sidecar records everything needed to
//! re-derive the noise as `frame - truth`.

mod oracle;

pub use oracle::{oracle_expected_uncertainty, oracle_mc_propagation, EstimatorDefinition, OracleError};

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conservation::{ConservationKind, ConservationSpec, JointPair, ReferencePolicy, ScanReference};
use crate::frame::{JointId, JointObservation, MeasurementFrame, ScanFrame, ScanGeometry, SkeletonFrame};
use crate::geom::{distance, norm, sub};
use crate::rng::{self, StreamRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseShape {
    #[default]
    Gaussian,
    /// Uniform with the same standard deviation.
    Uniform,
}

impl NoiseShape {
    /// A zero-mean, unit-variance draw.
    pub(crate) fn draw(self, rng: &mut StreamRng) -> f64 {
        match self {
            NoiseShape::Gaussian => StandardNormal.sample(rng),
            NoiseShape::Uniform => {
                let u: f64 = rand::Rng::random(rng);
                (2.0 * u - 1.0) * 3f64.sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanScenario {
    #[serde(default = "s3000")]
    pub geometry: ScanGeometry,
    /// True ranges; `null` beams are always reported invalid.
    pub range_profile: ScanReference,
    pub noise_sigma: f64,
    #[serde(default)]
    pub noise_shape: NoiseShape,
    #[serde(default = "scan_rate")]
    pub frame_rate: f64,
}

fn s3000() -> ScanGeometry {
    ScanGeometry::S3000
}

fn scan_rate() -> f64 {
    25.0
}

fn walk_rate() -> f64 {
    30.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bone {
    pub a: JointId,
    pub b: JointId,
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    /// Seconds.
    pub t: f64,
    pub position: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WalkNoise {
    Constant { sigma: f64 },
    /// Per-axis standard deviation `sigma0 + gain * speed`.
    VelocityCoupled { sigma0: f64, gain: f64 },
}

impl WalkNoise {
    pub fn scale(&self, speed: f64) -> f64 {
        match *self {
            WalkNoise::Constant { sigma } => sigma,
            WalkNoise::VelocityCoupled { sigma0, gain } => sigma0 + gain * speed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkScenario {
    pub bones: Vec<Bone>,
    /// Root path, linear between waypoints. Must start at `t = 0`.
    pub trajectory: Vec<Waypoint>,
    /// Restart the path after the last waypoint instead of stopping there.
    #[serde(default)]
    pub cyclic: bool,
    pub noise: WalkNoise,
    #[serde(default)]
    pub noise_shape: NoiseShape,
    #[serde(default = "walk_rate")]
    pub frame_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scenario {
    StaticScan(ScanScenario),
    /// The scene recedes by `drift_per_frame` meters each frame.
    DriftingScan {
        #[serde(flatten)]
        scan: ScanScenario,
        drift_per_frame: f64,
    },
    SkeletonWalk(WalkScenario),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(flatten)]
    pub scenario: Scenario,
    pub n_frames: usize,
    pub seed: u64,
}

/// Standing Body25 pose, meters, y up. Only directions are used.
const BODY25_TEMPLATE: [[f64; 3]; 25] = [
    [0.0, 1.60, 0.08],
    [0.0, 1.45, 0.0],
    [-0.18, 1.43, 0.0],
    [-0.22, 1.15, 0.0],
    [-0.24, 0.90, 0.02],
    [0.18, 1.43, 0.0],
    [0.22, 1.15, 0.0],
    [0.24, 0.90, 0.02],
    [0.0, 0.95, 0.0],
    [-0.10, 0.93, 0.0],
    [-0.11, 0.50, 0.02],
    [-0.11, 0.08, 0.0],
    [0.10, 0.93, 0.0],
    [0.11, 0.50, 0.02],
    [0.11, 0.08, 0.0],
    [-0.03, 1.64, 0.07],
    [0.03, 1.64, 0.07],
    [-0.07, 1.62, 0.0],
    [0.07, 1.62, 0.0],
    [0.13, 0.0, 0.15],
    [0.16, 0.0, 0.13],
    [0.11, 0.0, -0.04],
    [-0.13, 0.0, 0.15],
    [-0.16, 0.0, 0.13],
    [-0.11, 0.0, -0.04],
];

fn joint(id: u8) -> JointId {
    JointId::new(id).expect("valid Body25 id")
}

/// Upper-body bones with typical adult lengths.
pub fn upper_body_bones() -> Vec<Bone> {
    [(1, 8, 0.52), (1, 2, 0.18), (2, 3, 0.29), (3, 4, 0.25), (1, 5, 0.18), (5, 6, 0.29), (6, 7, 0.25)]
        .into_iter()
        .map(|(a, b, length)| Bone {
            a: joint(a),
            b: joint(b),
            length,
        })
        .collect()
}

/// Walk along x through `speeds` (m/s), then back through the same speeds to
/// the start, one segment per speed. Closed, so it can be cycled.
pub fn shuttle_trajectory(speeds: &[f64], segment_duration: f64) -> Vec<Waypoint> {
    let mut t = 0.0;
    let mut x = 0.0;
    let mut points = vec![Waypoint {
        t,
        position: [0.0, 0.0, 2.0],
    }];
    for (dir, v) in speeds.iter().map(|v| (1.0, v)).chain(speeds.iter().map(|v| (-1.0, v))) {
        t += segment_duration;
        x += dir * v * segment_duration;
        points.push(Waypoint {
            t,
            position: [x, 0.0, 2.0],
        });
    }
    points
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let invalid = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        match &self.scenario {
            Scenario::StaticScan(scan) | Scenario::DriftingScan { scan, .. } => {
                if !(scan.noise_sigma >= 0.0 && scan.noise_sigma.is_finite()) {
                    return invalid("noise_sigma must be finite and non-negative");
                }
                if !(scan.frame_rate > 0.0) {
                    return invalid("frame_rate must be positive");
                }
                if !(scan.geometry.angle_step > 0.0 && scan.geometry.field_of_view > 0.0) {
                    return invalid("scan geometry must be positive");
                }
                let profile = scan
                    .range_profile
                    .resolve(scan.geometry.beam_count())
                    .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
                if profile.iter().flatten().any(|r| !(*r > 0.0 && r.is_finite())) {
                    return invalid("range_profile must be positive");
                }
                if let Scenario::DriftingScan { drift_per_frame, .. } = &self.scenario {
                    if !drift_per_frame.is_finite() {
                        return invalid("drift_per_frame must be finite");
                    }
                }
            }
            Scenario::SkeletonWalk(walk) => {
                if !(walk.frame_rate > 0.0) {
                    return invalid("frame_rate must be positive");
                }
                if walk.bones.is_empty() {
                    return invalid("at least one bone is required");
                }
                for bone in &walk.bones {
                    if bone.a == bone.b {
                        return invalid("a bone joins two distinct joints");
                    }
                    if !(bone.length > 0.0 && bone.length.is_finite()) {
                        return invalid("bone lengths must be positive");
                    }
                }
                let (s0, s1) = match walk.noise {
                    WalkNoise::Constant { sigma } => (sigma, 0.0),
                    WalkNoise::VelocityCoupled { sigma0, gain } => (sigma0, gain),
                };
                if !(s0 >= 0.0 && s1 >= 0.0 && s0.is_finite() && s1.is_finite()) {
                    return invalid("noise parameters must be finite and non-negative");
                }
                match walk.trajectory.first() {
                    None => return invalid("trajectory needs at least one waypoint"),
                    Some(w) if w.t != 0.0 => return invalid("trajectory must start at t = 0"),
                    _ => {}
                }
                if walk.trajectory.windows(2).any(|w| !(w[1].t > w[0].t)) {
                    return invalid("waypoint times must be strictly increasing");
                }
                if walk.cyclic && walk.trajectory.len() < 2 {
                    return invalid("a cyclic trajectory needs two waypoints");
                }
                rigid_pose(&walk.bones)?;
            }
        }
        Ok(())
    }

    /// Conservation specs matching the scenario's truth.
    pub fn conservation_specs(&self, policy: ReferencePolicy) -> Vec<ConservationSpec> {
        match &self.scenario {
            Scenario::StaticScan(scan) => vec![scan_spec(scan, 0.0, policy)],
            Scenario::DriftingScan { scan, drift_per_frame } => {
                vec![scan_spec(scan, drift_per_frame * scan.frame_rate, policy)]
            }
            Scenario::SkeletonWalk(walk) => walk
                .bones
                .iter()
                .map(|b| ConservationSpec {
                    id: format!("bone-{}-{}", b.a.index(), b.b.index()),
                    kind: ConservationKind::JointPairDistance {
                        pairs: vec![JointPair(b.a, b.b)],
                        reference: vec![Some(b.length)],
                    },
                    reference_policy: policy,
                })
                .collect(),
        }
    }
}

fn scan_spec(scan: &ScanScenario, rate: f64, policy: ReferencePolicy) -> ConservationSpec {
    ConservationSpec {
        id: "scan".into(),
        kind: ConservationKind::StaticScan {
            reference: Some(scan.range_profile.clone()),
            max_range: crate::conservation::DEFAULT_MAX_RANGE,
            reference_rate: rate,
        },
        reference_policy: policy,
    }
}

/// Joint offsets from the first bone's first joint, honouring every bone
/// length exactly.
fn rigid_pose(bones: &[Bone]) -> Result<BTreeMap<JointId, [f64; 3]>, SynthError> {
    let dir = |a: JointId, b: JointId| {
        let d = sub(BODY25_TEMPLATE[b.index()], BODY25_TEMPLATE[a.index()]);
        let n = norm(d);
        [d[0] / n, d[1] / n, d[2] / n]
    };
    let mut pose: BTreeMap<JointId, [f64; 3]> = BTreeMap::new();
    let mut pending: Vec<&Bone> = bones.iter().collect();
    let mut next_root = 0.0;
    while !pending.is_empty() {
        let before = pending.len();
        pending.retain(|bone| {
            match (pose.get(&bone.a).copied(), pose.get(&bone.b).copied()) {
                (Some(pa), None) => {
                    let d = dir(bone.a, bone.b);
                    pose.insert(bone.b, [pa[0] + bone.length * d[0], pa[1] + bone.length * d[1], pa[2] + bone.length * d[2]]);
                    false
                }
                (None, Some(pb)) => {
                    let d = dir(bone.a, bone.b);
                    pose.insert(bone.a, [pb[0] - bone.length * d[0], pb[1] - bone.length * d[1], pb[2] - bone.length * d[2]]);
                    false
                }
                _ => true,
            }
        });
        // Bones whose joints were both placed by other bones must agree.
        let mut closed = Vec::new();
        pending.retain(|bone| match (pose.get(&bone.a), pose.get(&bone.b)) {
            (Some(pa), Some(pb)) => {
                closed.push((**bone, distance(*pa, *pb)));
                false
            }
            _ => true,
        });
        for (bone, d) in closed {
            if (d - bone.length).abs() > 1e-9 * bone.length.max(1.0) {
                return Err(SynthError::InvalidSpec(format!(
                    "bone {}-{} closes a loop with inconsistent length",
                    bone.a.index(),
                    bone.b.index()
                )));
            }
        }
        if pending.len() == before {
            // Disconnected component: start a new root beside the last one.
            let bone = pending[0];
            pose.insert(bone.a, [next_root + 1.0, 0.0, 0.0]);
            next_root += 1.0;
        }
    }
    Ok(pose)
}

/// Position and speed of the root at `t`.
fn root_at(walk: &WalkScenario, t: f64) -> ([f64; 3], f64) {
    let path = &walk.trajectory;
    let last = path[path.len() - 1];
    let t = if walk.cyclic && t >= last.t { t % last.t } else { t };
    if t >= last.t {
        return (last.position, 0.0);
    }
    let i = path.partition_point(|w| w.t <= t) - 1;
    let (a, b) = (path[i], path[i + 1]);
    let f = (t - a.t) / (b.t - a.t);
    let d = sub(b.position, a.position);
    (
        [a.position[0] + f * d[0], a.position[1] + f * d[1], a.position[2] + f * d[2]],
        norm(d) / (b.t - a.t),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TruthDetail {
    Scan {
        /// Beam ranges at frame 0; `null` for invalid beams.
        profile: Vec<Option<f64>>,
        drift_per_frame: f64,
        sigma: f64,
    },
    Skeleton {
        /// Joint offsets from the root; every bone length holds exactly.
        pose: Vec<JointOffset>,
        /// Root position per frame.
        root: Vec<[f64; 3]>,
        /// True root speed per frame, m/s.
        speed: Vec<f64>,
        /// Per-axis noise standard deviation per frame.
        noise_scale: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointOffset {
    pub joint: JointId,
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scenario: ScenarioSpec,
    pub timestamps: Vec<f64>,
    pub detail: TruthDetail,
}

impl GroundTruth {
    pub fn true_range(&self, frame: usize, beam: usize) -> Option<f64> {
        match &self.detail {
            TruthDetail::Scan {
                profile,
                drift_per_frame,
                ..
            } => profile.get(beam).copied().flatten().map(|r| r + drift_per_frame * frame as f64),
            TruthDetail::Skeleton { .. } => None,
        }
    }

    pub fn true_position(&self, frame: usize, joint: JointId) -> Option<[f64; 3]> {
        match &self.detail {
            TruthDetail::Skeleton { pose, root, .. } => {
                let o = pose.iter().find(|p| p.joint == joint)?.offset;
                let r = root.get(frame)?;
                Some([r[0] + o[0], r[1] + o[1], r[2] + o[2]])
            }
            TruthDetail::Scan { .. } => None,
        }
    }
}

enum Source {
    Scan {
        geometry: ScanGeometry,
        profile: Vec<Option<f64>>,
        drift: f64,
        sigma: f64,
        shape: NoiseShape,
        rate: f64,
    },
    Walk {
        walk: WalkScenario,
        pose: BTreeMap<JointId, [f64; 3]>,
    },
}

/// Lazy frame generator. Deterministic per seed.
pub struct FrameStream {
    source: Source,
    rng: StreamRng,
    next: usize,
    n_frames: usize,
}

impl FrameStream {
    pub fn new(spec: &ScenarioSpec) -> Result<Self, SynthError> {
        spec.validate()?;
        let source = match &spec.scenario {
            Scenario::StaticScan(scan) => scan_source(scan, 0.0),
            Scenario::DriftingScan { scan, drift_per_frame } => scan_source(scan, *drift_per_frame),
            Scenario::SkeletonWalk(walk) => Source::Walk {
                walk: walk.clone(),
                pose: rigid_pose(&walk.bones)?,
            },
        };
        Ok(Self {
            source,
            rng: rng::stream(spec.seed),
            next: 0,
            n_frames: spec.n_frames,
        })
    }

    /// True root speed and noise scale at frame `i` (skeleton streams only).
    fn walk_state(walk: &WalkScenario, i: usize) -> ([f64; 3], f64, f64) {
        let t = i as f64 / walk.frame_rate;
        let (root, speed) = root_at(walk, t);
        (root, speed, walk.noise.scale(speed))
    }
}

fn scan_source(scan: &ScanScenario, drift: f64) -> Source {
    Source::Scan {
        geometry: scan.geometry,
        profile: scan
            .range_profile
            .resolve(scan.geometry.beam_count())
            .expect("validated"),
        drift,
        sigma: scan.noise_sigma,
        shape: scan.noise_shape,
        rate: scan.frame_rate,
    }
}

impl Iterator for FrameStream {
    type Item = MeasurementFrame;

    fn next(&mut self) -> Option<MeasurementFrame> {
        if self.next >= self.n_frames {
            return None;
        }
        let i = self.next;
        self.next += 1;
        let rng = &mut self.rng;
        Some(match &self.source {
            Source::Scan {
                geometry,
                profile,
                drift,
                sigma,
                shape,
                rate,
            } => {
                let offset = drift * i as f64;
                let ranges = profile
                    .iter()
                    .map(|r| r.map(|r| r + offset + sigma * shape.draw(rng)))
                    .collect();
                MeasurementFrame::scan(
                    i as f64 / rate,
                    ScanFrame {
                        angle_start: geometry.angle_start(),
                        angle_step: geometry.angle_step,
                        ranges,
                    },
                )
            }
            Source::Walk { walk, pose } => {
                let (root, _, scale) = Self::walk_state(walk, i);
                let joints = pose
                    .iter()
                    .map(|(&id, o)| {
                        let mut p = [root[0] + o[0], root[1] + o[1], root[2] + o[2]];
                        for x in &mut p {
                            *x += scale * walk.noise_shape.draw(rng);
                        }
                        (id, JointObservation::new(p))
                    })
                    .collect();
                MeasurementFrame::skeleton(i as f64 / walk.frame_rate, SkeletonFrame { joints })
            }
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.n_frames - self.next;
        (n, Some(n))
    }
}

/// All frames plus the truth sidecar.
pub fn generate(spec: &ScenarioSpec) -> Result<(Vec<MeasurementFrame>, GroundTruth), SynthError> {
    let stream = FrameStream::new(spec)?;
    let timestamps: Vec<f64>;
    let detail = match &stream.source {
        Source::Scan {
            profile,
            drift,
            sigma,
            rate,
            ..
        } => {
            timestamps = (0..spec.n_frames).map(|i| i as f64 / rate).collect();
            TruthDetail::Scan {
                profile: profile.clone(),
                drift_per_frame: *drift,
                sigma: *sigma,
            }
        }
        Source::Walk { walk, pose } => {
            timestamps = (0..spec.n_frames).map(|i| i as f64 / walk.frame_rate).collect();
            let states: Vec<_> = (0..spec.n_frames).map(|i| FrameStream::walk_state(walk, i)).collect();
            TruthDetail::Skeleton {
                pose: pose.iter().map(|(&joint, &offset)| JointOffset { joint, offset }).collect(),
                root: states.iter().map(|s| s.0).collect(),
                speed: states.iter().map(|s| s.1).collect(),
                noise_scale: states.iter().map(|s| s.2).collect(),
            }
        }
    };
    let frames = stream.collect();
    Ok((
        frames,
        GroundTruth {
            scenario: spec.clone(),
            timestamps,
            detail,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn static_scan(sigma: f64, n: usize, seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            scenario: Scenario::StaticScan(ScanScenario {
                geometry: ScanGeometry::S3000,
                range_profile: ScanReference::Uniform(4.0),
                noise_sigma: sigma,
                noise_shape: NoiseShape::Gaussian,
                frame_rate: 25.0,
            }),
            n_frames: n,
            seed,
        }
    }

    fn walk(noise: WalkNoise, n: usize, seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            scenario: Scenario::SkeletonWalk(WalkScenario {
                bones: upper_body_bones(),
                trajectory: shuttle_trajectory(&[0.4, 1.2, 1.8, 0.2, 0.9, 1.5], 0.5),
                cyclic: true,
                noise,
                noise_shape: NoiseShape::Gaussian,
                frame_rate: 30.0,
            }),
            n_frames: n,
            seed,
        }
    }

    #[test]
    fn noiseless_scan_is_exact() {
        let (frames, truth) = generate(&static_scan(0.0, 5, 1)).unwrap();
        assert_eq!(frames.len(), 5);
        for (i, f) in frames.iter().enumerate() {
            let s = f.as_scan().unwrap();
            assert_eq!(s.beam_count(), 715);
            for (b, r) in s.ranges.iter().enumerate() {
                assert_eq!(*r, truth.true_range(i, b));
            }
        }
    }

    #[test]
    fn per_beam_std_close_to_sigma() {
        let (frames, truth) = generate(&static_scan(0.002, 100, 2)).unwrap();
        let mut sq = 0.0;
        let mut n = 0usize;
        for b in 0..715 {
            let e: Vec<f64> = frames
                .iter()
                .enumerate()
                .map(|(i, f)| f.as_scan().unwrap().ranges[b].unwrap() - truth.true_range(i, b).unwrap())
                .collect();
            let m = e.iter().sum::<f64>() / e.len() as f64;
            sq += e.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (e.len() - 1) as f64;
            n += 1;
        }
        let std = (sq / n as f64).sqrt();
        assert!((std - 0.002).abs() < 0.15 * 0.002, "{std}");
    }

    #[test]
    fn uniform_noise_has_matching_std() {
        let mut spec = static_scan(0.01, 50, 3);
        if let Scenario::StaticScan(s) = &mut spec.scenario {
            s.noise_shape = NoiseShape::Uniform;
        }
        let (frames, truth) = generate(&spec).unwrap();
        let e: Vec<f64> = frames
            .iter()
            .enumerate()
            .flat_map(|(i, f)| {
                let t = &truth;
                f.as_scan().unwrap().ranges.iter().enumerate().map(move |(b, r)| r.unwrap() - t.true_range(i, b).unwrap())
            })
            .collect();
        let var = e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64;
        assert!((var.sqrt() - 0.01).abs() < 0.0003);
        assert!(e.iter().all(|x| x.abs() <= 0.01 * 3f64.sqrt()));
    }

    #[test]
    fn drifting_scan_truth_moves() {
        let mut spec = static_scan(0.0, 4, 4);
        let Scenario::StaticScan(scan) = spec.scenario.clone() else { unreachable!() };
        spec.scenario = Scenario::DriftingScan {
            scan,
            drift_per_frame: 0.001,
        };
        let (frames, truth) = generate(&spec).unwrap();
        assert!((truth.true_range(3, 0).unwrap() - 4.003).abs() < 1e-12);
        assert_eq!(frames[3].as_scan().unwrap().ranges[0], truth.true_range(3, 0));
    }

    #[test]
    fn skeleton_truth_is_rigid() {
        let spec = walk(WalkNoise::Constant { sigma: 0.0 }, 200, 5);
        let (frames, truth) = generate(&spec).unwrap();
        let Scenario::SkeletonWalk(w) = &spec.scenario else { unreachable!() };
        for (i, f) in frames.iter().enumerate() {
            let s = f.as_skeleton().unwrap();
            for bone in &w.bones {
                let d = distance(s.position(bone.a).unwrap(), s.position(bone.b).unwrap());
                assert!((d - bone.length).abs() < 1e-12);
                assert_eq!(s.position(bone.a), truth.true_position(i, bone.a));
            }
        }
    }

    #[test]
    fn velocity_coupled_noise_correlates_with_speed() {
        let spec = walk(
            WalkNoise::VelocityCoupled {
                sigma0: 0.002,
                gain: 0.002,
            },
            900,
            6,
        );
        let (frames, truth) = generate(&spec).unwrap();
        let TruthDetail::Skeleton { speed, noise_scale, .. } = &truth.detail else { unreachable!() };
        let j = joint(1);
        let abs_noise: Vec<f64> = frames
            .iter()
            .enumerate()
            .map(|(i, f)| (f.as_skeleton().unwrap().position(j).unwrap()[0] - truth.true_position(i, j).unwrap()[0]).abs())
            .collect();
        let r = pearson(&abs_noise, speed);
        assert!(r > 0.1, "{r}");
        assert!(noise_scale.iter().zip(speed).all(|(s, v)| (s - (0.002 + 0.002 * v)).abs() < 1e-15));
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn deterministic_per_seed() {
        let a: Vec<_> = FrameStream::new(&static_scan(0.01, 3, 9)).unwrap().collect();
        let b: Vec<_> = FrameStream::new(&static_scan(0.01, 3, 9)).unwrap().collect();
        let c: Vec<_> = FrameStream::new(&static_scan(0.01, 3, 10)).unwrap().collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn trajectory_speeds() {
        let w = WalkScenario {
            bones: upper_body_bones(),
            trajectory: shuttle_trajectory(&[1.0, 0.5], 1.0),
            cyclic: false,
            noise: WalkNoise::Constant { sigma: 0.0 },
            noise_shape: NoiseShape::Gaussian,
            frame_rate: 30.0,
        };
        let (p, v) = root_at(&w, 0.5);
        assert!((p[0] - 0.5).abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        let (_, v) = root_at(&w, 1.5);
        assert!((v - 0.5).abs() < 1e-12);
        let (p, v) = root_at(&w, 2.5);
        assert!((p[0] - 1.0).abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        let (p, v) = root_at(&w, 5.0);
        assert_eq!(v, 0.0);
        assert!(p[0].abs() < 1e-12);
    }

    #[test]
    fn invalid_specs() {
        assert!(static_scan(-1.0, 10, 0).validate().is_err());
        let mut bad = walk(WalkNoise::Constant { sigma: 0.001 }, 10, 0);
        if let Scenario::SkeletonWalk(w) = &mut bad.scenario {
            w.bones.push(Bone {
                a: joint(3),
                b: joint(3),
                length: 0.2,
            });
        }
        assert!(bad.validate().is_err());
        let mut looped = walk(WalkNoise::Constant { sigma: 0.001 }, 10, 0);
        if let Scenario::SkeletonWalk(w) = &mut looped.scenario {
            w.bones.push(Bone {
                a: joint(8),
                b: joint(2),
                length: 0.1,
            });
        }
        assert!(looped.validate().is_err());
    }

    #[test]
    fn scenario_json_roundtrip() {
        let spec = walk(WalkNoise::VelocityCoupled { sigma0: 0.002, gain: 0.001 }, 10, 0);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ScenarioSpec>(&json).unwrap(), spec);
        let mut d = static_scan(0.002, 10, 0);
        let Scenario::StaticScan(scan) = d.scenario.clone() else { unreachable!() };
        d.scenario = Scenario::DriftingScan { scan, drift_per_frame: 1e-3 };
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<ScenarioSpec>(&json).unwrap(), d);
    }
}
