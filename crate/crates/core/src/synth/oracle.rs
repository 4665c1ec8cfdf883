//! Brute-force reference values, written without the statistics engine.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{rigid_pose, Scenario, ScenarioSpec, WalkNoise};
use crate::conservation::ReferencePolicy;
use crate::propagation::SensitivityTerm;
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("oracle supports static scans and constant-noise walks only")]
    UnsupportedSpec,
    #[error("invalid estimator definition: {0}")]
    InvalidDefinition(String),
    #[error(transparent)]
    Synth(#[from] super::SynthError),
}

/// What the pipeline computes per window, restated for the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorDefinition {
    pub window_size: usize,
    pub confidence: f64,
    pub policy: ReferencePolicy,
    /// Simulated windows.
    pub windows: usize,
}

/// Upper `confidence` quantile of the mean absolute deviation of one window,
/// over many simulated windows. Walk scenarios pool every bone.
pub fn oracle_expected_uncertainty(spec: &ScenarioSpec, def: &EstimatorDefinition) -> Result<f64, OracleError> {
    spec.validate()?;
    if def.window_size < 2 || def.windows == 0 || !(def.confidence > 0.0 && def.confidence < 1.0) {
        return Err(OracleError::InvalidDefinition(format!("{def:?}")));
    }
    let mut rng = rng::stream(spec.seed ^ 0x6f72_6163_6c65);
    let w = def.window_size;
    let centre = def.policy == ReferencePolicy::WindowMean;
    let mut mads = Vec::with_capacity(def.windows);

    match &spec.scenario {
        Scenario::StaticScan(scan) => {
            let beams = scan
                .range_profile
                .resolve(scan.geometry.beam_count())
                .map_err(|e| OracleError::InvalidDefinition(e.to_string()))?
                .iter()
                .flatten()
                .count();
            let mut e = vec![0.0; w];
            for _ in 0..def.windows {
                let mut total = 0.0;
                for _ in 0..beams {
                    for x in e.iter_mut() {
                        *x = scan.noise_sigma * scan.noise_shape.draw(&mut rng);
                    }
                    let m = if centre { e.iter().sum::<f64>() / w as f64 } else { 0.0 };
                    total += e.iter().map(|x| (x - m).abs()).sum::<f64>();
                }
                mads.push(total / (beams * w) as f64);
            }
        }
        Scenario::SkeletonWalk(walk) => {
            let WalkNoise::Constant { sigma } = walk.noise else {
                return Err(OracleError::UnsupportedSpec);
            };
            let pose = rigid_pose(&walk.bones)?;
            let joints: Vec<_> = pose.keys().copied().collect();
            let slot = |j| joints.iter().position(|&k| k == j).expect("placed joint");
            let bones: Vec<(usize, usize, [f64; 3], f64)> = walk
                .bones
                .iter()
                .map(|b| {
                    let (pa, pb) = (pose[&b.a], pose[&b.b]);
                    (slot(b.a), slot(b.b), [pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]], b.length)
                })
                .collect();
            let mut noise = vec![[0.0f64; 3]; joints.len()];
            let mut dev = vec![vec![0.0; w]; bones.len()];
            for _ in 0..def.windows {
                #[allow(clippy::needless_range_loop)]
                for f in 0..w {
                    for n in noise.iter_mut() {
                        for x in n.iter_mut() {
                            *x = sigma * walk.noise_shape.draw(&mut rng);
                        }
                    }
                    for (k, &(a, b, v, length)) in bones.iter().enumerate() {
                        let d = [
                            v[0] + noise[b][0] - noise[a][0],
                            v[1] + noise[b][1] - noise[a][1],
                            v[2] + noise[b][2] - noise[a][2],
                        ];
                        dev[k][f] = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - length;
                    }
                }
                let mut total = 0.0;
                for d in &dev {
                    let m = if centre { d.iter().sum::<f64>() / w as f64 } else { 0.0 };
                    total += d.iter().map(|x| (x - m).abs()).sum::<f64>();
                }
                mads.push(total / (bones.len() * w) as f64);
            }
        }
        Scenario::DriftingScan { .. } => return Err(OracleError::UnsupportedSpec),
    }

    mads.sort_by(f64::total_cmp);
    let rank = ((def.confidence * mads.len() as f64).ceil() as usize).clamp(1, mads.len());
    Ok(mads[rank - 1])
}

/// Sample standard deviation of `sum_j s_j * e_j`, `e_j ~ N(0, u_j^2)`.
pub fn oracle_mc_propagation(terms: &[SensitivityTerm], n_samples: usize, seed: u64) -> f64 {
    if n_samples < 2 {
        return 0.0;
    }
    let mut rng = rng::stream(seed);
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..n_samples {
        let y: f64 = terms
            .iter()
            .map(|t| {
                let z: f64 = StandardNormal.sample(&mut rng);
                t.sensitivity * t.u * z
            })
            .sum();
        sum += y;
        sq += y * y;
    }
    let n = n_samples as f64;
    ((sq - sum * sum / n) / (n - 1.0)).max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conservation::ScanReference;
    use crate::frame::ScanGeometry;
    use crate::propagation::UncertaintyKind;
    use crate::synth::{upper_body_bones, NoiseShape, ScanScenario, WalkScenario, Waypoint};

    fn one_beam(sigma: f64) -> ScenarioSpec {
        ScenarioSpec {
            scenario: Scenario::StaticScan(ScanScenario {
                geometry: ScanGeometry {
                    field_of_view: 0.0001,
                    angle_step: 1.0,
                },
                range_profile: ScanReference::Uniform(4.0),
                noise_sigma: sigma,
                noise_shape: NoiseShape::Gaussian,
                frame_rate: 25.0,
            }),
            n_frames: 10,
            seed: 11,
        }
    }

    fn def(policy: ReferencePolicy) -> EstimatorDefinition {
        EstimatorDefinition {
            window_size: 10,
            confidence: 0.95,
            policy,
            windows: 100_000,
        }
    }

    #[test]
    fn unit_sigma_ground_truth_quantile() {
        // 95th percentile of the mean of 10 |N(0,1)| draws, by independent
        // simulation: 1.128.
        let u = oracle_expected_uncertainty(&one_beam(1.0), &def(ReferencePolicy::GroundTruth)).unwrap();
        assert!((u - 1.128).abs() < 0.01, "{u}");
    }

    #[test]
    fn zero_sigma_gives_zero() {
        let u = oracle_expected_uncertainty(&one_beam(0.0), &def(ReferencePolicy::GroundTruth)).unwrap();
        assert_eq!(u, 0.0);
    }

    #[test]
    fn homogeneous_in_sigma() {
        let d = def(ReferencePolicy::WindowMean);
        let a = oracle_expected_uncertainty(&one_beam(0.5), &d).unwrap();
        let b = oracle_expected_uncertainty(&one_beam(1.5), &d).unwrap();
        assert!((b / a - 3.0).abs() < 1e-9, "{}", b / a);
    }

    #[test]
    fn window_mean_is_smaller() {
        let gt = oracle_expected_uncertainty(&one_beam(1.0), &def(ReferencePolicy::GroundTruth)).unwrap();
        let wm = oracle_expected_uncertainty(&one_beam(1.0), &def(ReferencePolicy::WindowMean)).unwrap();
        assert!(wm < gt);
    }

    #[test]
    fn walk_support() {
        let mut spec = ScenarioSpec {
            scenario: Scenario::SkeletonWalk(WalkScenario {
                bones: upper_body_bones()[..1].to_vec(),
                trajectory: vec![Waypoint {
                    t: 0.0,
                    position: [0.0; 3],
                }],
                cyclic: false,
                noise: WalkNoise::Constant { sigma: 0.002 },
                noise_shape: NoiseShape::Gaussian,
                frame_rate: 30.0,
            }),
            n_frames: 10,
            seed: 1,
        };
        let mut d = def(ReferencePolicy::GroundTruth);
        d.windows = 20_000;
        let u = oracle_expected_uncertainty(&spec, &d).unwrap();
        // Single bone: deviation ~ N(0, 2 sigma^2) to first order.
        let scale = 0.002 * 2f64.sqrt();
        assert!(u > 0.9 * scale && u < 1.3 * 1.128 * scale, "{u}");

        if let Scenario::SkeletonWalk(w) = &mut spec.scenario {
            w.noise = WalkNoise::VelocityCoupled { sigma0: 0.001, gain: 0.001 };
        }
        assert_eq!(oracle_expected_uncertainty(&spec, &d), Err(OracleError::UnsupportedSpec));
    }

    fn term(s: f64, u: f64) -> SensitivityTerm {
        SensitivityTerm::new("x", s, u, UncertaintyKind::TypeB)
    }

    #[test]
    fn mc_propagation_examples() {
        let u = oracle_mc_propagation(&[term(1.0, 0.05)], 100_000, 1);
        assert!((u - 0.05).abs() < 0.05 * 0.02);
        let u = oracle_mc_propagation(&[term(1.0, 0.04), term(1.0, 0.05)], 100_000, 2);
        assert!((u - (0.0016f64 + 0.0025).sqrt()).abs() < 0.064 * 0.02, "{u}");
        assert_eq!(oracle_mc_propagation(&[term(1.0, 0.0), term(2.0, 0.0)], 1000, 3), 0.0);
    }

    #[test]
    fn mc_propagation_converges() {
        let terms = [term(1.0, 0.04), term(1.0, 0.05), term(2.0, 0.01)];
        let a = oracle_mc_propagation(&terms, 100_000, 4);
        let b = oracle_mc_propagation(&terms, 200_000, 5);
        assert!((a - b).abs() / b < 0.02);
    }
}
