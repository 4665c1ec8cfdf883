use consuq::config::PipelineConfig;
use consuq::conservation::{ReferencePolicy, VELOCITY};
use consuq::pipeline::ReportStream;
use consuq::synth::{self, shuttle_trajectory, upper_body_bones, Scenario, ScenarioSpec, WalkNoise, WalkScenario};

fn walk(noise: WalkNoise, n_frames: usize) -> ScenarioSpec {
    ScenarioSpec {
        scenario: Scenario::SkeletonWalk(WalkScenario {
            bones: upper_body_bones(),
            trajectory: shuttle_trajectory(&[0.2, 1.4, 0.6, 1.8, 1.0, 0.4, 1.6, 0.8, 1.2, 0.3, 1.7, 0.9], 1.0 / 3.0),
            cyclic: true,
            noise,
            noise_shape: Default::default(),
            frame_rate: 30.0,
        }),
        n_frames,
        seed: 11,
    }
}

fn config(spec: &ScenarioSpec) -> PipelineConfig {
    let mut config = PipelineConfig::new(spec.conservation_specs(ReferencePolicy::GroundTruth));
    config.window_size = 300;
    config.bootstrap.resamples = 200;
    config.hypothesis.permutations = 500;
    config.hypothesis.covariates = vec![VELOCITY.into()];
    config
}

#[test]
fn noiseless_walk_has_zero_uncertainty() {
    let spec = walk(WalkNoise::Constant { sigma: 0.0 }, 600);
    let mut config = config(&spec);
    config.hypothesis.covariates.clear();
    let reports: Vec<_> = ReportStream::new(config, synth::FrameStream::new(&spec).unwrap())
        .unwrap()
        .collect();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert!(r.errors.is_empty(), "{:?}", r.errors);
        assert_eq!(r.specs.len(), upper_body_bones().len());
        assert!(r.specs.iter().all(|s| s.estimate.u.abs() < 1e-12));
        assert!(r.pooled.as_ref().unwrap().u.abs() < 1e-12);
    }
}

#[test]
fn velocity_coupled_noise_is_detected() {
    let spec = walk(WalkNoise::VelocityCoupled { sigma0: 0.002, gain: 0.02 }, 300);
    let report = ReportStream::new(config(&spec), synth::FrameStream::new(&spec).unwrap())
        .unwrap()
        .next()
        .unwrap();
    assert!(report.errors.is_empty(), "{:?}", report.errors);
    let rejected = report.hypotheses.iter().filter(|h| h.result.rejected).count();
    assert!(rejected * 2 > report.hypotheses.len(), "{rejected}/{}", report.hypotheses.len());
    assert!(report.dependencies.iter().all(|d| d.report.pearson_r > 0.0));
}

#[test]
fn constant_noise_rarely_rejects() {
    let spec = walk(WalkNoise::Constant { sigma: 0.003 }, 300);
    let report = ReportStream::new(config(&spec), synth::FrameStream::new(&spec).unwrap())
        .unwrap()
        .next()
        .unwrap();
    let rejected = report.hypotheses.iter().filter(|h| h.result.rejected).count();
    assert!(rejected <= 3, "{rejected}/{}", report.hypotheses.len());
}

#[test]
fn truth_matches_noiseless_frames() {
    let spec = walk(WalkNoise::Constant { sigma: 0.0 }, 20);
    let (frames, truth) = synth::generate(&spec).unwrap();
    assert_eq!(truth.timestamps.len(), frames.len());
    for (k, f) in frames.iter().enumerate() {
        assert_eq!(truth.timestamps[k], f.timestamp);
        let consuq::frame::Payload::Skeleton(s) = &f.payload else {
            panic!("skeleton payload expected")
        };
        for (id, obs) in &s.joints {
            let p = truth.true_position(k, *id).unwrap();
            for (a, b) in p.iter().zip(obs.position) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
