use proptest::prelude::*;

use restage::io::{read_bundle, read_bundle_with, write_bundle, write_bundle_with, RunConfig};
use restage::losses::LossWeights;
use restage::optim::{fit, OptimConfig};
use restage::restage::{restage, rewind_concat, Ablation, FrameSource};
use restage::synth::{attach_benchmark, gen_pair, gen_scene, occluded_arm_pair, MotionScript, PartMotion, SceneKind, SceneSpec};

fn quick() -> (LossWeights, OptimConfig) {
    (
        LossWeights {
            num_bases: 4,
            ..LossWeights::default()
        },
        OptimConfig {
            init_epochs: 25,
            refine_epochs: 25,
            ..OptimConfig::default()
        },
    )
}

#[test]
fn fit_on_a_reloaded_bundle_matches_the_original() {
    let spec = SceneSpec {
        num_points: 60,
        frames: 5,
        seed: 4,
        ..SceneSpec::default()
    };
    let (bundle, _) = gen_scene(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&bundle, dir.path()).unwrap();
    let reloaded = read_bundle(dir.path()).unwrap();
    assert_eq!(reloaded, bundle);

    let (weights, config) = quick();
    let (a, _, ra) = fit(&bundle, &weights, &config).unwrap();
    let (b, _, rb) = fit(&reloaded, &weights, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.stages, rb.stages);
}

#[test]
fn combined_bundle_round_trips_with_its_boundary() {
    let pair = occluded_arm_pair(3).unwrap();
    let combined = rewind_concat(&pair.base, &pair.driving).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundle_with(&combined.bundle, dir.path(), Some(combined.t1)).unwrap();
    let (bundle, t1) = read_bundle_with(dir.path()).unwrap();
    assert_eq!(bundle, combined.bundle);
    assert_eq!(t1, Some(combined.t1));
}

#[test]
fn restaged_model_starts_at_the_shared_frame() {
    let pair = attach_benchmark(1, 5).unwrap();
    let (weights, config) = quick();
    let r = restage(&pair.base, &pair.driving, &weights, &config, Ablation::none()).unwrap();
    assert_eq!(r.model.frame_count(), pair.driving.frame_count());
    assert_eq!(r.report.t1, pair.base.frame_count());
    assert_eq!(r.report.combined_frames, pair.base.frame_count() + pair.driving.frame_count() - 1);
    assert!(r.report.t_cano < r.report.t1);
    assert!(r.model.foreground_count() < r.model.splats().len());
    // Background splats never move.
    for (i, s) in r.model.splats().iter().enumerate() {
        if !s.is_foreground {
            for t in 0..r.model.frame_count() {
                assert_eq!(r.model.deform(i, t).unwrap(), s.mu);
            }
        }
    }
}

#[test]
fn ablation_switches_are_honoured() {
    let pair = occluded_arm_pair(6).unwrap();
    let (weights, config) = quick();
    let no_bt = restage(&pair.base, &pair.driving, &weights, &config, "backtracing".parse().unwrap()).unwrap();
    assert_eq!(no_bt.report.inserted, 0);
    assert_eq!(no_bt.report.ablation, vec!["backtracing".to_string()]);
    let no_rig = restage(&pair.base, &pair.driving, &weights, &config, "rigidity".parse().unwrap()).unwrap();
    assert!(no_rig.report.stages.iter().all(|s| s.history.iter().all(|v| v.rigidity == 0.0)));
    assert!("gravity".parse::<Ablation>().is_err());
}

#[test]
fn resolved_config_reproduces_the_same_scene() {
    let mut config = RunConfig::from_toml("seed = 9\n[synth.scene]\nnum_points = 50\nframes = 4\n").unwrap();
    config.apply_seed(9);
    let again = RunConfig::from_toml(&config.to_toml().unwrap()).unwrap();
    assert_eq!(again, config);
    let driving = config.synth.driving.clone().unwrap_or_else(|| config.synth.scene.motion.clone());
    let a = gen_pair(&config.synth.scene, &driving, &config.synth.artifacts).unwrap();
    let b = gen_pair(&again.synth.scene, &driving, &again.synth.artifacts).unwrap();
    assert_eq!(a.driving, b.driving);
    assert_eq!(a.driving_truth, b.driving_truth);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rewind_concat_layout(tb in 2usize..7, td in 2usize..7, seed in 0u64..1000) {
        let spin = |rate: f64| MotionScript {
            parts: vec![PartMotion { axis: [0.2, 1.0, 0.1], rate, ..PartMotion::default() }],
        };
        let spec = SceneSpec {
            kind: SceneKind::RigidBox,
            num_points: 30,
            frames: tb,
            motion: spin(0.02),
            seed,
            ..SceneSpec::default()
        };
        let base = gen_pair(&spec, &spin(0.05), &[]).unwrap().base;
        let driving = gen_pair(&SceneSpec { frames: td, ..spec.clone() }, &spin(0.05), &[]).unwrap().driving;
        let c = rewind_concat(&base, &driving).unwrap();
        prop_assert_eq!(c.frame_count(), tb + td - 1);
        prop_assert_eq!(c.t1, tb);
        for (t, s) in c.sources.iter().enumerate() {
            let expected = if t < tb { FrameSource::RewoundBase(tb - 1 - t) } else { FrameSource::Driving(t + 1 - tb) };
            prop_assert_eq!(*s, expected);
            let (src, f) = match *s {
                FrameSource::RewoundBase(f) => (&base, f),
                FrameSource::Driving(f) => (&driving, f),
            };
            for i in 0..base.track_count() {
                prop_assert_eq!(c.bundle.raw_position(i, t), src.raw_position(i, f));
                prop_assert_eq!(c.bundle.visible(i, t), src.visible(i, f));
            }
        }
    }

    #[test]
    fn bundles_round_trip_bit_exactly(seed in 0u64..10_000, sigma in 0.0f64..0.05) {
        let spec = SceneSpec { num_points: 40, frames: 3, noise_sigma: sigma, seed, ..SceneSpec::default() };
        let (bundle, _) = gen_scene(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&bundle, dir.path()).unwrap();
        prop_assert_eq!(read_bundle(dir.path()).unwrap(), bundle);
    }
}
