use gazefit::bench::{
    generate_scenes, run_benchmark, BenchConfig, NoiseLevels, SceneRanges, SyntheticScene,
};
use gazefit::scalar::{norm3, sub3};
use gazefit::synthetic::{synthetic_basis, BasisConfig};
use gazefit::{fit, init_params, CameraIntrinsics, Execution, FitConfig, LinearBasis, LossWeights};

fn scenes(basis: &LinearBasis, landmark_px: f64, count: usize) -> Vec<SyntheticScene> {
    let noise = NoiseLevels {
        landmark_px,
        target_m: 0.0,
    };
    generate_scenes(
        basis,
        &CameraIntrinsics::default(),
        &SceneRanges::default(),
        &noise,
        300,
        count,
        Execution::Parallel,
    )
    .unwrap()
}

#[test]
fn more_landmark_noise_does_not_help() {
    let basis = synthetic_basis(&BasisConfig::default(), 5).unwrap();
    let cam = CameraIntrinsics::default();
    let cfg = BenchConfig::default();
    let clean = run_benchmark(
        &scenes(&basis, 0.0, 20),
        &basis,
        &cam,
        &cfg,
        Execution::Parallel,
    )
    .unwrap();
    let noisy = run_benchmark(
        &scenes(&basis, 2.0, 20),
        &basis,
        &cam,
        &cfg,
        Execution::Parallel,
    )
    .unwrap();
    assert!(noisy.report.angular_mean >= clean.report.angular_mean);
    assert!(noisy.report.landmark_px_mean >= clean.report.landmark_px_mean);
}

#[test]
fn gaze_only_fit_ignores_the_target() {
    let basis = synthetic_basis(&BasisConfig::default(), 5).unwrap();
    let cam = CameraIntrinsics::default();
    let scene = &scenes(&basis, 1.0, 1)[0];
    let config = FitConfig {
        weights: LossWeights::default().with_groups(false, true, false),
        ..FitConfig::default()
    };
    let init = init_params(&scene.obs, &basis, &cam).unwrap();
    let a = fit(&scene.obs, &basis, &cam, &init, &config).unwrap();
    let mut moved = scene.obs.clone();
    let t = moved.target_gt.unwrap();
    moved.target_gt = Some([t[0] + 0.1, t[1] - 0.05, t[2] + 0.2]);
    let b = fit(&moved, &basis, &cam, &init, &config).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.total_trace, b.total_trace);
}

#[test]
fn initial_translation_is_within_ten_percent() {
    let basis = synthetic_basis(&BasisConfig::default(), 5).unwrap();
    let cam = CameraIntrinsics::default();
    for scene in scenes(&basis, 0.0, 20) {
        let init = init_params(&scene.obs, &basis, &cam).unwrap();
        let truth = scene.true_params.t();
        let err = norm3(sub3(init.t(), truth));
        assert!(err <= 0.1 * norm3(truth), "scene {}: {err}", scene.seed);
    }
}
