//! Synthetic ground-truth scenes and the angular / landmark error metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{angular_error, CameraIntrinsics, Landmarks2D};
use crate::error::{GazeError, Result};
use crate::exec::{map_indexed, Execution};
use crate::fitter::{aim_at, fit, init_params, FitConfig, FitResult, ForwardModel, ParamVector};
use crate::losses::Observations;
use crate::model::{pose_point, rodrigues, shape_vertex, LinearBasis};
use crate::scalar::norm3;
use crate::vergence::{gaze_vector, GazeAngles};

const MAX_SCENE_ATTEMPTS: usize = 200;

/// Sampling box for synthetic scenes. Head pose is in the camera frame; the
/// target offset is measured from the midpoint of the eyeball centres, with
/// the head facing +z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneRanges {
    /// Head depth `T_z`, meters.
    pub depth: [f64; 2],
    /// `|T_x|, |T_y|` bound, meters.
    pub lateral: f64,
    /// Per-axis bound on the axis-angle head rotation, radians.
    pub rotation: f64,
    pub log_scale_sigma: f64,
    pub shape_sigma: f64,
    pub color_sigma: f64,
    /// Forward distance of the target from the eyes, meters.
    pub target_distance: [f64; 2],
    /// Target lateral offset bound as a fraction of its forward distance.
    pub target_spread: f64,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            depth: [0.8, 1.2],
            lateral: 0.1,
            rotation: 0.15,
            log_scale_sigma: 0.03,
            shape_sigma: 0.0,
            color_sigma: 0.0,
            target_distance: [0.3, 1.5],
            target_spread: 0.4,
        }
    }
}

impl SceneRanges {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(GazeError::InfeasibleConfig(msg.to_string()));
        if !(self.depth[0] > 0.0 && self.depth[1] >= self.depth[0]) {
            return bad("depth range must be positive and ordered");
        }
        if !(self.target_distance[0] > 0.0 && self.target_distance[1] >= self.target_distance[0]) {
            return bad("target distance must be positive and ordered");
        }
        let nonneg = [
            self.lateral,
            self.rotation,
            self.log_scale_sigma,
            self.shape_sigma,
            self.color_sigma,
            self.target_spread,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("ranges and sigmas must be finite and nonnegative");
        }
        Ok(())
    }
}

/// Observation noise; all zero gives exact observations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseLevels {
    /// Landmark σ, pixels.
    pub landmark_px: f64,
    /// Per-axis target σ, meters.
    pub target_m: f64,
}

impl NoiseLevels {
    pub fn validate(&self) -> Result<()> {
        if !(self.landmark_px >= 0.0 && self.target_m >= 0.0)
            || !self.landmark_px.is_finite()
            || !self.target_m.is_finite()
        {
            return Err(GazeError::InfeasibleConfig(
                "noise sigmas must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub true_params: ParamVector,
    pub obs: Observations,
    pub noise: NoiseLevels,
    pub seed: u64,
}

impl SyntheticScene {
    /// True gaze directions, `[left, right]`.
    pub fn true_gaze(&self) -> [[f64; 3]; 2] {
        self.true_params.gaze_angles().map(gaze_vector)
    }
}

/// Samples a head and target, aims both eyes exactly at the target, and
/// derives the observations.
///
/// The gaze supervision is the direction from each true eyeball centre to the
/// observed (possibly noisy) target, as a dataset that records a target
/// position would provide it.
pub fn generate_scene(
    basis: &LinearBasis,
    cam: &CameraIntrinsics,
    ranges: &SceneRanges,
    noise: &NoiseLevels,
    seed: u64,
) -> Result<SyntheticScene> {
    ranges.validate()?;
    noise.validate()?;
    cam.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let model = ForwardModel::new(basis, cam);

    for _ in 0..MAX_SCENE_ATTEMPTS {
        let z_s: Vec<f64> = (0..basis.shape_dim())
            .map(|_| ranges.shape_sigma * unit.sample(&mut rng))
            .collect();
        let z_a: Vec<f64> = (0..basis.color_dim())
            .map(|_| ranges.color_sigma * unit.sample(&mut rng))
            .collect();
        let r = [0; 3].map(|_| uniform(&mut rng, -ranges.rotation, ranges.rotation));
        let t = [
            uniform(&mut rng, -ranges.lateral, ranges.lateral),
            uniform(&mut rng, -ranges.lateral, ranges.lateral),
            uniform(&mut rng, ranges.depth[0], ranges.depth[1]),
        ];
        let log_f = ranges.log_scale_sigma * unit.sample(&mut rng);
        let dist = uniform(
            &mut rng,
            ranges.target_distance[0],
            ranges.target_distance[1],
        );
        let spread = ranges.target_spread * dist;
        let offset = [
            uniform(&mut rng, -spread, spread),
            uniform(&mut rng, -spread, spread),
            dist,
        ];

        let scale = log_f.exp();
        let rot = rodrigues(r);
        if basis
            .landmark_indices
            .iter()
            .any(|&v| pose_point(&rot, scale, t, shape_vertex(basis, v, &z_s))[2] <= 1e-3)
        {
            continue;
        }
        let mut params = ParamVector::from_parts(&z_s, &z_a, r, t, log_f, [0.0; 4]);
        let origins = model.forward(params.as_slice())?.origins;
        let mid = [0, 1, 2].map(|i| 0.5 * (origins[0][i] + origins[1][i]));
        let target = [0, 1, 2].map(|i| mid[i] + offset[i]);
        let Some(z_e) = aim_at(origins, target) else {
            continue;
        };
        params.set_z_e(z_e);

        let fwd = model.forward(params.as_slice())?;
        let mut landmarks = fwd.landmarks;
        if noise.landmark_px > 0.0 {
            for p in landmarks.iter_mut() {
                p[0] += noise.landmark_px * unit.sample(&mut rng);
                p[1] += noise.landmark_px * unit.sample(&mut rng);
            }
        }
        let mut target_obs = target;
        if noise.target_m > 0.0 {
            for v in target_obs.iter_mut() {
                *v += noise.target_m * unit.sample(&mut rng);
            }
        }
        let gaze_gt = if noise.target_m > 0.0 {
            let Some(z) = aim_at(origins, target_obs) else {
                continue;
            };
            [GazeAngles::new(z[0], z[1]), GazeAngles::new(z[2], z[3])]
        } else {
            params.gaze_angles()
        };
        let obs = Observations {
            landmarks_gt: Landmarks2D::new(landmarks)?,
            target_gt: Some(target_obs),
            origins_gt: Some(origins.to_vec()),
            gaze_gt: Some(gaze_gt),
        };
        return Ok(SyntheticScene {
            true_params: params,
            obs,
            noise: *noise,
            seed,
        });
    }
    Err(GazeError::InfeasibleConfig(format!(
        "no valid scene found in {MAX_SCENE_ATTEMPTS} attempts"
    )))
}

/// `count` scenes with seeds `seed, seed + 1, …`.
pub fn generate_scenes(
    basis: &LinearBasis,
    cam: &CameraIntrinsics,
    ranges: &SceneRanges,
    noise: &NoiseLevels,
    seed: u64,
    count: usize,
    mode: Execution,
) -> Result<Vec<SyntheticScene>> {
    let seeds: Vec<u64> = (0..count as u64).map(|i| seed.wrapping_add(i)).collect();
    map_indexed(&seeds, mode, |_, &s| {
        generate_scene(basis, cam, ranges, noise, s)
    })
    .into_iter()
    .collect()
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitMode {
    /// Start from [`init_params`].
    Cold,
    /// Start from the true parameters with every gaze angle moved by
    /// `±gaze_deg` and the translation moved `translation_m` in a random
    /// direction; signs and direction are seeded by the scene seed.
    PerturbedTruth { gaze_deg: f64, translation_m: f64 },
}

impl Default for InitMode {
    fn default() -> Self {
        InitMode::Cold
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub fit: FitConfig,
    pub init: InitMode,
}

pub fn initial_guess(
    scene: &SyntheticScene,
    basis: &LinearBasis,
    cam: &CameraIntrinsics,
    mode: InitMode,
) -> Result<ParamVector> {
    match mode {
        InitMode::Cold => init_params(&scene.obs, basis, cam),
        InitMode::PerturbedTruth {
            gaze_deg,
            translation_m,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x5eed_1417_u64);
            let mut p = scene.true_params.clone();
            let d = gaze_deg.to_radians();
            let z = p.z_e().map(|v| v + if rng.gen::<bool>() { d } else { -d });
            p.set_z_e(z);
            let unit = Normal::new(0.0, 1.0).expect("unit normal");
            let dir = loop {
                let v = [0; 3].map(|_| unit.sample(&mut rng));
                let n = norm3(v);
                if n > 1e-6 {
                    break v.map(|x| x / n);
                }
            };
            let t = p.t();
            p.set_t([0, 1, 2].map(|i| t[i] + translation_m * dir[i]));
            Ok(p)
        }
    }
}

/// Fits one scene from the configured initial guess.
pub fn fit_scene(
    scene: &SyntheticScene,
    basis: &LinearBasis,
    cam: &CameraIntrinsics,
    config: &BenchConfig,
) -> Result<FitResult> {
    let init = initial_guess(scene, basis, cam, config.init)?;
    fit(&scene.obs, basis, cam, &init, &config.fit)
}

/// Per-scene metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    /// Degrees, `[left, right]`.
    pub angular_error: [f64; 2],
    /// Mean Euclidean distance per landmark, pixels.
    pub landmark_px: f64,
    /// `landmark_px` over the projected outer-corner distance.
    pub normalized_landmark: f64,
}

/// Compares fitted parameters with a scene's truth and observations.
pub fn scene_metrics(
    scene: &SyntheticScene,
    fitted: &ParamVector,
    basis: &LinearBasis,
    cam: &CameraIntrinsics,
) -> Result<SceneMetrics> {
    let truth = scene.true_gaze();
    let pred = fitted.gaze_angles().map(gaze_vector);
    let angular_error = [
        angular_error(pred[0], truth[0])?,
        angular_error(pred[1], truth[1])?,
    ];

    let fwd = ForwardModel::new(basis, cam).forward(fitted.as_slice())?;
    let obs = scene.obs.landmarks_gt.points();
    let landmark_px = fwd
        .landmarks
        .iter()
        .zip(obs)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .sum::<f64>()
        / obs.len() as f64;

    let corners = outer_corners_px(fitted, basis, cam)?;
    let corner_dist =
        ((corners[0][0] - corners[1][0]).powi(2) + (corners[0][1] - corners[1][1]).powi(2)).sqrt();
    if !(corner_dist > 0.0) {
        return Err(GazeError::DegenerateLandmarks(
            "outer eye corners coincide".into(),
        ));
    }
    Ok(SceneMetrics {
        angular_error,
        landmark_px,
        normalized_landmark: landmark_px / corner_dist,
    })
}

/// Projected outer corners of the left and right eye.
pub fn outer_corners_px(
    params: &ParamVector,
    basis: &LinearBasis,
    cam: &CameraIntrinsics,
) -> Result<[[f64; 2]; 2]> {
    let rot = rodrigues(params.r());
    let (f, t) = (params.f(), params.t());
    let mut out = [[0.0; 2]; 2];
    for (o, v) in out
        .iter_mut()
        .zip([basis.left_eye_outer_corner, basis.right_eye_outer_corner])
    {
        *o = cam.project_generic(pose_point(&rot, f, t, shape_vertex(basis, v, params.z_s())))?;
    }
    Ok(out)
}

/// Aggregate over scenes. Angular statistics pool both eyes. Statistics are
/// NaN when every scene failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub angular_mean: f64,
    /// Population standard deviation.
    pub angular_std: f64,
    pub angular_median: f64,
    pub angular_max: f64,
    pub landmark_px_mean: f64,
    pub normalized_landmark_mean: f64,
    pub scene_count: usize,
    pub failure_count: usize,
}

impl EvalReport {
    pub fn from_metrics(metrics: &[Option<SceneMetrics>]) -> Self {
        let ok: Vec<&SceneMetrics> = metrics.iter().flatten().collect();
        let mut angles: Vec<f64> = ok.iter().flat_map(|m| m.angular_error).collect();
        let n = angles.len() as f64;
        let mean = angles.iter().sum::<f64>() / n;
        let std = (angles.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        angles.sort_by(f64::total_cmp);
        let median = match angles.len() {
            0 => f64::NAN,
            k if k % 2 == 1 => angles[k / 2],
            k => 0.5 * (angles[k / 2 - 1] + angles[k / 2]),
        };
        let m = ok.len() as f64;
        Self {
            angular_mean: mean,
            angular_std: std,
            angular_median: median,
            angular_max: angles.last().copied().unwrap_or(f64::NAN),
            landmark_px_mean: ok.iter().map(|s| s.landmark_px).sum::<f64>() / m,
            normalized_landmark_mean: ok.iter().map(|s| s.normalized_landmark).sum::<f64>() / m,
            scene_count: metrics.len(),
            failure_count: metrics.len() - ok.len(),
        }
    }

    /// Single aligned text row; see [`report_table`].
    fn row(&self, name: &str) -> String {
        format!(
            "{name:<22} {:>8.4} ± {:<8.4} {:>8.4} {:>8.4} {:>10.4} {:>10.5} {:>6} {:>6}",
            self.angular_mean,
            self.angular_std,
            self.angular_median,
            self.angular_max,
            self.landmark_px_mean,
            self.normalized_landmark_mean,
            self.scene_count,
            self.failure_count
        )
    }
}

/// Aligned plain-text table of named reports.
pub fn report_table<'a>(rows: impl IntoIterator<Item = (&'a str, &'a EvalReport)>) -> String {
    let mut out = format!(
        "{:<22} {:>8}   {:<8} {:>8} {:>8} {:>10} {:>10} {:>6} {:>6}\n",
        "config", "mean°", "std°", "median°", "max°", "lm px", "lm norm", "scenes", "failed"
    );
    for (name, report) in rows {
        out.push_str(&report.row(name));
        out.push('\n');
    }
    out
}

/// Scores fitted parameters against their scenes; `None` marks a failed fit.
pub fn evaluate_predictions(
    scenes: &[SyntheticScene],
    predictions: &[Option<ParamVector>],
    basis: &LinearBasis,
    cam: &CameraIntrinsics,
) -> Result<EvalReport> {
    if scenes.len() != predictions.len() {
        return Err(GazeError::DimensionMismatch {
            what: "predictions",
            expected: scenes.len(),
            got: predictions.len(),
        });
    }
    let metrics: Vec<Option<SceneMetrics>> = scenes
        .iter()
        .zip(predictions)
        .map(|(s, p)| {
            p.as_ref()
                .and_then(|p| scene_metrics(s, p, basis, cam).ok())
        })
        .collect();
    Ok(EvalReport::from_metrics(&metrics))
}

/// Output of [`run_benchmark`]: every per-scene fit, in scene order, plus the
/// aggregate.
#[derive(Debug)]
pub struct BenchOutcome {
    pub fits: Vec<Result<FitResult>>,
    pub report: EvalReport,
}

/// Fits every scene and aggregates the metrics. Per-scene failures are
/// counted, never fatal.
pub fn run_benchmark(
    scenes: &[SyntheticScene],
    basis: &LinearBasis,
    cam: &CameraIntrinsics,
    config: &BenchConfig,
    mode: Execution,
) -> Result<BenchOutcome> {
    if scenes.is_empty() {
        return Err(GazeError::InvalidInput("no scenes".into()));
    }
    config.fit.validate()?;
    let fits = map_indexed(scenes, mode, |_, s| fit_scene(s, basis, cam, config));
    let predictions: Vec<Option<ParamVector>> = fits
        .iter()
        .map(|f| f.as_ref().ok().map(|r| r.params.clone()))
        .collect();
    let report = evaluate_predictions(scenes, &predictions, basis, cam)?;
    Ok(BenchOutcome { fits, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub report: EvalReport,
}

pub const ABLATION_ROWS: [&str; 4] = ["baseline (G2)", "vergence only (G3)", "w/o L_o", "full"];

/// Benchmarks the four loss configurations: the gaze-angle group alone, the
/// vergence group alone, everything without the origin loss, and everything.
pub fn ablation_suite(
    scenes: &[SyntheticScene],
    basis: &LinearBasis,
    cam: &CameraIntrinsics,
    config: &BenchConfig,
    mode: Execution,
) -> Result<Vec<AblationRow>> {
    let base = config.fit.weights;
    let mut no_origin = base;
    no_origin.o = 0.0;
    let weights = [
        base.with_groups(false, true, false),
        base.with_groups(false, false, true),
        no_origin,
        base,
    ];
    ABLATION_ROWS
        .iter()
        .zip(weights)
        .map(|(name, w)| {
            let mut cfg = config.clone();
            cfg.fit.weights = w;
            let outcome = run_benchmark(scenes, basis, cam, &cfg, mode)?;
            Ok(AblationRow {
                name: name.to_string(),
                report: outcome.report,
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    report_table(rows.iter().map(|r| (r.name.as_str(), &r.report)))
}
