//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gazefit::bench::{
    ablation_suite, generate_scenes, run_benchmark, BenchConfig, InitMode, NoiseLevels,
    SceneRanges, SyntheticScene,
};
use gazefit::fitter::{evaluate, fit, Problem};
use gazefit::io::{read_json, RunManifest, MANIFEST_FILE};
use gazefit::model::rodrigues;
use gazefit::scalar::{cross3, det3, mat_mul, norm3, transpose};
use gazefit::synthetic::{synthetic_basis, BasisConfig};
use gazefit::vergence::oracle::brute_force_vergence;
use gazefit::vergence::{skew_distance_parallel, solve_vergence_or_parallel, GazeRay};
use gazefit::{
    solve_vergence, CameraIntrinsics, Execution, FitConfig, GazeError, GradientMode, LinearBasis,
    LossWeights, NormPowers,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const BASIS_SEED: u64 = 7;
const SCENE_COUNT: usize = 50;
const CLEAN_SEED: u64 = 1000;
const NOISY_SEED: u64 = 2000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Fixture {
    basis: LinearBasis,
    cam: CameraIntrinsics,
    clean: Vec<SyntheticScene>,
    noisy: Vec<SyntheticScene>,
}

impl Fixture {
    fn new() -> Self {
        let basis = synthetic_basis(&BasisConfig::default(), BASIS_SEED).expect("basis");
        let cam = CameraIntrinsics::default();
        let ranges = SceneRanges::default();
        let clean = generate_scenes(
            &basis,
            &cam,
            &ranges,
            &NoiseLevels::default(),
            CLEAN_SEED,
            SCENE_COUNT,
            Execution::Parallel,
        )
        .expect("clean scenes");
        let noisy_levels = NoiseLevels {
            landmark_px: 1.0,
            target_m: 0.005,
        };
        let noisy = generate_scenes(
            &basis,
            &cam,
            &ranges,
            &noisy_levels,
            NOISY_SEED,
            SCENE_COUNT,
            Execution::Parallel,
        )
        .expect("noisy scenes");
        Self {
            basis,
            cam,
            clean,
            noisy,
        }
    }
}

fn unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
        let n = norm3(v);
        if n > 1e-3 {
            return v.map(|x| x / n);
        }
    }
}

fn point(rng: &mut ChaCha8Rng, half: f64) -> [f64; 3] {
    [0; 3].map(|_| rng.gen_range(-half..half))
}

/// 1000 ray pairs whose directions are at least ~3° from parallel.
fn ray_pairs() -> Vec<(GazeRay, GazeRay)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e57);
    let mut pairs = Vec::with_capacity(1000);
    while pairs.len() < 1000 {
        let gl = unit(&mut rng);
        let gr = unit(&mut rng);
        if norm3(cross3(gr, gl)) < 0.05 {
            continue;
        }
        let l = GazeRay::new(point(&mut rng, 1.0), gl).unwrap();
        let r = GazeRay::new(point(&mut rng, 1.0), gr).unwrap();
        pairs.push((l, r));
    }
    pairs
}

fn vergence_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst_d = 0.0f64;
    let mut worst_t = 0.0f64;
    let mut errors = 0;
    for (l, r) in ray_pairs() {
        let Ok(s) = solve_vergence(&l, &r) else {
            errors += 1;
            continue;
        };
        // |k| ≤ |Δo| / sin ≤ 2√3 / 0.05 < 70.
        let (t, d) = brute_force_vergence(&l, &r, 80.0, 321);
        worst_d = worst_d.max((s.distance - d).abs() / (1.0 + d));
        let dt = norm3([0, 1, 2].map(|i| s.target[i] - t[i]));
        worst_t = worst_t.max(dt / (1.0 + norm3(t)));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        errors == 0 && worst_d <= 1e-6 && worst_t <= 1e-5 && secs < 5.0,
        format!("max rel d err {worst_d:.2e} (<= 1e-6), max rel target err {worst_t:.2e} (<= 1e-5), {errors} solver errors, {secs:.2} s (< 5 s)"),
    )
}

fn skew_consistency() -> Outcome {
    let mut worst = 0.0f64;
    let mut errors = 0;
    for (l, r) in ray_pairs() {
        match solve_vergence(&l, &r) {
            Ok(s) => {
                let via_k = s.k_lr.abs() * norm3(cross3(r.direction, l.direction));
                worst = worst.max((s.distance - via_k).abs() / (1.0 + s.distance));
            }
            Err(_) => errors += 1,
        }
    }
    outcome(
        errors == 0 && worst <= 1e-8,
        format!("max |d - |k_lr|·|g_r x g_l|| / (1+d) = {worst:.2e} (<= 1e-8)"),
    )
}

fn rotation_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0707);
    let mut worst_orth = 0.0f64;
    let mut worst_det = 0.0f64;
    for i in 0..1000 {
        let axis = unit(&mut rng);
        // A tenth of the draws exercise the small-angle branch.
        let angle = if i % 10 == 0 {
            10f64.powf(rng.gen_range(-12.0..-3.0))
        } else {
            rng.gen_range(0.0..2.0 * std::f64::consts::PI)
        };
        let rot = rodrigues(axis.map(|a| a * angle));
        let rtr = mat_mul(&transpose(&rot), &rot);
        for (r, row) in rtr.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let id = if r == c { 1.0 } else { 0.0 };
                worst_orth = worst_orth.max((v - id).abs());
            }
        }
        worst_det = worst_det.max((det3(&rot) - 1.0).abs());
    }
    outcome(
        worst_orth < 1e-12 && worst_det < 1e-12,
        format!("max |RᵀR - I| = {worst_orth:.2e}, max |det R - 1| = {worst_det:.2e} (< 1e-12)"),
    )
}

/// 100 points: noisy scenes with nonzero shape and color codes, every
/// parameter then jittered. Points closer than 1e-6 to an L1 kink are
/// excluded and counted.
fn gradient_check() -> Outcome {
    let start = Instant::now();
    let basis = synthetic_basis(&BasisConfig::default(), BASIS_SEED).unwrap();
    let cam = CameraIntrinsics::default();
    let ranges = SceneRanges {
        shape_sigma: 0.5,
        color_sigma: 0.5,
        ..SceneRanges::default()
    };
    let noise = NoiseLevels {
        landmark_px: 2.0,
        target_m: 0.01,
    };
    let scenes = generate_scenes(
        &basis,
        &cam,
        &ranges,
        &noise,
        5000,
        100,
        Execution::Parallel,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9ad);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut excluded = 0usize;
    let mut failures = 0usize;
    for (i, scene) in scenes.iter().enumerate() {
        let mut p = scene.true_params.clone();
        for v in p.as_mut_slice() {
            let jitter: f64 = StandardNormal.sample(&mut rng);
            *v += 0.02 * jitter;
        }
        let powers = if i % 2 == 0 {
            NormPowers::PLAIN
        } else {
            NormPowers::LITERAL
        };
        let problem = match Problem::new(&basis, &cam, &scene.obs, LossWeights::default(), powers) {
            Ok(problem) => problem,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        match problem.min_l1_argument(&p) {
            Ok(m) if m <= 1e-6 => {
                excluded += 1;
                continue;
            }
            Ok(_) => {}
            Err(_) => {
                failures += 1;
                continue;
            }
        }
        let (Ok(ad), Ok(fd)) = (
            problem.gradient(&p, GradientMode::ForwardAd),
            problem.gradient(&p, GradientMode::FiniteDifference),
        ) else {
            failures += 1;
            continue;
        };
        for (a, f) in ad.iter().zip(&fd) {
            worst = worst.max((a - f).abs() / a.abs().max(f.abs()).max(1.0));
        }
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures == 0 && checked >= 90 && worst < 1e-4 && secs < 30.0,
        format!(
            "{checked} points checked, {excluded} near a kink, {failures} infeasible; max rel err {worst:.2e} (< 1e-4), {secs:.2} s (< 30 s)"
        ),
    )
}

fn zero_residual(fx: &Fixture) -> Outcome {
    let mut worst = 0.0f64;
    let mut errors = 0;
    for scene in &fx.clean {
        for powers in [NormPowers::PLAIN, NormPowers::LITERAL] {
            match evaluate(
                &scene.true_params,
                &fx.basis,
                &fx.cam,
                &scene.obs,
                &LossWeights::default(),
                powers,
            ) {
                Ok((_, total)) => worst = worst.max(total),
                Err(_) => errors += 1,
            }
        }
    }
    outcome(
        errors == 0 && worst <= 1e-12,
        format!(
            "{} scenes, max total loss at truth {worst:.2e} (<= 1e-12)",
            fx.clean.len()
        ),
    )
}

fn recovery(fx: &Fixture) -> Outcome {
    let config = BenchConfig {
        fit: FitConfig::default(),
        init: InitMode::PerturbedTruth {
            gaze_deg: 5.0,
            translation_m: 0.005,
        },
    };
    let start = Instant::now();
    let outcome_ = run_benchmark(
        &fx.clean,
        &fx.basis,
        &fx.cam,
        &config,
        Execution::Sequential,
    );
    let secs = start.elapsed().as_secs_f64();
    match outcome_ {
        Ok(b) => {
            let r = b.report;
            outcome(
                r.failure_count == 0 && r.angular_mean < 0.5 && r.landmark_px_mean < 0.1 && secs < 120.0,
                format!(
                    "mean angular {:.3e}° (< 0.5°), mean landmark {:.3e} px (< 0.1 px), {} failures, {secs:.2} s on one thread (< 120 s)",
                    r.angular_mean, r.landmark_px_mean, r.failure_count
                ),
            )
        }
        Err(e) => outcome(false, format!("benchmark failed: {e}")),
    }
}

fn noisy_band(fx: &Fixture) -> Outcome {
    match run_benchmark(
        &fx.noisy,
        &fx.basis,
        &fx.cam,
        &BenchConfig::default(),
        Execution::Parallel,
    ) {
        Ok(b) => {
            let r = b.report;
            outcome(
                r.failure_count == 0 && r.angular_mean < 5.0,
                format!(
                    "1 px / 5 mm noise, cold init: mean angular {:.3}° ± {:.3}° (< 5°), {} failures",
                    r.angular_mean, r.angular_std, r.failure_count
                ),
            )
        }
        Err(e) => outcome(false, format!("benchmark failed: {e}")),
    }
}

fn ablation_ordering(fx: &Fixture) -> Outcome {
    let rows = match ablation_suite(
        &fx.noisy,
        &fx.basis,
        &fx.cam,
        &BenchConfig::default(),
        Execution::Parallel,
    ) {
        Ok(rows) => rows,
        Err(e) => return outcome(false, format!("ablation failed: {e}")),
    };
    let mean = |name: &str| {
        rows.iter()
            .find(|r| r.name.starts_with(name))
            .map(|r| r.report.angular_mean)
            .unwrap_or(f64::NAN)
    };
    let (g2, g3, full) = (mean("baseline"), mean("vergence only"), mean("full"));
    outcome(
        full <= g3 && full <= g2,
        format!("mean angular: full {full:.6}°, G3-only {g3:.6}° (full <= G3: {}), G2-only {g2:.6}° (full <= G2: {})", full <= g3, full <= g2),
    )
}

fn degenerate(fx: &Fixture) -> Outcome {
    let result = catch_unwind(AssertUnwindSafe(|| {
        let mut notes = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0xde9);
        let mut parallel_errors = 0;
        let mut worst = 0.0f64;
        for i in 0..200 {
            let g = unit(&mut rng);
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let l = GazeRay::new(point(&mut rng, 1.0), g).unwrap();
            let r = GazeRay::new(point(&mut rng, 1.0), g.map(|v| v * sign * 3.0)).unwrap();
            if matches!(solve_vergence(&l, &r), Err(GazeError::ParallelGaze { .. })) {
                parallel_errors += 1;
            }
            let offset = [0, 1, 2].map(|k| r.origin[k] - l.origin[k]);
            let expected = norm3(cross3(offset, g));
            worst = worst.max((skew_distance_parallel(&l, &r) - expected).abs());
            let s = solve_vergence_or_parallel(&l, &r);
            if !(s.parallel && s.target.iter().all(|v| v.is_finite()) && s.distance.is_finite()) {
                notes.push(format!("pair {i}: fallback not finite"));
            }
            // Nearly parallel, on either side of the threshold.
            let tilt = [1e-12, 1e-9, 1e-7, 1e-5][i % 4];
            let bent = GazeRay::new(l.origin, [g[0] + tilt, g[1] - tilt, g[2]]).unwrap();
            let s = solve_vergence_or_parallel(&bent, &r);
            if !s.distance.is_finite() {
                notes.push(format!("pair {i}: near-parallel distance not finite"));
            }
        }
        if parallel_errors != 200 {
            notes.push(format!(
                "{parallel_errors}/200 parallel pairs reported ParallelGaze"
            ));
        }
        if worst > 1e-12 {
            notes.push(format!("skew_distance_parallel error {worst:.2e}"));
        }

        // Fits started from exactly parallel forward gaze.
        let mut fits = 0;
        for scene in fx.noisy.iter().take(5) {
            let mut init = scene.true_params.clone();
            init.set_z_e([0.0; 4]);
            let problem = Problem::new(
                &fx.basis,
                &fx.cam,
                &scene.obs,
                LossWeights::default(),
                NormPowers::PLAIN,
            )
            .unwrap();
            match problem.gradient(&init, GradientMode::ForwardAd) {
                Ok(g) if g.iter().all(|v| v.is_finite()) => {}
                Ok(_) => notes.push("non-finite gradient at parallel gaze".into()),
                Err(e) => notes.push(format!("gradient at parallel gaze: {e}")),
            }
            match fit(&scene.obs, &fx.basis, &fx.cam, &init, &FitConfig::default()) {
                Ok(r) if r.params.as_slice().iter().all(|v| v.is_finite()) => fits += 1,
                Ok(_) => notes.push("fit from parallel gaze returned non-finite parameters".into()),
                Err(e) => notes.push(format!("fit from parallel gaze: {e}")),
            }
        }
        (notes, worst, fits)
    }));
    match result {
        Ok((notes, worst, fits)) => outcome(
            notes.is_empty(),
            if notes.is_empty() {
                format!("200 parallel pairs -> ParallelGaze, fallback distance err {worst:.1e}, {fits}/5 fits from parallel gaze finite, no panics")
            } else {
                notes.join("; ")
            },
        ),
        Err(_) => outcome(false, "panicked".into()),
    }
}

fn gazefit_cmd(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_gazefit"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn determinism() -> Outcome {
    let run = || -> Result<usize, String> {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let d = tmp.path();
        let commands: [(&str, &[&str]); 6] = [
            ("a", &["synth-basis", "--seed", "11", "--out", "a"]),
            (
                "s",
                &[
                    "gen-scenes",
                    "--basis",
                    "a/basis.json",
                    "--count",
                    "4",
                    "--landmark-noise",
                    "1",
                    "--target-noise",
                    "0.005",
                    "--seed",
                    "12",
                    "--out",
                    "s",
                ],
            ),
            (
                "f",
                &[
                    "fit",
                    "--basis",
                    "a/basis.json",
                    "--scenes",
                    "s/scenes.jsonl",
                    "--out",
                    "f",
                ],
            ),
            (
                "o",
                &[
                    "export-obj",
                    "--basis",
                    "a/basis.json",
                    "--fits",
                    "f/fits.jsonl",
                    "--index",
                    "1",
                    "--out",
                    "o",
                ],
            ),
            (
                "p",
                &[
                    "plot",
                    "--basis",
                    "a/basis.json",
                    "--scenes",
                    "s/scenes.jsonl",
                    "--fits",
                    "f/fits.jsonl",
                    "--out",
                    "p",
                ],
            ),
            (
                "x",
                &[
                    "ablate",
                    "--basis",
                    "a/basis.json",
                    "--scenes",
                    "s/scenes.jsonl",
                    "--out",
                    "x",
                ],
            ),
        ];
        let mut compared = 0;
        for (dir, args) in commands {
            gazefit_cmd(d, args)?;
            let manifest_path = d.join(dir).join(MANIFEST_FILE);
            let manifest: RunManifest = read_json(&manifest_path).map_err(|e| e.to_string())?;
            let mut names = manifest.outputs.clone();
            names.push(MANIFEST_FILE.to_string());
            let snapshot: Vec<Vec<u8>> = names
                .iter()
                .map(|n| fs::read(d.join(dir).join(n)).map_err(|e| format!("{n}: {e}")))
                .collect::<Result<_, _>>()?;
            let manifest_arg = format!("{dir}/{MANIFEST_FILE}");
            gazefit_cmd(d, &["replay", &manifest_arg])?;
            for (name, before) in names.iter().zip(&snapshot) {
                let after = fs::read(d.join(dir).join(name)).map_err(|e| format!("{name}: {e}"))?;
                if &after != before {
                    return Err(format!(
                        "{}: {dir}/{name} differs after replay",
                        manifest.command
                    ));
                }
                compared += 1;
            }
        }
        Ok(compared)
    };
    match run() {
        Ok(n) => outcome(
            true,
            format!("6 commands replayed from their manifests, {n} files bit-identical"),
        ),
        Err(e) => outcome(false, e),
    }
}

fn main() {
    let fx = Fixture::new();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("vergence oracle equivalence", Box::new(vergence_oracle)),
        ("skew distance consistency", Box::new(skew_consistency)),
        ("rotation invariants", Box::new(rotation_invariants)),
        ("gradient check", Box::new(gradient_check)),
        ("zero-residual soundness", Box::new(|| zero_residual(&fx))),
        ("recovery", Box::new(|| recovery(&fx))),
        ("noisy-recovery sanity band", Box::new(|| noisy_band(&fx))),
        ("ablation ordering", Box::new(|| ablation_ordering(&fx))),
        ("degenerate handling", Box::new(|| degenerate(&fx))),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let o = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|_| outcome(false, "panicked".into()));
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
