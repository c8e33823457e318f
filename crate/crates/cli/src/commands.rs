use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gazefit::bench::{
    ablation_suite, ablation_table, generate_scenes, report_table, run_benchmark, SyntheticScene,
};
use gazefit::io::{
    export_obj, load_basis, load_camera, load_scenes, plot_svg, read_json, read_jsonl, write_json,
    write_jsonl, write_text, FitRecord, RunConfig, RunManifest, MANIFEST_FILE,
};
use gazefit::synthetic::synthetic_basis;
use gazefit::{CameraIntrinsics, Execution, GazeError, LinearBasis, ParamVector};
use log::info;

use crate::{Cli, Command, Inputs};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: String) -> Self {
        Self {
            code: EXIT_USAGE,
            message,
        }
    }

    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

/// Input problems exit with 2, everything else with 3.
fn input_error(e: GazeError) -> CliError {
    match e {
        GazeError::Parse { .. }
        | GazeError::Io { .. }
        | GazeError::InvalidBasis(_)
        | GazeError::InvalidInput(_)
        | GazeError::DimensionMismatch { .. } => CliError::input(e.to_string()),
        other => CliError::runtime(other.to_string()),
    }
}

fn runtime_error(e: GazeError) -> CliError {
    CliError::runtime(e.to_string())
}

struct Context {
    config: RunConfig,
    out: PathBuf,
    mode: Execution,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self, CliError> {
        let config = match &cli.common.config {
            Some(path) => read_json(path).map_err(input_error)?,
            None => RunConfig::default(),
        };
        Ok(Self {
            config,
            out: cli.common.out.clone(),
            mode: if cli.common.sequential {
                Execution::Sequential
            } else {
                Execution::Parallel
            },
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    fn record(&mut self, key: &str, path: &Path) {
        self.inputs
            .insert(key.to_string(), path.display().to_string());
    }

    fn basis(&mut self, path: &Path) -> Result<LinearBasis, CliError> {
        self.record("basis", path);
        load_basis(path).map_err(input_error)
    }

    fn camera(&mut self, inputs: &Inputs) -> Result<CameraIntrinsics, CliError> {
        match &inputs.camera {
            Some(path) => {
                self.record("camera", path);
                load_camera(path).map_err(input_error)
            }
            None => {
                let cam = self.config.camera.unwrap_or_default();
                cam.validate().map_err(input_error)?;
                Ok(cam)
            }
        }
    }

    fn scenes(&mut self, path: &Path) -> Result<Vec<SyntheticScene>, CliError> {
        self.record("scenes", path);
        let scenes = load_scenes(path).map_err(input_error)?;
        if scenes.is_empty() {
            return Err(CliError::input(format!("{}: no scenes", path.display())));
        }
        Ok(scenes)
    }

    fn fits(&mut self, path: &Path) -> Result<Vec<FitRecord>, CliError> {
        self.record("fits", path);
        read_jsonl(path).map_err(input_error)
    }

    fn write(
        &mut self,
        name: &str,
        write: impl FnOnce(&Path) -> gazefit::Result<()>,
    ) -> Result<(), CliError> {
        let path = self.out.join(name);
        write(&path).map_err(runtime_error)?;
        info!("wrote {}", path.display());
        self.outputs.push(name.to_string());
        Ok(())
    }
}

pub fn dispatch(cli: &Cli, argv: &[String]) -> Result<(), CliError> {
    let mut ctx = Context::new(cli)?;
    let seed = cli.common.seed;
    let mut outcome = Ok(());
    let (name, uses_seed) = match &cli.command {
        Command::SynthBasis => {
            let basis = synthetic_basis(&ctx.config.basis, seed).map_err(runtime_error)?;
            ctx.write("basis.json", |p| write_json(p, &basis))?;
            ("synth-basis", true)
        }
        Command::GenScenes {
            inputs,
            count,
            landmark_noise,
            target_noise,
        } => {
            let basis = ctx.basis(&inputs.basis)?;
            let cam = ctx.camera(inputs)?;
            let mut noise = ctx.config.noise;
            if let Some(v) = landmark_noise {
                noise.landmark_px = *v;
            }
            if let Some(v) = target_noise {
                noise.target_m = *v;
            }
            let count = count.or(ctx.config.scene_count).unwrap_or(10);
            let scenes = generate_scenes(
                &basis,
                &cam,
                &ctx.config.ranges,
                &noise,
                seed,
                count,
                ctx.mode,
            )
            .map_err(runtime_error)?;
            ctx.write("scenes.jsonl", |p| write_jsonl(p, &scenes))?;
            ("gen-scenes", true)
        }
        Command::Fit { inputs, scenes } => {
            let basis = ctx.basis(&inputs.basis)?;
            let cam = ctx.camera(inputs)?;
            let scenes = ctx.scenes(scenes)?;
            let bench = run_benchmark(&scenes, &basis, &cam, &ctx.config.bench, ctx.mode)
                .map_err(runtime_error)?;
            let records: Vec<FitRecord> = scenes
                .iter()
                .zip(bench.fits)
                .enumerate()
                .map(|(i, (s, r))| match r {
                    Ok(result) => FitRecord {
                        scene_index: i,
                        seed: s.seed,
                        result: Some(result),
                        error: None,
                    },
                    Err(e) => FitRecord {
                        scene_index: i,
                        seed: s.seed,
                        result: None,
                        error: Some(e.to_string()),
                    },
                })
                .collect();
            let failed = records.iter().filter(|r| r.error.is_some()).count();
            ctx.write("fits.jsonl", |p| write_jsonl(p, &records))?;
            ctx.write("report.json", |p| write_json(p, &bench.report))?;
            let table = report_table([("fit", &bench.report)]);
            ctx.write("report.txt", |p| write_text(p, &table))?;
            print!("{table}");
            if failed > 0 {
                outcome = Err(CliError::runtime(format!(
                    "{failed} of {} scenes failed to fit",
                    scenes.len()
                )));
            }
            ("fit", false)
        }
        Command::ExportObj {
            basis,
            fits,
            scenes,
            index,
        } => {
            let basis = ctx.basis(basis)?;
            let params = if let Some(path) = fits {
                let fits = ctx.fits(path)?;
                fitted_params(&fits, *index)?
            } else if let Some(path) = scenes {
                let scenes = ctx.scenes(path)?;
                scene_at(&scenes, *index)?.true_params.clone()
            } else {
                ParamVector::zeros(basis.shape_dim(), basis.color_dim())
            };
            ctx.write("mesh.obj", |p| export_obj(&basis, &params, p))?;
            ("export-obj", false)
        }
        Command::Plot {
            inputs,
            scenes,
            fits,
            index,
        } => {
            let basis = ctx.basis(&inputs.basis)?;
            let cam = ctx.camera(inputs)?;
            let scenes = ctx.scenes(scenes)?;
            let fits = ctx.fits(fits)?;
            let scene = scene_at(&scenes, *index)?;
            let params = fitted_params(&fits, *index)?;
            let svg = plot_svg(&basis, &cam, &params, scene).map_err(runtime_error)?;
            ctx.write("plot.svg", |p| write_text(p, &svg))?;
            ("plot", false)
        }
        Command::Ablate { inputs, scenes } => {
            let basis = ctx.basis(&inputs.basis)?;
            let cam = ctx.camera(inputs)?;
            let scenes = ctx.scenes(scenes)?;
            let rows = ablation_suite(&scenes, &basis, &cam, &ctx.config.bench, ctx.mode)
                .map_err(runtime_error)?;
            let table = ablation_table(&rows);
            ctx.write("ablation.json", |p| write_json(p, &rows))?;
            ctx.write("ablation.txt", |p| write_text(p, &table))?;
            print!("{table}");
            ("ablate", false)
        }
        Command::Replay { .. } => unreachable!("handled by the caller"),
    };

    let manifest = RunManifest {
        command: name.to_string(),
        argv: argv.to_vec(),
        inputs: ctx.inputs.clone(),
        config: cli.common.config.as_ref().map(|p| p.display().to_string()),
        out_dir: ctx.out.display().to_string(),
        seed: uses_seed.then_some(seed),
        outputs: ctx.outputs.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let path = ctx.out.join(MANIFEST_FILE);
    write_json(&path, &manifest).map_err(runtime_error)?;
    outcome
}

fn scene_at(scenes: &[SyntheticScene], index: usize) -> Result<&SyntheticScene, CliError> {
    scenes.get(index).ok_or_else(|| {
        CliError::input(format!(
            "scene index {index} out of range ({} scenes)",
            scenes.len()
        ))
    })
}

fn fitted_params(fits: &[FitRecord], index: usize) -> Result<ParamVector, CliError> {
    let record = fits
        .iter()
        .find(|r| r.scene_index == index)
        .ok_or_else(|| CliError::input(format!("no fit for scene {index}")))?;
    match (&record.result, &record.error) {
        (Some(r), _) => Ok(r.params.clone()),
        (None, Some(e)) => Err(CliError::input(format!(
            "fit for scene {index} failed: {e}"
        ))),
        (None, None) => Err(CliError::input(format!(
            "fit record for scene {index} is empty"
        ))),
    }
}

/// Reruns the recorded argument vector. Relative paths resolve against the
/// current directory, as in the original run.
pub fn replay(
    manifest: &Path,
    run: fn(Vec<String>) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let m: RunManifest = read_json(manifest).map_err(input_error)?;
    if m.argv.len() < 2 {
        return Err(CliError::input(format!(
            "{}: manifest has no command",
            manifest.display()
        )));
    }
    if m.argv.iter().any(|a| a == "replay") {
        return Err(CliError::input("a manifest cannot replay a replay"));
    }
    run(m.argv)
}
