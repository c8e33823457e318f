use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

use commands::CliError;

/// Eye-region model fitting with vergence-constrained gaze.
#[derive(Debug, Parser)]
#[command(name = "gazefit", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Fit and generate scenes on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Args)]
pub struct Inputs {
    #[arg(long)]
    pub basis: PathBuf,
    /// Camera intrinsics (JSON); defaults to the config's camera, then to a
    /// 640x480 camera with a 600 px focal length.
    #[arg(long)]
    pub camera: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a synthetic eye-region basis and write basis.json.
    SynthBasis,
    /// Sample ground-truth scenes and write scenes.jsonl.
    GenScenes {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        count: Option<usize>,
        /// Landmark noise σ in pixels (overrides the config).
        #[arg(long)]
        landmark_noise: Option<f64>,
        /// Target noise σ in meters (overrides the config).
        #[arg(long)]
        target_noise: Option<f64>,
    },
    /// Fit every scene; write fits.jsonl and report.json / report.txt.
    Fit {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        scenes: PathBuf,
    },
    /// Write mesh.obj for fitted parameters, a scene's true parameters, or
    /// the mean model.
    ExportObj {
        #[arg(long)]
        basis: PathBuf,
        #[arg(long, conflicts_with = "scenes")]
        fits: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Draw predicted and true gaze rays over the fitted model; write plot.svg.
    Plot {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        fits: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Benchmark the four loss configurations; write ablation.json / .txt.
    Ablate {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        scenes: PathBuf,
    },
    /// Rerun the command recorded in a manifest.
    Replay { manifest: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("GAZEFIT_LOG", "warn"))
        .init();
    let argv: Vec<String> = std::env::args().collect();
    match run(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.message.is_empty() {
                eprintln!("error: {}", e.message);
            }
            ExitCode::from(e.code)
        }
    }
}

fn run(argv: Vec<String>) -> Result<(), CliError> {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return Ok(());
            }
            let _ = e.print();
            return Err(CliError::usage(String::new()));
        }
    };
    match cli.command {
        Command::Replay { manifest } => commands::replay(&manifest, run),
        _ => commands::dispatch(&cli, &argv),
    }
}
