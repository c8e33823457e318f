use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GazeError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("scale factor must be positive, got {0}")]
    NonPositiveScale(f64),

    #[error("point at or behind the camera (z = {z}){}", landmark_suffix(*.landmark))]
    DepthNonPositive { z: f64, landmark: Option<usize> },

    #[error("gaze directions are parallel (|g_r x g_l| = {cross_norm:e})")]
    ParallelGaze { cross_norm: f64 },

    #[error("zero-length vector in {0}")]
    ZeroLength(&'static str),

    #[error("matrix is not a rotation (orthonormality residual {residual:e})")]
    NotRotation { residual: f64 },

    #[error("{side} eyeball index set is empty")]
    EmptyEyeball { side: &'static str },

    #[error("invalid mesh frame: expected {expected}, got {got}")]
    WrongFrame {
        expected: &'static str,
        got: &'static str,
    },

    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("infeasible configuration: {0}")]
    InfeasibleConfig(String),

    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),

    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),

    #[error("non-finite gradient entry at parameter index {index}")]
    NonFiniteGradient { index: usize },

    #[error("initial parameters are infeasible: {0}")]
    InfeasibleInit(Box<GazeError>),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{location}: parse error at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        location: String,
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
}

fn landmark_suffix(landmark: Option<usize>) -> String {
    match landmark {
        Some(i) => format!(" at landmark {i}"),
        None => String::new(),
    }
}

pub type Result<T, E = GazeError> = std::result::Result<T, E>;
