//! Eye-region morphable model fitting with vergence-constrained gaze.
//!
//! A linear shape and color basis describes the eye region and both
//! eyeballs. The fitter poses that model, projects its landmarks through a
//! pinhole camera, intersects the two gaze rays, and minimizes a weighted sum
//! of landmark, origin, target, skew, gaze and regularization losses.

pub mod bench;
pub mod camera;
pub mod error;
pub mod exec;
pub mod fitter;
pub mod io;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod synthetic;
pub mod vergence;

pub use camera::{angular_error, project, project_landmarks, CameraIntrinsics, Landmarks2D};
pub use error::{GazeError, Result};
pub use exec::Execution;
pub use fitter::{fit, init_params, FitConfig, FitResult, GradientMode, ParamVector, StopReason};
pub use losses::{LossKind, LossVector, LossWeights, NormPowers, Observations};
pub use model::{EyeRegionMesh, LinearBasis, PoseParams};
pub use vergence::{gaze_vector, solve_vergence, GazeAngles, GazeRay, VergenceSolution};
