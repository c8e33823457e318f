//! Pinhole projection and the angular gaze error metric.

use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};
use crate::model::{EyeRegionMesh, Frame, LinearBasis, LANDMARK_COUNT};
use crate::scalar::{cross3, dot3, norm3, Scalar, Vec3};

/// Points closer to the image plane than this (meters) are rejected.
pub const DEPTH_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    /// A 640×480 sensor with a 600 px focal length.
    fn default() -> Self {
        Self {
            fx: 600.0,
            fy: 600.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(GazeError::InvalidInput(format!(
                "camera focal lengths must be positive and principal point finite: {self:?}"
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GazeError::InvalidInput(
                "camera image size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Generic projection used on the fitting path.
    #[inline]
    pub fn project_generic<S: Scalar>(&self, p: Vec3<S>) -> Result<[S; 2]> {
        if !(p[2].re() > DEPTH_EPSILON) {
            return Err(GazeError::DepthNonPositive {
                z: p[2].re(),
                landmark: None,
            });
        }
        let inv_z = S::one() / p[2];
        Ok([
            p[0] * inv_z * self.fx + self.cx,
            p[1] * inv_z * self.fy + self.cy,
        ])
    }
}

/// `(fx·x/z + cx, fy·y/z + cy)`; no clipping to the image bounds.
pub fn project(cam: &CameraIntrinsics, p: [f64; 3]) -> Result<[f64; 2]> {
    cam.project_generic(p)
}

/// Exactly 31 image points, pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct Landmarks2D(Vec<[f64; 2]>);

impl Landmarks2D {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(GazeError::DimensionMismatch {
                what: "landmarks",
                expected: LANDMARK_COUNT,
                got: points.len(),
            });
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(GazeError::InvalidInput(
                "non-finite landmark coordinate".into(),
            ));
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.0
    }

    pub fn into_points(self) -> Vec<[f64; 2]> {
        self.0
    }
}

impl TryFrom<Vec<[f64; 2]>> for Landmarks2D {
    type Error = GazeError;
    fn try_from(points: Vec<[f64; 2]>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<Landmarks2D> for Vec<[f64; 2]> {
    fn from(l: Landmarks2D) -> Self {
        l.0
    }
}

/// Projects the basis landmark vertices of a camera-frame mesh.
pub fn project_landmarks(
    cam: &CameraIntrinsics,
    mesh: &EyeRegionMesh,
    basis: &LinearBasis,
) -> Result<Landmarks2D> {
    if mesh.frame != Frame::Camera {
        return Err(GazeError::WrongFrame {
            expected: "camera",
            got: "model",
        });
    }
    let points = basis
        .landmark_indices
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            project(cam, mesh.vertices[v]).map_err(|e| match e {
                GazeError::DepthNonPositive { z, .. } => GazeError::DepthNonPositive {
                    z,
                    landmark: Some(i),
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Landmarks2D::new(points)
}

/// Angle between two gaze vectors, degrees in `[0, 180]`.
pub fn angular_error(g_hat: [f64; 3], g_gt: [f64; 3]) -> Result<f64> {
    let (na, nb) = (norm3(g_hat), norm3(g_gt));
    if !(na > 0.0) {
        return Err(GazeError::ZeroLength("predicted gaze"));
    }
    if !(nb > 0.0) {
        return Err(GazeError::ZeroLength("ground-truth gaze"));
    }
    // atan2 of |a×b| and a·b equals arccos of the clamped cosine but stays
    // exact for identical inputs of any length.
    let sin = norm3(cross3(g_hat, g_gt));
    Ok(sin.atan2(dot3(g_hat, g_gt)).to_degrees())
}
