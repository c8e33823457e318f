//! Linear eye-region morphable model: shape and color reconstruction, rigid
//! posing, eyeball-centre extraction and per-eye eyeball rotation.
//!
//! Points are column vectors throughout, so posing is `v ↦ f·R·v + T`. The
//! row-stacked form `S' = f·S·Rᵀ + 1·Tᵀ` describes the same map.

use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};
use crate::scalar::{
    add3, dot3, lift3, mat_mul, mat_vec, scale3, sub3, transpose, Mat3, Scalar, Vec3,
};

/// Number of 2D landmarks carried by every basis.
pub const LANDMARK_COUNT: usize = 31;

/// Below this rotation angle (radians) Rodrigues switches to its Taylor form.
pub const RODRIGUES_SMALL_ANGLE: f64 = 1e-8;

/// Orthonormality tolerance for matrices accepted as rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Mean mesh plus principal components for shape and per-vertex color,
/// together with the vertex bookkeeping the fitter needs.
///
/// The serialized field names form the basis file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBasis {
    pub n_vertices: usize,
    pub mean_shape: Vec<[f64; 3]>,
    pub shape_components: Vec<Vec<[f64; 3]>>,
    pub mean_color: Vec<[f64; 3]>,
    pub color_components: Vec<Vec<[f64; 3]>>,
    pub faces: Vec<[usize; 3]>,
    #[serde(rename = "landmarks")]
    pub landmark_indices: Vec<usize>,
    #[serde(rename = "left_eyeball")]
    pub left_eyeball_indices: Vec<usize>,
    #[serde(rename = "right_eyeball")]
    pub right_eyeball_indices: Vec<usize>,
    #[serde(rename = "left_outer_corner")]
    pub left_eye_outer_corner: usize,
    #[serde(rename = "right_outer_corner")]
    pub right_eye_outer_corner: usize,
}

impl LinearBasis {
    pub fn shape_dim(&self) -> usize {
        self.shape_components.len()
    }

    pub fn color_dim(&self) -> usize {
        self.color_components.len()
    }

    /// Checks every structural invariant of the basis.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_vertices;
        let bad = |msg: String| Err(GazeError::InvalidBasis(msg));
        if self.mean_shape.len() != n {
            return bad(format!(
                "mean_shape has {} rows, expected {n}",
                self.mean_shape.len()
            ));
        }
        if self.mean_color.len() != n {
            return bad(format!(
                "mean_color has {} rows, expected {n}",
                self.mean_color.len()
            ));
        }
        for (k, c) in self.shape_components.iter().enumerate() {
            if c.len() != n {
                return bad(format!(
                    "shape component {k} has {} rows, expected {n}",
                    c.len()
                ));
            }
        }
        for (k, c) in self.color_components.iter().enumerate() {
            if c.len() != n {
                return bad(format!(
                    "color component {k} has {} rows, expected {n}",
                    c.len()
                ));
            }
        }
        let finite = |rows: &[[f64; 3]]| rows.iter().flatten().all(|x| x.is_finite());
        if !finite(&self.mean_shape)
            || !finite(&self.mean_color)
            || !self.shape_components.iter().all(|c| finite(c))
            || !self.color_components.iter().all(|c| finite(c))
        {
            return bad("non-finite coordinate".into());
        }
        if self.landmark_indices.len() != LANDMARK_COUNT {
            return bad(format!(
                "expected {LANDMARK_COUNT} landmarks, got {}",
                self.landmark_indices.len()
            ));
        }
        let in_range = |name: &str, idx: &[usize]| -> Result<()> {
            match idx.iter().find(|&&i| i >= n) {
                Some(i) => bad(format!("{name} index {i} out of range for {n} vertices")),
                None => Ok(()),
            }
        };
        in_range("landmark", &self.landmark_indices)?;
        in_range("left eyeball", &self.left_eyeball_indices)?;
        in_range("right eyeball", &self.right_eyeball_indices)?;
        in_range(
            "outer corner",
            &[self.left_eye_outer_corner, self.right_eye_outer_corner],
        )?;
        for f in &self.faces {
            in_range("face", f)?;
        }
        if self.left_eyeball_indices.is_empty() {
            return Err(GazeError::EmptyEyeball { side: "left" });
        }
        if self.right_eyeball_indices.is_empty() {
            return Err(GazeError::EmptyEyeball { side: "right" });
        }
        let mut left = self.left_eyeball_indices.clone();
        left.sort_unstable();
        if self
            .right_eyeball_indices
            .iter()
            .any(|i| left.binary_search(i).is_ok())
        {
            return bad("left and right eyeball index sets overlap".into());
        }
        Ok(())
    }

    /// Marks which vertices belong to either eyeball.
    pub fn eyeball_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_vertices];
        for &i in self
            .left_eyeball_indices
            .iter()
            .chain(&self.right_eyeball_indices)
        {
            mask[i] = true;
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorParams(pub Vec<f64>);

/// Rigid head pose plus isotropic scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    /// Axis-angle rotation, radians.
    pub r: [f64; 3],
    /// Translation in the camera frame, meters.
    pub t: [f64; 3],
    pub f: f64,
}

impl Default for PoseParams {
    fn default() -> Self {
        Self {
            r: [0.0; 3],
            t: [0.0; 3],
            f: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Model,
    Camera,
}

impl Frame {
    fn name(self) -> &'static str {
        match self {
            Frame::Model => "model",
            Frame::Camera => "camera",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeRegionMesh {
    pub vertices: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub frame: Frame,
}

impl EyeRegionMesh {
    fn expect_frame(&self, expected: Frame) -> Result<()> {
        if self.frame != expected {
            return Err(GazeError::WrongFrame {
                expected: expected.name(),
                got: self.frame.name(),
            });
        }
        Ok(())
    }
}

fn linear_combination(
    mean: &[[f64; 3]],
    components: &[Vec<[f64; 3]>],
    coeffs: &[f64],
) -> Vec<[f64; 3]> {
    let mut out = mean.to_vec();
    for (component, &z) in components.iter().zip(coeffs) {
        if z == 0.0 {
            continue;
        }
        for (v, c) in out.iter_mut().zip(component) {
            v[0] += z * c[0];
            v[1] += z * c[1];
            v[2] += z * c[2];
        }
    }
    out
}

/// `S = μ_S + Σ_k z_S[k]·U_S[k]`, in the model frame, carrying the mean color.
pub fn reconstruct_shape(basis: &LinearBasis, params: &ShapeParams) -> Result<EyeRegionMesh> {
    if params.0.len() != basis.shape_dim() {
        return Err(GazeError::DimensionMismatch {
            what: "shape parameters",
            expected: basis.shape_dim(),
            got: params.0.len(),
        });
    }
    Ok(EyeRegionMesh {
        vertices: linear_combination(&basis.mean_shape, &basis.shape_components, &params.0),
        colors: basis.mean_color.clone(),
        frame: Frame::Model,
    })
}

/// Per-vertex color `A = μ_A + Σ_k z_A[k]·U_A[k]`, unclamped.
pub fn reconstruct_color(basis: &LinearBasis, params: &ColorParams) -> Result<Vec<[f64; 3]>> {
    if params.0.len() != basis.color_dim() {
        return Err(GazeError::DimensionMismatch {
            what: "color parameters",
            expected: basis.color_dim(),
            got: params.0.len(),
        });
    }
    Ok(linear_combination(
        &basis.mean_color,
        &basis.color_components,
        &params.0,
    ))
}

/// Clamps colors into `[0, 1]` for export.
pub fn clamp_colors(colors: &[[f64; 3]]) -> Vec<[f64; 3]> {
    colors
        .iter()
        .map(|c| {
            [
                c[0].clamp(0.0, 1.0),
                c[1].clamp(0.0, 1.0),
                c[2].clamp(0.0, 1.0),
            ]
        })
        .collect()
}

/// Rodrigues' formula, `R = I + A·[r]ₓ + B·[r]ₓ²` with `A = sin θ/θ` and
/// `B = (1 − cos θ)/θ²`.
pub fn rodrigues<S: Scalar>(r: Vec3<S>) -> Mat3<S> {
    let theta2 = dot3(r, r);
    let (a, b) = if theta2.re() < RODRIGUES_SMALL_ANGLE * RODRIGUES_SMALL_ANGLE {
        (S::one() - theta2 / 6.0, S::cst(0.5) - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (S::one() - theta.cos()) / theta2)
    };
    let [x, y, z] = r;
    let o = S::one();
    // I + a·K + b·(r rᵀ − θ² I), using K² = r rᵀ − θ² I.
    let diag = o - b * theta2;
    [
        [diag + b * x * x, b * x * y - a * z, b * x * z + a * y],
        [b * x * y + a * z, diag + b * y * y, b * y * z - a * x],
        [b * x * z - a * y, b * y * z + a * x, diag + b * z * z],
    ]
}

/// `f·R·v + T`.
#[inline]
pub fn pose_point<S: Scalar>(rot: &Mat3<S>, scale: S, t: Vec3<S>, v: Vec3<S>) -> Vec3<S> {
    add3(scale3(mat_vec(rot, v), scale), t)
}

/// Poses a model-frame mesh into the camera frame.
pub fn apply_pose(mesh: &EyeRegionMesh, pose: &PoseParams) -> Result<EyeRegionMesh> {
    mesh.expect_frame(Frame::Model)?;
    if !(pose.f > 0.0) {
        return Err(GazeError::NonPositiveScale(pose.f));
    }
    let rot = rodrigues(pose.r);
    Ok(EyeRegionMesh {
        vertices: mesh
            .vertices
            .iter()
            .map(|&v| pose_point(&rot, pose.f, pose.t, v))
            .collect(),
        colors: mesh.colors.clone(),
        frame: Frame::Camera,
    })
}

fn centroid(vertices: &[[f64; 3]], indices: &[usize]) -> [f64; 3] {
    let mut sum = [0.0; 3];
    for &i in indices {
        sum = add3(sum, vertices[i]);
    }
    scale3(sum, 1.0 / indices.len() as f64)
}

/// Eyeball centres `(o_l, o_r)`: the mean of each eyeball's vertices.
pub fn eyeball_centres(mesh: &EyeRegionMesh, basis: &LinearBasis) -> Result<([f64; 3], [f64; 3])> {
    mesh.expect_frame(Frame::Camera)?;
    if basis.left_eyeball_indices.is_empty() {
        return Err(GazeError::EmptyEyeball { side: "left" });
    }
    if basis.right_eyeball_indices.is_empty() {
        return Err(GazeError::EmptyEyeball { side: "right" });
    }
    Ok((
        centroid(&mesh.vertices, &basis.left_eyeball_indices),
        centroid(&mesh.vertices, &basis.right_eyeball_indices),
    ))
}

/// Infinity-norm of `RᵀR − I`, plus a determinant sign check.
pub fn check_rotation(rot: &Mat3<f64>) -> Result<()> {
    let rtr = mat_mul(&transpose(rot), rot);
    let mut residual: f64 = 0.0;
    for (i, row) in rtr.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            residual = residual.max((x - target).abs());
        }
    }
    let det = crate::scalar::det3(rot);
    if !(residual <= ROTATION_TOLERANCE) || det < 0.0 {
        return Err(GazeError::NotRotation {
            residual: if det < 0.0 {
                residual.max((det - 1.0).abs())
            } else {
                residual
            },
        });
    }
    Ok(())
}

/// Rotates each eyeball about its own centre; all other vertices are copied.
pub fn rotate_eyeballs(
    mesh: &EyeRegionMesh,
    basis: &LinearBasis,
    rot_left: &Mat3<f64>,
    rot_right: &Mat3<f64>,
) -> Result<EyeRegionMesh> {
    check_rotation(rot_left)?;
    check_rotation(rot_right)?;
    let (o_l, o_r) = eyeball_centres(mesh, basis)?;
    let mut vertices = mesh.vertices.clone();
    for (indices, rot, centre) in [
        (&basis.left_eyeball_indices, rot_left, o_l),
        (&basis.right_eyeball_indices, rot_right, o_r),
    ] {
        for &i in indices.iter() {
            vertices[i] = add3(centre, mat_vec(rot, sub3(mesh.vertices[i], centre)));
        }
    }
    Ok(EyeRegionMesh {
        vertices,
        colors: mesh.colors.clone(),
        frame: mesh.frame,
    })
}

/// Model-frame eyeball centroids expressed linearly in the shape
/// coefficients, so the fitter can place eyeball centres without rebuilding
/// every eyeball vertex.
#[derive(Debug, Clone)]
pub(crate) struct CentroidBasis {
    pub mean: [f64; 3],
    pub components: Vec<[f64; 3]>,
}

impl CentroidBasis {
    pub fn new(basis: &LinearBasis, indices: &[usize]) -> Self {
        Self {
            mean: centroid(&basis.mean_shape, indices),
            components: basis
                .shape_components
                .iter()
                .map(|c| centroid(c, indices))
                .collect(),
        }
    }

    pub fn evaluate<S: Scalar>(&self, z_s: &[S]) -> Vec3<S> {
        let mut v = lift3::<S>(self.mean);
        for (c, &z) in self.components.iter().zip(z_s) {
            v = add3(v, scale3(lift3(*c), z));
        }
        v
    }
}

/// One vertex of the shape model, generic in the coefficients.
pub(crate) fn shape_vertex<S: Scalar>(basis: &LinearBasis, index: usize, z_s: &[S]) -> Vec3<S> {
    let mut v = lift3::<S>(basis.mean_shape[index]);
    for (c, &z) in basis.shape_components.iter().zip(z_s) {
        v = add3(v, scale3(lift3(c[index]), z));
    }
    v
}
