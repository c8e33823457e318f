//! Generative fitting: every model parameter packed into one vector and
//! driven down the combined loss with a damped Gauss-Newton /
//! Levenberg-Marquardt iteration.
//!
//! The composite map `params → landmarks, eyeball centres, gaze rays,
//! vergence solution → losses` is written once over [`Scalar`]; forward-mode
//! dual numbers give its derivatives.

use std::time::Instant;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, Landmarks2D};
use crate::error::{GazeError, Result};
use crate::losses::{
    combine_lambda, gaze_residuals, loss_gaze, loss_landmark, loss_origin, loss_reg, loss_skew,
    loss_target, origin_residuals, penalty_behind, LossKind, LossVector, LossWeights, NormPowers,
    Observations, LOSS_COUNT,
};
use crate::model::{
    apply_pose, clamp_colors, pose_point, reconstruct_color, reconstruct_shape, rodrigues,
    rotate_eyeballs, shape_vertex, CentroidBasis, ColorParams, EyeRegionMesh, LinearBasis,
    PoseParams, ShapeParams,
};
use crate::scalar::{lift3, mat_mul, sign0, transpose, Dual, Scalar, Vec3};
use crate::vergence::{
    gaze_rotation, gaze_vector_generic, solve_vergence_or_parallel, GazeAngles, GazeRay,
    VergenceSolution,
};

/// Parameters after the shape and color coefficients: r (3), T (3), log f (1),
/// z_E (4).
pub const FIXED_PARAMS: usize = 11;

/// Flat optimizable state `(z_S, z_A, r, T, log f, z_E)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamRepr", into = "ParamRepr")]
pub struct ParamVector {
    values: Vec<f64>,
    shape_dim: usize,
    color_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct ParamRepr {
    z_s: Vec<f64>,
    z_a: Vec<f64>,
    r: [f64; 3],
    t: [f64; 3],
    log_f: f64,
    /// `(e_l, a_l, e_r, a_r)`.
    z_e: [f64; 4],
}

impl TryFrom<ParamRepr> for ParamVector {
    type Error = GazeError;
    fn try_from(p: ParamRepr) -> Result<Self> {
        let v = ParamVector::from_parts(&p.z_s, &p.z_a, p.r, p.t, p.log_f, p.z_e);
        if v.values.iter().any(|x| !x.is_finite()) {
            return Err(GazeError::InvalidInput("non-finite parameter".into()));
        }
        Ok(v)
    }
}

impl From<ParamVector> for ParamRepr {
    fn from(p: ParamVector) -> Self {
        ParamRepr {
            z_s: p.z_s().to_vec(),
            z_a: p.z_a().to_vec(),
            r: p.r(),
            t: p.t(),
            log_f: p.log_f(),
            z_e: p.z_e(),
        }
    }
}

impl ParamVector {
    pub fn zeros(shape_dim: usize, color_dim: usize) -> Self {
        Self {
            values: vec![0.0; shape_dim + color_dim + FIXED_PARAMS],
            shape_dim,
            color_dim,
        }
    }

    pub fn from_parts(
        z_s: &[f64],
        z_a: &[f64],
        r: [f64; 3],
        t: [f64; 3],
        log_f: f64,
        z_e: [f64; 4],
    ) -> Self {
        let mut values = Vec::with_capacity(z_s.len() + z_a.len() + FIXED_PARAMS);
        values.extend_from_slice(z_s);
        values.extend_from_slice(z_a);
        values.extend_from_slice(&r);
        values.extend_from_slice(&t);
        values.push(log_f);
        values.extend_from_slice(&z_e);
        Self {
            values,
            shape_dim: z_s.len(),
            color_dim: z_a.len(),
        }
    }

    pub fn from_slice(values: &[f64], shape_dim: usize, color_dim: usize) -> Result<Self> {
        let expected = shape_dim + color_dim + FIXED_PARAMS;
        if values.len() != expected {
            return Err(GazeError::DimensionMismatch {
                what: "parameter vector",
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            values: values.to_vec(),
            shape_dim,
            color_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_dim
    }

    pub fn color_dim(&self) -> usize {
        self.color_dim
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.shape_dim, self.color_dim)
    }

    pub fn z_s(&self) -> &[f64] {
        &self.values[..self.shape_dim]
    }

    pub fn z_a(&self) -> &[f64] {
        &self.values[self.shape_dim..self.shape_dim + self.color_dim]
    }

    pub fn z_s_mut(&mut self) -> &mut [f64] {
        &mut self.values[..self.shape_dim]
    }

    pub fn r(&self) -> [f64; 3] {
        let o = self.layout().rotation;
        [self.values[o], self.values[o + 1], self.values[o + 2]]
    }

    pub fn t(&self) -> [f64; 3] {
        let o = self.layout().translation;
        [self.values[o], self.values[o + 1], self.values[o + 2]]
    }

    pub fn set_t(&mut self, t: [f64; 3]) {
        let o = self.layout().translation;
        self.values[o..o + 3].copy_from_slice(&t);
    }

    pub fn set_r(&mut self, r: [f64; 3]) {
        let o = self.layout().rotation;
        self.values[o..o + 3].copy_from_slice(&r);
    }

    pub fn log_f(&self) -> f64 {
        self.values[self.layout().log_scale]
    }

    /// Scale `f = exp(log f)`, always positive.
    pub fn f(&self) -> f64 {
        self.log_f().exp()
    }

    pub fn z_e(&self) -> [f64; 4] {
        let o = self.layout().gaze;
        [
            self.values[o],
            self.values[o + 1],
            self.values[o + 2],
            self.values[o + 3],
        ]
    }

    pub fn set_z_e(&mut self, z_e: [f64; 4]) {
        let o = self.layout().gaze;
        self.values[o..o + 4].copy_from_slice(&z_e);
    }

    pub fn gaze_angles(&self) -> [GazeAngles; 2] {
        let z = self.z_e();
        [GazeAngles::new(z[0], z[1]), GazeAngles::new(z[2], z[3])]
    }

    pub fn pose(&self) -> PoseParams {
        PoseParams {
            r: self.r(),
            t: self.t(),
            f: self.f(),
        }
    }
}

/// Offsets of each parameter block within a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub shape: usize,
    pub color: usize,
    pub rotation: usize,
    pub translation: usize,
    pub log_scale: usize,
    pub gaze: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(shape_dim: usize, color_dim: usize) -> Self {
        let rotation = shape_dim + color_dim;
        Self {
            shape: 0,
            color: shape_dim,
            rotation,
            translation: rotation + 3,
            log_scale: rotation + 6,
            gaze: rotation + 7,
            len: rotation + FIXED_PARAMS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    ForwardAd,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Stop once an accepted step lowers the loss by no more than this.
    pub loss_tolerance: f64,
    /// Added to `loss_tolerance`, scaled by the current loss.
    pub relative_loss_tolerance: f64,
    /// Stop once the proposed step's ∞-norm falls below this, relative to
    /// `1 + ‖x‖∞`.
    pub step_tolerance: f64,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub gradient_mode: GradientMode,
    pub weights: LossWeights,
    /// Use `‖·‖₁⁴` instead of plain L1 for the origin, target and gaze losses.
    pub literal_norm_mode: bool,
    /// Fit without the vergence group first; see [`fit`].
    pub warm_start: bool,
    pub warm_start_iters: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            loss_tolerance: 1e-14,
            relative_loss_tolerance: 1e-10,
            step_tolerance: 1e-12,
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 3.0,
            gradient_mode: GradientMode::ForwardAd,
            weights: LossWeights::default(),
            literal_norm_mode: false,
            warm_start: true,
            warm_start_iters: 100,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.weights.pix != 0.0 {
            return Err(GazeError::InvalidWeights(
                "pixel loss is not available; pix must be 0".into(),
            ));
        }
        let positive = [
            ("initial_damping", self.initial_damping),
            ("damping_up", self.damping_up - 1.0),
            ("damping_down", self.damping_down - 1.0),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(GazeError::InvalidInput(format!("{name} out of range")));
            }
        }
        if !(self.loss_tolerance >= 0.0
            && self.relative_loss_tolerance >= 0.0
            && self.step_tolerance >= 0.0)
        {
            return Err(GazeError::InvalidInput(
                "tolerances must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn powers(&self) -> NormPowers {
        NormPowers::select(self.literal_norm_mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    IterationBudget,
    LossTolerance,
    StepTolerance,
    ZeroLoss,
    /// Every proposed step was rejected until the damping limit.
    Stalled,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::IterationBudget => "iteration budget",
            StopReason::LossTolerance => "loss tolerance",
            StopReason::StepTolerance => "step tolerance",
            StopReason::ZeroLoss => "zero loss",
            StopReason::Stalled => "stalled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ParamVector,
    /// One entry for the starting point of the final stage, then one per
    /// accepted step.
    pub loss_trace: Vec<LossVector>,
    pub total_trace: Vec<f64>,
    pub converged: bool,
    pub reason: StopReason,
    pub iterations: usize,
    /// Final vergence diagnostics: `k_i ≤ 0` per eye, and the parallel flag.
    pub diverging: [bool; 2],
    pub parallel: bool,
    /// Not serialized, so saved results stay reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl FitResult {
    pub fn final_total(&self) -> f64 {
        *self
            .total_trace
            .last()
            .expect("trace holds the initial point")
    }
}

/// Intermediate quantities of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward<S> {
    pub landmarks: Vec<[S; 2]>,
    pub origins: [Vec3<S>; 2],
    pub gaze: [Vec3<S>; 2],
    pub vergence: VergenceSolution<S>,
}

/// Precomputed, immutable view of the model used by the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardModel<'a> {
    basis: &'a LinearBasis,
    cam: &'a CameraIntrinsics,
    centroid_left: CentroidBasis,
    centroid_right: CentroidBasis,
}

impl<'a> ForwardModel<'a> {
    pub fn new(basis: &'a LinearBasis, cam: &'a CameraIntrinsics) -> Self {
        Self {
            basis,
            cam,
            centroid_left: CentroidBasis::new(basis, &basis.left_eyeball_indices),
            centroid_right: CentroidBasis::new(basis, &basis.right_eyeball_indices),
        }
    }

    pub fn basis(&self) -> &LinearBasis {
        self.basis
    }

    pub fn camera(&self) -> &CameraIntrinsics {
        self.cam
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.basis.shape_dim(), self.basis.color_dim())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        let expected = self.layout().len;
        if len != expected {
            return Err(GazeError::DimensionMismatch {
                what: "parameter vector",
                expected,
                got: len,
            });
        }
        Ok(())
    }

    /// Eyeball centres and gaze directions; unlike [`ForwardModel::forward`]
    /// this never projects, so it cannot fail on depth.
    pub fn forward_origins_and_gaze(
        &self,
        params: &ParamVector,
    ) -> ([Vec3<f64>; 2], [Vec3<f64>; 2]) {
        let rot = rodrigues(params.r());
        let (f, t) = (params.f(), params.t());
        let origins = [
            pose_point(&rot, f, t, self.centroid_left.evaluate(params.z_s())),
            pose_point(&rot, f, t, self.centroid_right.evaluate(params.z_s())),
        ];
        (
            origins,
            params.gaze_angles().map(crate::vergence::gaze_vector),
        )
    }

    /// Shape, pose, projection, eyeball centres, gaze rays and vergence for
    /// one parameter vector.
    pub fn forward<S: Scalar>(&self, x: &[S]) -> Result<Forward<S>> {
        self.check_len(x.len())?;
        let lay = self.layout();
        let z_s = &x[..lay.color];
        let r = [x[lay.rotation], x[lay.rotation + 1], x[lay.rotation + 2]];
        let t = [
            x[lay.translation],
            x[lay.translation + 1],
            x[lay.translation + 2],
        ];
        let scale = x[lay.log_scale].exp();
        let z_e = &x[lay.gaze..lay.gaze + 4];
        let rot = rodrigues(r);

        let landmarks = self
            .basis
            .landmark_indices
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let p = pose_point(&rot, scale, t, shape_vertex(self.basis, v, z_s));
                self.cam.project_generic(p).map_err(|e| match e {
                    GazeError::DepthNonPositive { z, .. } => GazeError::DepthNonPositive {
                        z,
                        landmark: Some(i),
                    },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let origins = [
            pose_point(&rot, scale, t, self.centroid_left.evaluate(z_s)),
            pose_point(&rot, scale, t, self.centroid_right.evaluate(z_s)),
        ];
        let gaze = [
            gaze_vector_generic(z_e[0], z_e[1]),
            gaze_vector_generic(z_e[2], z_e[3]),
        ];
        let vergence = solve_vergence_or_parallel(
            &GazeRay {
                origin: origins[0],
                direction: gaze[0],
            },
            &GazeRay {
                origin: origins[1],
                direction: gaze[1],
            },
        );
        Ok(Forward {
            landmarks,
            origins,
            gaze,
            vergence,
        })
    }
}

/// The loss slots for one forward pass, plus the behind-the-head penalty.
#[derive(Debug, Clone)]
pub(crate) struct LossValues<S> {
    pub values: [S; LOSS_COUNT],
    pub active: [bool; LOSS_COUNT],
    pub penalty: S,
}

impl<S: Scalar> LossValues<S> {
    fn to_vector(&self) -> LossVector {
        LossVector {
            values: self.values.map(|v| v.re()),
            active: self.active,
        }
    }

    fn total(&self, weights: &LossWeights) -> S {
        let lambda = weights.lambda();
        let mut total = S::zero();
        for i in 0..LOSS_COUNT {
            if self.active[i] {
                total += self.values[i] * lambda[i];
            }
        }
        total + self.penalty * weights.behind
    }
}

/// Model, camera, supervision and weighting for one fitting problem.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    model: ForwardModel<'a>,
    obs: &'a Observations,
    weights: LossWeights,
    powers: NormPowers,
}

impl<'a> Problem<'a> {
    pub fn new(
        basis: &'a LinearBasis,
        cam: &'a CameraIntrinsics,
        obs: &'a Observations,
        weights: LossWeights,
        powers: NormPowers,
    ) -> Result<Self> {
        weights.validate()?;
        obs.validate()?;
        Ok(Self {
            model: ForwardModel::new(basis, cam),
            obs,
            weights,
            powers,
        })
    }

    pub fn model(&self) -> &ForwardModel<'a> {
        &self.model
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub(crate) fn loss_values<S: Scalar>(
        &self,
        x: &[S],
        fwd: &Forward<S>,
    ) -> Result<LossValues<S>> {
        let lay = self.model.layout();
        let mut values = [S::zero(); LOSS_COUNT];
        let mut active = [false; LOSS_COUNT];

        values[LossKind::Lm as usize] = loss_landmark(&fwd.landmarks, &self.obs.landmarks_gt)?;
        active[LossKind::Lm as usize] = true;

        if let Some(origins) = &self.obs.origins_gt {
            values[LossKind::Origin as usize] =
                loss_origin(fwd.origins, origins, self.powers.origin);
            active[LossKind::Origin as usize] = true;
        }
        if let Some(target) = self.obs.target_gt {
            values[LossKind::Target as usize] =
                loss_target(fwd.vergence.target, target, self.powers.target);
            active[LossKind::Target as usize] = true;
        }
        values[LossKind::Skew as usize] = loss_skew(&fwd.vergence);
        active[LossKind::Skew as usize] = true;
        if let Some(gaze) = &self.obs.gaze_gt {
            let z_e = [
                x[lay.gaze],
                x[lay.gaze + 1],
                x[lay.gaze + 2],
                x[lay.gaze + 3],
            ];
            values[LossKind::Gaze as usize] = loss_gaze(z_e, gaze, self.powers.gaze);
            active[LossKind::Gaze as usize] = true;
        }
        values[LossKind::Reg as usize] = loss_reg(&x[..lay.color], &x[lay.color..lay.rotation]);
        active[LossKind::Reg as usize] = true;

        Ok(LossValues {
            values,
            active,
            penalty: penalty_behind(&fwd.vergence),
        })
    }

    fn total_generic<S: Scalar>(&self, x: &[S]) -> Result<S> {
        let fwd = self.model.forward(x)?;
        Ok(self.loss_values(x, &fwd)?.total(&self.weights))
    }

    /// Loss vector and weighted total at `params`.
    pub fn evaluate(&self, params: &ParamVector) -> Result<(LossVector, f64)> {
        let x = params.as_slice();
        let fwd = self.model.forward(x)?;
        let lv = self.loss_values(x, &fwd)?;
        let vec = lv.to_vector();
        let total = combine_lambda(&vec, &self.weights.lambda()) + lv.penalty * self.weights.behind;
        Ok((vec, total))
    }

    pub fn total(&self, params: &ParamVector) -> Result<f64> {
        self.evaluate(params).map(|(_, t)| t)
    }

    /// Gradient of the total loss, one dual-number pass per parameter or by
    /// central differences.
    pub fn gradient(&self, params: &ParamVector, mode: GradientMode) -> Result<Vec<f64>> {
        let x = params.as_slice();
        let n = x.len();
        let grad: Vec<f64> = match mode {
            GradientMode::ForwardAd => {
                let mut duals: Vec<Dual> = x.iter().map(|&v| Dual::cst(v)).collect();
                let mut g = Vec::with_capacity(n);
                for j in 0..n {
                    duals[j].eps = 1.0;
                    g.push(self.total_generic(&duals)?.eps);
                    duals[j].eps = 0.0;
                }
                g
            }
            GradientMode::FiniteDifference => {
                let mut xp = x.to_vec();
                let mut g = Vec::with_capacity(n);
                for j in 0..n {
                    let h = fd_step(x[j]);
                    xp[j] = x[j] + h;
                    let up = self.total_generic(&xp)?;
                    xp[j] = x[j] - h;
                    let down = self.total_generic(&xp)?;
                    xp[j] = x[j];
                    g.push((up - down) / (2.0 * h));
                }
                g
            }
        };
        if let Some(index) = grad.iter().position(|v| !v.is_finite()) {
            return Err(GazeError::NonFiniteGradient { index });
        }
        Ok(grad)
    }

    /// Smallest magnitude among the arguments of the L1 terms at `params`;
    /// finite-difference checks near zero straddle a kink.
    pub fn min_l1_argument(&self, params: &ParamVector) -> Result<f64> {
        let res = self.residuals::<f64>(params.as_slice())?;
        Ok(res.l1.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())))
    }

    /// Residual form of the active losses:
    /// `total = Σ sq² + Σ_groups w·(Σ|l1|)^P`.
    fn residuals<S: Scalar>(&self, x: &[S]) -> Result<Residuals<S>> {
        let fwd = self.model.forward(x)?;
        let lay = self.model.layout();
        let w = &self.weights;
        let mut res = Residuals {
            sq: Vec::new(),
            l1: Vec::new(),
            groups: Vec::new(),
        };

        let lm = w.effective(LossKind::Lm);
        if lm > 0.0 {
            let s = lm.sqrt();
            for (p, q) in fwd.landmarks.iter().zip(self.obs.landmarks_gt.points()) {
                res.sq.push((p[0] - q[0]) * s);
                res.sq.push((p[1] - q[1]) * s);
            }
        }
        let skew = w.effective(LossKind::Skew);
        if skew > 0.0 {
            let s = skew.sqrt();
            res.sq.extend(fwd.vergence.gap().map(|v| v * s));
        }
        let reg = w.effective(LossKind::Reg);
        if reg > 0.0 {
            let s = reg.sqrt();
            res.sq.extend(x[..lay.rotation].iter().map(|&v| v * s));
        }
        if w.behind > 0.0 {
            let s = w.behind.sqrt();
            res.sq.push((-fwd.vergence.k_left).relu() * s);
            res.sq.push((-fwd.vergence.k_right).relu() * s);
        }

        let o = w.effective(LossKind::Origin);
        if let (true, Some(origins)) = (o > 0.0, &self.obs.origins_gt) {
            for r in origin_residuals(fwd.origins, origins) {
                res.push_group(&r, o, self.powers.origin);
            }
        }
        let t = w.effective(LossKind::Target);
        if let (true, Some(target)) = (t > 0.0, self.obs.target_gt) {
            let r = crate::scalar::sub3(fwd.vergence.target, lift3(target));
            res.push_group(&r, t, self.powers.target);
        }
        let g = w.effective(LossKind::Gaze);
        if let (true, Some(gaze)) = (g > 0.0, &self.obs.gaze_gt) {
            let z_e = [
                x[lay.gaze],
                x[lay.gaze + 1],
                x[lay.gaze + 2],
                x[lay.gaze + 3],
            ];
            res.push_group(&gaze_residuals(z_e, gaze), g, self.powers.gaze);
        }
        Ok(res)
    }

    /// Residual values and their Jacobian (row-major, one row per residual).
    fn linearize(&self, x: &[f64], mode: GradientMode) -> Result<Linearization> {
        let base = self.residuals::<f64>(x)?;
        let n = x.len();
        let (n_sq, n_l1) = (base.sq.len(), base.l1.len());
        let mut j_sq = DMatrix::<f64>::zeros(n_sq, n);
        let mut j_l1 = DMatrix::<f64>::zeros(n_l1, n);
        match mode {
            GradientMode::ForwardAd => {
                let mut duals: Vec<Dual> = x.iter().map(|&v| Dual::cst(v)).collect();
                for j in 0..n {
                    duals[j].eps = 1.0;
                    let r = self.residuals(&duals)?;
                    duals[j].eps = 0.0;
                    for (i, v) in r.sq.iter().enumerate() {
                        j_sq[(i, j)] = v.eps;
                    }
                    for (i, v) in r.l1.iter().enumerate() {
                        j_l1[(i, j)] = v.eps;
                    }
                }
            }
            GradientMode::FiniteDifference => {
                let mut xp = x.to_vec();
                for j in 0..n {
                    let h = fd_step(x[j]);
                    xp[j] = x[j] + h;
                    let up = self.residuals::<f64>(&xp)?;
                    xp[j] = x[j] - h;
                    let down = self.residuals::<f64>(&xp)?;
                    xp[j] = x[j];
                    for i in 0..n_sq {
                        j_sq[(i, j)] = (up.sq[i] - down.sq[i]) / (2.0 * h);
                    }
                    for i in 0..n_l1 {
                        j_l1[(i, j)] = (up.l1[i] - down.l1[i]) / (2.0 * h);
                    }
                }
            }
        }
        Ok(Linearization { base, j_sq, j_l1 })
    }
}

/// Central-difference step for a coordinate of magnitude `|x|`.
pub fn fd_step(x: f64) -> f64 {
    1e-6f64.max(1e-6 * x.abs())
}

#[derive(Debug, Clone)]
struct L1Group {
    start: usize,
    len: usize,
    weight: f64,
    power: f64,
}

#[derive(Debug, Clone)]
struct Residuals<S> {
    sq: Vec<S>,
    l1: Vec<S>,
    groups: Vec<L1Group>,
}

impl<S: Scalar> Residuals<S> {
    fn push_group(&mut self, r: &[S], weight: f64, power: f64) {
        self.groups.push(L1Group {
            start: self.l1.len(),
            len: r.len(),
            weight,
            power,
        });
        self.l1.extend_from_slice(r);
    }
}

#[cfg(test)]
impl Residuals<f64> {
    fn total(&self) -> f64 {
        let sq: f64 = self.sq.iter().map(|v| v * v).sum();
        let l1: f64 = self
            .groups
            .iter()
            .map(|g| {
                let u: f64 = self.l1[g.start..g.start + g.len]
                    .iter()
                    .map(|v| v.abs())
                    .sum();
                g.weight * u.powf(g.power)
            })
            .sum();
        sq + l1
    }
}

struct Linearization {
    base: Residuals<f64>,
    j_sq: DMatrix<f64>,
    j_l1: DMatrix<f64>,
}

/// Floor on `|x|` in the reweighted curvature of an L1 term.
const L1_CURVATURE_FLOOR: f64 = 1e-12;
const MAX_DAMPING: f64 = 1e16;

impl Linearization {
    /// Gradient and curvature model. Squared residuals contribute the
    /// Gauss-Newton term; each `w·u^P` group with `u = Σ|x_i|` contributes
    /// its exact gradient and the curvature of the quadratic majorizer
    /// `|x| ≤ x²/(2|x₀|) + |x₀|/2`, plus `P(P−1)u^(P−2)` along the sign
    /// direction.
    fn normal_equations(&self) -> (DMatrix<f64>, DVector<f64>) {
        let r = DVector::from_column_slice(&self.base.sq);
        let jt = self.j_sq.transpose();
        let mut h = &jt * &self.j_sq * 2.0;
        let mut g = &jt * r * 2.0;
        for grp in &self.base.groups {
            let rows = self.j_l1.rows(grp.start, grp.len);
            let vals = &self.base.l1[grp.start..grp.start + grp.len];
            let u: f64 = vals.iter().map(|v| v.abs()).sum();
            let slope = grp.weight * grp.power * u.powf(grp.power - 1.0);
            let signs = DVector::from_iterator(grp.len, vals.iter().map(|&v| sign0(v)));
            let signed = rows.transpose() * &signs;
            g += &signed * slope;
            let curv = DVector::from_iterator(
                grp.len,
                vals.iter().map(|v| 1.0 / v.abs().max(L1_CURVATURE_FLOOR)),
            );
            let weighted = DMatrix::from_diagonal(&curv) * rows;
            h += rows.transpose() * weighted * slope;
            if grp.power != 1.0 && u > 0.0 {
                let c = grp.weight * grp.power * (grp.power - 1.0) * u.powf(grp.power - 2.0);
                h += &signed * signed.transpose() * c;
            }
        }
        (h, g)
    }
}

/// Loss vector and weighted total at `params`.
pub fn evaluate(
    params: &ParamVector,
    basis: &LinearBasis,
    cam: &CameraIntrinsics,
    obs: &Observations,
    weights: &LossWeights,
    powers: NormPowers,
) -> Result<(LossVector, f64)> {
    Problem::new(basis, cam, obs, *weights, powers)?.evaluate(params)
}

/// Gradient of the total loss with respect to every parameter.
pub fn gradient(
    params: &ParamVector,
    basis: &LinearBasis,
    cam: &CameraIntrinsics,
    obs: &Observations,
    weights: &LossWeights,
    powers: NormPowers,
    mode: GradientMode,
) -> Result<Vec<f64>> {
    Problem::new(basis, cam, obs, *weights, powers)?.gradient(params, mode)
}

struct Stage {
    x: ParamVector,
    loss_trace: Vec<LossVector>,
    total_trace: Vec<f64>,
    reason: StopReason,
    converged: bool,
    iterations: usize,
}

/// One Levenberg-Marquardt run on `problem`, starting at a feasible `x`.
fn minimize(problem: &Problem, x: ParamVector, budget: usize, config: &FitConfig) -> Result<Stage> {
    let mut x = x;
    let (mut vec, mut total) = problem.evaluate(&x)?;
    let mut loss_trace = vec![vec];
    let mut total_trace = vec![total];
    let mut damping = config.initial_damping;
    let mut iterations = 0;
    let mut reason = StopReason::IterationBudget;
    let mut converged = false;

    'outer: while iterations < budget {
        if total == 0.0 {
            break;
        }
        iterations += 1;
        let lin = problem.linearize(x.as_slice(), config.gradient_mode)?;
        let (h, g) = lin.normal_equations();
        let n = x.len();
        let max_diag = (0..n).map(|i| h[(i, i)]).fold(0.0, f64::max);
        let floor = (max_diag * 1e-12).max(1e-300);
        let x_scale = 1.0 + x.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));

        loop {
            let mut a = h.clone();
            for i in 0..n {
                a[(i, i)] += damping * h[(i, i)].max(floor);
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    damping *= config.damping_up;
                    if damping > MAX_DAMPING {
                        reason = StopReason::Stalled;
                        break 'outer;
                    }
                    continue;
                }
            };
            if step.amax() <= config.step_tolerance * x_scale {
                reason = StopReason::StepTolerance;
                converged = true;
                break 'outer;
            }
            let mut candidate = x.clone();
            for (c, s) in candidate.as_mut_slice().iter_mut().zip(step.iter()) {
                *c += s;
            }
            match problem.evaluate(&candidate) {
                Ok((cvec, ctotal)) if ctotal.is_finite() && ctotal < total => {
                    let decrease = total - ctotal;
                    x = candidate;
                    vec = cvec;
                    total = ctotal;
                    loss_trace.push(vec);
                    total_trace.push(total);
                    damping = (damping / config.damping_down).max(1e-15);
                    if decrease
                        <= config.loss_tolerance
                            + config.relative_loss_tolerance * (total + decrease)
                    {
                        reason = StopReason::LossTolerance;
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
                // Rejected: loss went up, or the candidate put a landmark
                // behind the camera.
                _ => {
                    damping *= config.damping_up;
                    if damping > MAX_DAMPING {
                        reason = StopReason::Stalled;
                        break 'outer;
                    }
                }
            }
        }
    }
    if total == 0.0 {
        reason = StopReason::ZeroLoss;
        converged = true;
    }
    Ok(Stage {
        x,
        loss_trace,
        total_trace,
        reason,
        converged,
        iterations,
    })
}

/// Damped Gauss-Newton with step rejection.
///
/// With `warm_start` set and the vergence group active alongside another
/// group, a first stage minimizes the objective without the vergence group.
/// The target loss is singular where the two gaze lines turn parallel, so a
/// start whose rays diverge cannot reach a converging solution by small
/// steps; the first stage moves the gaze onto the smooth supervision first.
/// The traces then start at the second stage's starting point.
pub fn fit(
    obs: &Observations,
    basis: &LinearBasis,
    cam: &CameraIntrinsics,
    init: &ParamVector,
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate()?;
    let start = Instant::now();
    let problem = Problem::new(basis, cam, obs, config.weights, config.powers())?;
    let total = problem
        .total(init)
        .map_err(|e| GazeError::InfeasibleInit(Box::new(e)))?;
    if !total.is_finite() {
        return Err(GazeError::InfeasibleInit(Box::new(
            GazeError::InvalidInput("initial loss is not finite".into()),
        )));
    }

    let mut x = init.clone();
    let mut warm_iterations = 0;
    let w = &config.weights;
    let others = w.group_weights.g1 > 0.0
        || (w.group_weights.g2 > 0.0 && w.g > 0.0 && obs.gaze_gt.is_some());
    if config.warm_start && config.max_iters > 0 && w.group_weights.g3 > 0.0 && others {
        let pre = Problem::new(
            basis,
            cam,
            obs,
            w.with_groups(true, true, false),
            config.powers(),
        )?;
        let stage = minimize(
            &pre,
            x,
            config.warm_start_iters.min(config.max_iters),
            config,
        )?;
        warm_iterations = stage.iterations;
        x = stage.x;
    }
    let stage = minimize(&problem, x, config.max_iters - warm_iterations, config)?;

    let fwd = problem.model.forward(stage.x.as_slice())?;
    let iterations = warm_iterations + stage.iterations;
    debug!(
        "fit finished after {iterations} iterations: {} (loss {:e})",
        stage.reason.as_str(),
        stage.total_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(FitResult {
        params: stage.x,
        loss_trace: stage.loss_trace,
        total_trace: stage.total_trace,
        converged: stage.converged,
        reason: stage.reason,
        iterations,
        diverging: fwd.vergence.diverging,
        parallel: fwd.vergence.parallel,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Cold start: mean shape and color, no head rotation, unit scale, and a
/// translation placing the mean-model landmarks over the observed ones at the
/// depth implied by their spread. Both eyes look at the observed target when
/// there is one in front of them, otherwise along +z.
pub fn init_params(
    obs: &Observations,
    basis: &LinearBasis,
    cam: &CameraIntrinsics,
) -> Result<ParamVector> {
    let pts = obs.landmarks_gt.points();
    let n = pts.len() as f64;
    let mean2 = pts
        .iter()
        .fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
    // Spread in normalized image coordinates, comparable to model meters / depth.
    let spread_img = (pts
        .iter()
        .map(|p| {
            let dx = (p[0] - mean2[0]) / cam.fx;
            let dy = (p[1] - mean2[1]) / cam.fy;
            dx * dx + dy * dy
        })
        .sum::<f64>()
        / n)
        .sqrt();
    if !(spread_img > 1e-12) {
        return Err(GazeError::DegenerateLandmarks(
            "observed landmarks have zero spread".into(),
        ));
    }
    let model: Vec<[f64; 3]> = basis
        .landmark_indices
        .iter()
        .map(|&i| basis.mean_shape[i])
        .collect();
    let m = model.len() as f64;
    let mean3 = model.iter().fold([0.0; 3], |a, p| {
        [a[0] + p[0] / m, a[1] + p[1] / m, a[2] + p[2] / m]
    });
    let spread_model = (model
        .iter()
        .map(|p| {
            let dx = p[0] - mean3[0];
            let dy = p[1] - mean3[1];
            dx * dx + dy * dy
        })
        .sum::<f64>()
        / m)
        .sqrt();
    if !(spread_model > 0.0) {
        return Err(GazeError::DegenerateLandmarks(
            "model landmarks have zero spread".into(),
        ));
    }
    let depth = spread_model / spread_img;
    let centre = [
        (mean2[0] - cam.cx) / cam.fx * depth,
        (mean2[1] - cam.cy) / cam.fy * depth,
        depth,
    ];
    let t = [
        centre[0] - mean3[0],
        centre[1] - mean3[1],
        centre[2] - mean3[2],
    ];
    let mut params = ParamVector::zeros(basis.shape_dim(), basis.color_dim());
    params.set_t(t);
    if params.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(GazeError::DegenerateLandmarks(
            "initial translation is not finite".into(),
        ));
    }
    if let Some(target) = obs.target_gt {
        if let Ok(fwd) = ForwardModel::new(basis, cam).forward(params.as_slice()) {
            if let Some(z_e) = aim_at(fwd.origins, target) {
                params.set_z_e(z_e);
            }
        }
    }
    Ok(params)
}

/// Gaze angles pointing each origin at `target`, or `None` unless the target
/// lies in front of both eyes.
pub fn aim_at(origins: [[f64; 3]; 2], target: [f64; 3]) -> Option<[f64; 4]> {
    let mut z_e = [0.0; 4];
    for (i, o) in origins.iter().enumerate() {
        let d = crate::scalar::sub3(target, *o);
        if !(d[2] > 1e-3 * crate::scalar::norm3(d)) {
            return None;
        }
        let g = GazeAngles::from_direction(d).ok()?;
        z_e[2 * i] = g.elevation;
        z_e[2 * i + 1] = g.azimuth;
    }
    Some(z_e)
}

/// Camera-frame mesh for `params`: posed shape, clamped colors, and each
/// eyeball turned so its forward pole points along its gaze.
pub fn fitted_mesh(basis: &LinearBasis, params: &ParamVector) -> Result<EyeRegionMesh> {
    if params.shape_dim() != basis.shape_dim() || params.color_dim() != basis.color_dim() {
        return Err(GazeError::DimensionMismatch {
            what: "parameter vector",
            expected: Layout::new(basis.shape_dim(), basis.color_dim()).len,
            got: params.len(),
        });
    }
    let model = reconstruct_shape(basis, &ShapeParams(params.z_s().to_vec()))?;
    let mut posed = apply_pose(&model, &params.pose())?;
    posed.colors = clamp_colors(&reconstruct_color(
        basis,
        &ColorParams(params.z_a().to_vec()),
    )?);
    let head_t = transpose(&rodrigues(params.r()));
    let [left, right] = params
        .gaze_angles()
        .map(|g| mat_mul(&gaze_rotation(g), &head_t));
    rotate_eyeballs(&posed, basis, &left, &right)
}

/// Landmarks predicted by `params`.
pub fn predicted_landmarks(
    basis: &LinearBasis,
    cam: &CameraIntrinsics,
    params: &ParamVector,
) -> Result<Landmarks2D> {
    let fwd = ForwardModel::new(basis, cam).forward(params.as_slice())?;
    Landmarks2D::new(fwd.landmarks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::project_landmarks;
    use crate::model::{apply_pose, eyeball_centres, reconstruct_shape, ShapeParams};
    use crate::synthetic::{synthetic_basis, BasisConfig};

    fn setup() -> (LinearBasis, CameraIntrinsics) {
        (
            synthetic_basis(&BasisConfig::default(), 5).unwrap(),
            CameraIntrinsics::default(),
        )
    }

    fn some_params(b: &LinearBasis) -> ParamVector {
        let z_s: Vec<f64> = (0..b.shape_dim()).map(|k| 0.3 - 0.1 * k as f64).collect();
        let z_a: Vec<f64> = (0..b.color_dim()).map(|k| 0.2 * k as f64).collect();
        ParamVector::from_parts(
            &z_s,
            &z_a,
            [0.05, -0.1, 0.02],
            [0.02, -0.01, 1.0],
            0.03,
            [0.05, -0.02, 0.04, -0.08],
        )
    }

    /// Aims both eyes of `p` at a point in front of the head.
    fn converging(b: &LinearBasis, cam: &CameraIntrinsics, mut p: ParamVector) -> ParamVector {
        let fwd = ForwardModel::new(b, cam).forward(p.as_slice()).unwrap();
        let target = [0.05, 0.02, fwd.origins[0][2] + 0.6];
        let mut z_e = [0.0; 4];
        for i in 0..2 {
            let d = crate::scalar::sub3(target, fwd.origins[i]);
            let g = GazeAngles::from_direction(d).unwrap();
            z_e[2 * i] = g.elevation;
            z_e[2 * i + 1] = g.azimuth;
        }
        p.set_z_e(z_e);
        p
    }

    fn obs_for(b: &LinearBasis, cam: &CameraIntrinsics, p: &ParamVector) -> Observations {
        let fwd = ForwardModel::new(b, cam).forward(p.as_slice()).unwrap();
        Observations {
            landmarks_gt: Landmarks2D::new(fwd.landmarks).unwrap(),
            target_gt: Some(fwd.vergence.target),
            origins_gt: Some(fwd.origins.to_vec()),
            gaze_gt: Some(p.gaze_angles()),
        }
    }

    #[test]
    fn fitted_mesh_points_pupils_along_gaze() {
        let (b, cam) = setup();
        let p = some_params(&b);
        let mesh = fitted_mesh(&b, &p).unwrap();
        let fwd = ForwardModel::new(&b, &cam).forward(p.as_slice()).unwrap();
        // The forward pole of each eyeball is its vertex with the largest
        // model-frame z.
        for (side, indices) in [&b.left_eyeball_indices, &b.right_eyeball_indices]
            .iter()
            .enumerate()
        {
            let pole = *indices
                .iter()
                .max_by(|&&i, &&j| b.mean_shape[i][2].total_cmp(&b.mean_shape[j][2]))
                .unwrap();
            let dir = crate::scalar::sub3(mesh.vertices[pole], fwd.origins[side]);
            let err = crate::camera::angular_error(dir, fwd.gaze[side]).unwrap();
            assert!(err < 1e-6, "side {side}: {err}");
        }
        assert!(mesh
            .colors
            .iter()
            .flatten()
            .all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn param_layout_and_serde() {
        let (b, _) = setup();
        let p = some_params(&b);
        assert_eq!(p.len(), b.shape_dim() + b.color_dim() + 11);
        assert_eq!(p.t(), [0.02, -0.01, 1.0]);
        assert_eq!(p.f(), 0.03f64.exp());
        assert!(p.f() > 0.0);
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"log_f\""));
        let back: ParamVector = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn forward_matches_mesh_route() {
        let (b, cam) = setup();
        let p = some_params(&b);
        let fwd = ForwardModel::new(&b, &cam).forward(p.as_slice()).unwrap();
        let mesh = apply_pose(
            &reconstruct_shape(&b, &ShapeParams(p.z_s().to_vec())).unwrap(),
            &p.pose(),
        )
        .unwrap();
        let lm = project_landmarks(&cam, &mesh, &b).unwrap();
        assert_eq!(lm.points(), &fwd.landmarks[..]);
        let (l, r) = eyeball_centres(&mesh, &b).unwrap();
        for i in 0..3 {
            assert!((l[i] - fwd.origins[0][i]).abs() < 1e-14);
            assert!((r[i] - fwd.origins[1][i]).abs() < 1e-14);
        }
    }

    #[test]
    fn truth_has_zero_data_loss() {
        let (b, cam) = setup();
        let p = converging(&b, &cam, some_params(&b));
        let obs = obs_for(&b, &cam, &p);
        let (vec, _) = evaluate(
            &p,
            &b,
            &cam,
            &obs,
            &LossWeights::default(),
            NormPowers::PLAIN,
        )
        .unwrap();
        for kind in [
            LossKind::Lm,
            LossKind::Origin,
            LossKind::Target,
            LossKind::Skew,
            LossKind::Gaze,
        ] {
            assert!(vec.get(kind) <= 1e-12, "{kind:?} = {}", vec.get(kind));
        }
        assert!(!vec.active[LossKind::Pix as usize]);
        let reg = loss_reg::<f64>(p.z_s(), p.z_a());
        assert_eq!(vec.get(LossKind::Reg), reg);
    }

    #[test]
    fn zero_weights_give_zero_total() {
        let (b, cam) = setup();
        let p = some_params(&b);
        let mut obs = obs_for(&b, &cam, &p);
        obs.target_gt = Some([1.0, 2.0, 3.0]);
        let (_, total) = evaluate(
            &p,
            &b,
            &cam,
            &obs,
            &LossWeights::uniform(0.0),
            NormPowers::PLAIN,
        )
        .unwrap();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn color_only_moves_regularizer() {
        let (b, cam) = setup();
        let p = some_params(&b);
        let obs = obs_for(&b, &cam, &p);
        let w = LossWeights::default();
        let (v0, _) = evaluate(&p, &b, &cam, &obs, &w, NormPowers::PLAIN).unwrap();
        let mut q = p.clone();
        let lay = q.layout();
        q.as_mut_slice()[lay.color] += 0.7;
        let (v1, _) = evaluate(&q, &b, &cam, &obs, &w, NormPowers::PLAIN).unwrap();
        for kind in LossKind::ALL {
            if kind == LossKind::Reg {
                assert_ne!(v0.get(kind), v1.get(kind));
            } else {
                assert_eq!(v0.get(kind), v1.get(kind), "{kind:?}");
            }
        }
    }

    #[test]
    fn reg_only_gradient_is_analytic() {
        let (b, cam) = setup();
        let p = some_params(&b);
        let obs = obs_for(&b, &cam, &p);
        let w = LossWeights::from_array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let g = gradient(
            &p,
            &b,
            &cam,
            &obs,
            &w,
            NormPowers::PLAIN,
            GradientMode::ForwardAd,
        )
        .unwrap();
        let lay = p.layout();
        for (i, gi) in g.iter().enumerate() {
            let expected = if i < lay.rotation {
                2.0 * p.as_slice()[i]
            } else {
                0.0
            };
            assert!((gi - expected).abs() < 1e-15, "{i}: {gi} vs {expected}");
        }
    }

    #[test]
    fn gradient_vanishes_at_truth_for_smooth_losses() {
        let (b, cam) = setup();
        let mut p = some_params(&b);
        for v in p.as_mut_slice()[..b.shape_dim() + b.color_dim()].iter_mut() {
            *v = 0.0;
        }
        let p = converging(&b, &cam, p);
        let obs = obs_for(&b, &cam, &p);
        let w = LossWeights::default();
        for powers in [NormPowers::PLAIN, NormPowers::LITERAL] {
            let g = gradient(&p, &b, &cam, &obs, &w, powers, GradientMode::ForwardAd).unwrap();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= 1e-8, "gradient norm {norm}");
        }
    }

    #[test]
    fn ad_matches_finite_differences() {
        let (b, cam) = setup();
        let truth = some_params(&b);
        let obs = obs_for(&b, &cam, &truth);
        let mut p = truth.clone();
        for (i, v) in p.as_mut_slice().iter_mut().enumerate() {
            *v += 0.01 * ((i * 7 % 5) as f64 - 2.0) + 0.003;
        }
        for powers in [NormPowers::PLAIN, NormPowers::LITERAL] {
            let problem = Problem::new(&b, &cam, &obs, LossWeights::default(), powers).unwrap();
            assert!(problem.min_l1_argument(&p).unwrap() > 1e-6);
            let ad = problem.gradient(&p, GradientMode::ForwardAd).unwrap();
            let fd = problem
                .gradient(&p, GradientMode::FiniteDifference)
                .unwrap();
            for (i, (a, f)) in ad.iter().zip(&fd).enumerate() {
                let rel = (a - f).abs() / a.abs().max(f.abs()).max(1.0);
                assert!(rel < 1e-4, "param {i}: ad {a} fd {f}");
            }
        }
    }

    #[test]
    fn residual_form_reproduces_total() {
        let (b, cam) = setup();
        let truth = some_params(&b);
        let obs = obs_for(&b, &cam, &truth);
        let mut p = truth.clone();
        for (i, v) in p.as_mut_slice().iter_mut().enumerate() {
            *v += 0.02 * ((i % 3) as f64 - 1.0);
        }
        for powers in [NormPowers::PLAIN, NormPowers::LITERAL] {
            let mut w = LossWeights::default();
            w.behind = 0.5;
            w.group_weights.g2 = 3.0;
            let problem = Problem::new(&b, &cam, &obs, w, powers).unwrap();
            let total = problem.total(&p).unwrap();
            let res = problem.residuals::<f64>(p.as_slice()).unwrap().total();
            assert!(
                (total - res).abs() <= 1e-12 * total.max(1.0),
                "{total} vs {res}"
            );
        }
    }

    #[test]
    fn gradient_reports_non_finite_entries() {
        let (b, cam) = setup();
        let p = some_params(&b);
        let obs = obs_for(&b, &cam, &p);
        let mut bad = p.clone();
        let lay = bad.layout();
        bad.as_mut_slice()[lay.log_scale] = 800.0;
        let err = gradient(
            &bad,
            &b,
            &cam,
            &obs,
            &LossWeights::default(),
            NormPowers::PLAIN,
            GradientMode::ForwardAd,
        );
        assert!(err.is_err());
    }

    #[test]
    fn zero_budget_returns_init() {
        let (b, cam) = setup();
        let p = some_params(&b);
        let obs = obs_for(&b, &cam, &p);
        let init = init_params(&obs, &b, &cam).unwrap();
        let cfg = FitConfig {
            max_iters: 0,
            ..Default::default()
        };
        let res = fit(&obs, &b, &cam, &init, &cfg).unwrap();
        assert_eq!(res.params, init);
        assert!(!res.converged);
        assert_eq!(res.reason.as_str(), "iteration budget");
        assert_eq!(res.total_trace.len(), 1);
    }

    #[test]
    fn fit_recovers_perturbed_truth() {
        let (b, cam) = setup();
        let mut truth = some_params(&b);
        for v in truth.as_mut_slice()[..b.shape_dim() + b.color_dim()].iter_mut() {
            *v = 0.0;
        }
        let truth = converging(&b, &cam, truth);
        let obs = obs_for(&b, &cam, &truth);
        let mut init = truth.clone();
        let z = truth.z_e();
        let d = 5f64.to_radians();
        init.set_z_e([z[0] + d, z[1] - d, z[2] - d, z[3] + d]);
        let t = truth.t();
        init.set_t([t[0] + 0.005, t[1], t[2]]);
        let res = fit(&obs, &b, &cam, &init, &FitConfig::default()).unwrap();
        for w in res.total_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let fitted = res.params.gaze_angles();
        let true_g = truth.gaze_angles();
        for i in 0..2 {
            let err = crate::camera::angular_error(
                crate::vergence::gaze_vector(fitted[i]),
                crate::vergence::gaze_vector(true_g[i]),
            )
            .unwrap();
            assert!(err < 0.5, "eye {i}: {err}° ({:?})", res.reason);
        }
        let again = fit(&obs, &b, &cam, &init, &FitConfig::default()).unwrap();
        assert_eq!(again.params, res.params);
        assert_eq!(again.total_trace, res.total_trace);
    }

    #[test]
    fn init_params_examples() {
        let (b, cam) = setup();
        let mut truth = ParamVector::zeros(b.shape_dim(), b.color_dim());
        truth.set_t([0.0, 0.0, 1.0]);
        let obs = obs_for(&b, &cam, &truth);
        let init = init_params(&obs, &b, &cam).unwrap();
        let t = init.t();
        let err = ((t[0]).powi(2) + t[1].powi(2) + (t[2] - 1.0).powi(2)).sqrt();
        assert!(err < 0.1, "translation error {err}");
        assert!(init.as_slice().iter().all(|v| v.is_finite()));

        let flat = Observations {
            landmarks_gt: Landmarks2D::new(vec![[100.0, 100.0]; 31]).unwrap(),
            target_gt: None,
            origins_gt: None,
            gaze_gt: None,
        };
        assert!(matches!(
            init_params(&flat, &b, &cam),
            Err(GazeError::DegenerateLandmarks(_))
        ));
    }

    #[test]
    fn infeasible_init_is_reported() {
        let (b, cam) = setup();
        let p = some_params(&b);
        let obs = obs_for(&b, &cam, &p);
        let mut behind = p.clone();
        behind.set_t([0.0, 0.0, -1.0]);
        assert!(matches!(
            fit(&obs, &b, &cam, &behind, &FitConfig::default()),
            Err(GazeError::InfeasibleInit(_))
        ));
    }

    #[test]
    fn config_rejects_pixel_weight() {
        let mut cfg = FitConfig::default();
        cfg.weights.pix = 1.0;
        assert!(cfg.validate().is_err());
        let cfg: FitConfig =
            serde_json::from_str(r#"{"max_iters": 5, "literal_norm_mode": true}"#).unwrap();
        assert_eq!(cfg.max_iters, 5);
        assert_eq!(cfg.powers(), NormPowers::LITERAL);
    }
}
