//! Binocular vergence geometry: per-eye gaze vectors and the shortest
//! segment between the two gaze lines.

use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};
use crate::scalar::{add3, cross3, det3, dot3, norm3, re3, scale3, sub3, Mat3, Scalar, Vec3};

/// Below this `‖g_r × g_l‖` the gaze lines are treated as parallel.
pub const PARALLEL_EPSILON: f64 = 1e-8;

/// Eye rotation as elevation and azimuth, radians. Intended range for both is
/// `(−π/2, π/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GazeAngles {
    pub elevation: f64,
    pub azimuth: f64,
}

impl GazeAngles {
    pub fn new(elevation: f64, azimuth: f64) -> Self {
        Self { elevation, azimuth }
    }

    /// Angles whose [`gaze_vector`] points along `direction`.
    pub fn from_direction(direction: [f64; 3]) -> Result<Self> {
        let n = norm3(direction);
        if !(n > 0.0) {
            return Err(GazeError::ZeroLength("gaze direction"));
        }
        let g = scale3(direction, 1.0 / n);
        Ok(Self {
            elevation: (-g[1]).clamp(-1.0, 1.0).asin(),
            azimuth: g[0].atan2(g[2]),
        })
    }
}

/// `R_y(a)·R_x(e)·(0, 0, 1)ᵀ = (sin a·cos e, −sin e, cos a·cos e)`.
#[inline]
pub fn gaze_vector_generic<S: Scalar>(elevation: S, azimuth: S) -> Vec3<S> {
    let (se, ce) = (elevation.sin(), elevation.cos());
    let (sa, ca) = (azimuth.sin(), azimuth.cos());
    [sa * ce, -se, ca * ce]
}

pub fn gaze_vector(angles: GazeAngles) -> [f64; 3] {
    gaze_vector_generic(angles.elevation, angles.azimuth)
}

/// `R_y(a)·R_x(e)`, the rotation taking +z onto [`gaze_vector`].
pub fn gaze_rotation(angles: GazeAngles) -> Mat3<f64> {
    let (se, ce) = angles.elevation.sin_cos();
    let (sa, ca) = angles.azimuth.sin_cos();
    [
        [ca, sa * se, sa * ce],
        [0.0, ce, -se],
        [-sa, ca * se, ca * ce],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeRay<S = f64> {
    pub origin: Vec3<S>,
    /// Unit length.
    pub direction: Vec3<S>,
}

impl GazeRay<f64> {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: [f64; 3], direction: [f64; 3]) -> Result<Self> {
        let n = norm3(direction);
        if !(n > 0.0) {
            return Err(GazeError::ZeroLength("ray direction"));
        }
        Ok(Self {
            origin,
            direction: scale3(direction, 1.0 / n),
        })
    }

    pub fn at(&self, k: f64) -> [f64; 3] {
        add3(self.origin, scale3(self.direction, k))
    }
}

/// Closest-point solution for two gaze lines.
///
/// `k_left`/`k_right` place the segment end points `K_i = o_i + k_i·g_i`;
/// `k_lr` scales `g_r × g_l` so that `K_l − K_r = −k_lr·(g_r × g_l)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VergenceSolution<S = f64> {
    pub k_point_left: Vec3<S>,
    pub k_point_right: Vec3<S>,
    pub target: Vec3<S>,
    pub distance: S,
    pub k_left: S,
    pub k_right: S,
    pub k_lr: S,
    /// Per eye, set when `k_i ≤ 0` (the gaze line meets the other eye's line
    /// behind its own origin).
    pub diverging: [bool; 2],
    /// The solution came from the parallel-line fallback.
    pub parallel: bool,
}

impl<S: Scalar> VergenceSolution<S> {
    pub fn to_f64(&self) -> VergenceSolution<f64> {
        VergenceSolution {
            k_point_left: re3(self.k_point_left),
            k_point_right: re3(self.k_point_right),
            target: re3(self.target),
            distance: self.distance.re(),
            k_left: self.k_left.re(),
            k_right: self.k_right.re(),
            k_lr: self.k_lr.re(),
            diverging: self.diverging,
            parallel: self.parallel,
        }
    }

    /// `K_l − K_r`; its squared norm is the skew loss.
    pub fn gap(&self) -> Vec3<S> {
        sub3(self.k_point_left, self.k_point_right)
    }
}

/// Solves `[g_l | −g_r | g_r×g_l]·(k_l, k_r, k_lr)ᵀ = o_r − o_l` by explicit
/// inversion.
pub fn solve_vergence_generic<S: Scalar>(
    left: &GazeRay<S>,
    right: &GazeRay<S>,
) -> Result<VergenceSolution<S>> {
    let (g_l, g_r) = (left.direction, right.direction);
    let c = cross3(g_r, g_l);
    let cross_norm = norm3(c).re();
    if !(cross_norm > PARALLEL_EPSILON) {
        return Err(GazeError::ParallelGaze { cross_norm });
    }
    let neg_r = scale3(g_r, S::cst(-1.0));
    // Rows of the column matrix [g_l | −g_r | c].
    let m = [
        [g_l[0], neg_r[0], c[0]],
        [g_l[1], neg_r[1], c[1]],
        [g_l[2], neg_r[2], c[2]],
    ];
    let det = det3(&m);
    let rhs = sub3(right.origin, left.origin);
    // Rows of the inverse are the cross products of the columns, over det.
    let inv_rows = [cross3(neg_r, c), cross3(c, g_l), cross3(g_l, neg_r)];
    let inv_det = S::one() / det;
    let k_left = dot3(inv_rows[0], rhs) * inv_det;
    let k_right = dot3(inv_rows[1], rhs) * inv_det;
    let k_lr = dot3(inv_rows[2], rhs) * inv_det;

    let k_point_left = add3(left.origin, scale3(g_l, k_left));
    let k_point_right = add3(right.origin, scale3(g_r, k_right));
    let target = scale3(add3(k_point_left, k_point_right), S::cst(0.5));
    let distance = norm3(sub3(k_point_left, k_point_right));
    Ok(VergenceSolution {
        k_point_left,
        k_point_right,
        target,
        distance,
        k_left,
        k_right,
        k_lr,
        diverging: [k_left.re() <= 0.0, k_right.re() <= 0.0],
        parallel: false,
    })
}

pub fn solve_vergence(left: &GazeRay, right: &GazeRay) -> Result<VergenceSolution> {
    solve_vergence_generic(left, right)
}

/// Perpendicular distance between two parallel gaze lines, measured along
/// the left direction.
pub fn skew_distance_parallel(left: &GazeRay, right: &GazeRay) -> f64 {
    parallel_fallback(left, right).distance
}

/// Degenerate-case solution: `K_l = o_l`, `K_r` its projection onto the right
/// line, target at their midpoint.
pub(crate) fn parallel_fallback<S: Scalar>(
    left: &GazeRay<S>,
    right: &GazeRay<S>,
) -> VergenceSolution<S> {
    let g = left.direction;
    let offset = sub3(right.origin, left.origin);
    let along = dot3(offset, g);
    // Component of o_r − o_l perpendicular to g.
    let perp = sub3(offset, scale3(g, along));
    let k_point_left = left.origin;
    let k_point_right = sub3(right.origin, scale3(g, along));
    VergenceSolution {
        k_point_left,
        k_point_right,
        target: scale3(add3(k_point_left, k_point_right), S::cst(0.5)),
        distance: norm3(perp),
        k_left: S::zero(),
        k_right: -along * dot3(g, right.direction),
        k_lr: S::zero(),
        diverging: [true, true],
        parallel: true,
    }
}

/// Closed-form solution, or the parallel fallback when the lines are
/// parallel to within [`PARALLEL_EPSILON`].
pub fn solve_vergence_or_parallel<S: Scalar>(
    left: &GazeRay<S>,
    right: &GazeRay<S>,
) -> VergenceSolution<S> {
    solve_vergence_generic(left, right).unwrap_or_else(|_| parallel_fallback(left, right))
}

/// Brute-force reference for the closest points between two lines, kept
/// independent of the closed-form solve: a coarse grid over the left line
/// parameter followed by nested golden-section refinement of the squared
/// segment length.
pub mod oracle {
    use super::GazeRay;
    use crate::scalar::{add3, dot3, scale3, sub3};

    const INV_PHI: f64 = 0.618_033_988_749_894_8;

    fn golden_min(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
        let mut x1 = hi - INV_PHI * (hi - lo);
        let mut x2 = lo + INV_PHI * (hi - lo);
        let (mut f1, mut f2) = (f(x1), f(x2));
        for _ in 0..200 {
            if hi - lo <= 1e-14 * (1.0 + lo.abs().max(hi.abs())) {
                break;
            }
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - INV_PHI * (hi - lo);
                f1 = f(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + INV_PHI * (hi - lo);
                f2 = f(x2);
            }
        }
        if f1 <= f2 {
            (x1, f1)
        } else {
            (x2, f2)
        }
    }

    /// Returns `(target, distance)` minimizing the segment between
    /// `o_l + k_l·g_l` and `o_r + k_r·g_r` over `k_l, k_r ∈ [−range, range]`.
    pub fn brute_force_vergence(
        left: &GazeRay,
        right: &GazeRay,
        range: f64,
        steps: usize,
    ) -> ([f64; 3], f64) {
        let sq = |kl: f64, kr: f64| {
            let d = sub3(left.at(kl), right.at(kr));
            dot3(d, d)
        };
        let inner = |kl: f64| golden_min(-range, range, |kr| sq(kl, kr));
        let steps = steps.max(3);
        let spacing = 2.0 * range / (steps - 1) as f64;
        let mut best = (0usize, f64::INFINITY);
        for i in 0..steps {
            let kl = -range + spacing * i as f64;
            let v = inner(kl).1;
            if v < best.1 {
                best = (i, v);
            }
        }
        let centre = -range + spacing * best.0 as f64;
        let lo = (centre - spacing).max(-range);
        let hi = (centre + spacing).min(range);
        let (kl, _) = golden_min(lo, hi, |kl| inner(kl).1);
        let (kr, v) = inner(kl);
        let p = left.at(kl);
        let q = right.at(kr);
        (scale3(add3(p, q), 0.5), v.max(0.0).sqrt())
    }
}
