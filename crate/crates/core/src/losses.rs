//! The seven loss components and their linear combination.
//!
//! Slot order everywhere is `[pix, lm, o, t, skew, g, reg]`. The pixel slot
//! exists for arity only and is always zero.

use serde::{Deserialize, Serialize};

use crate::camera::Landmarks2D;
use crate::error::{GazeError, Result};
use crate::scalar::{add3, lift3, scale3, sub3, Scalar, Vec3};
use crate::vergence::{GazeAngles, VergenceSolution};

pub const LOSS_COUNT: usize = 7;
pub const LOSS_NAMES: [&str; LOSS_COUNT] = ["pix", "lm", "o", "t", "skew", "g", "reg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Pix = 0,
    Lm = 1,
    Origin = 2,
    Target = 3,
    Skew = 4,
    Gaze = 5,
    Reg = 6,
}

impl LossKind {
    pub const ALL: [LossKind; LOSS_COUNT] = [
        LossKind::Pix,
        LossKind::Lm,
        LossKind::Origin,
        LossKind::Target,
        LossKind::Skew,
        LossKind::Gaze,
        LossKind::Reg,
    ];

    /// Reconstruction (G1), appearance gaze (G2) or vergence (G3).
    pub fn group(self) -> LossGroup {
        match self {
            LossKind::Pix | LossKind::Lm | LossKind::Reg => LossGroup::Reconstruction,
            LossKind::Gaze => LossGroup::GazePose,
            LossKind::Origin | LossKind::Target | LossKind::Skew => LossGroup::Vergence,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossGroup {
    Reconstruction,
    GazePose,
    Vergence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
}

impl Default for GroupWeights {
    fn default() -> Self {
        Self {
            g1: 1.0,
            g2: 1.0,
            g3: 1.0,
        }
    }
}

/// Per-component weights `Λ`, scaled by their group weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub pix: f64,
    pub lm: f64,
    pub o: f64,
    pub t: f64,
    pub skew: f64,
    pub g: f64,
    pub reg: f64,
    /// Weight of the behind-the-head penalty; not part of `Λ`.
    pub behind: f64,
    pub group_weights: GroupWeights,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pix: 0.0,
            lm: 1.0,
            o: 1.0,
            t: 1.0,
            skew: 1.0,
            g: 1.0,
            reg: 1.0,
            behind: 0.0,
            group_weights: GroupWeights::default(),
        }
    }
}

impl LossWeights {
    /// All seven slots set to `v`, group weights 1.
    pub fn uniform(v: f64) -> Self {
        Self {
            pix: v,
            lm: v,
            o: v,
            t: v,
            skew: v,
            g: v,
            reg: v,
            behind: 0.0,
            group_weights: GroupWeights::default(),
        }
    }

    pub fn from_array(lambda: [f64; LOSS_COUNT]) -> Self {
        let [pix, lm, o, t, skew, g, reg] = lambda;
        Self {
            pix,
            lm,
            o,
            t,
            skew,
            g,
            reg,
            behind: 0.0,
            group_weights: GroupWeights::default(),
        }
    }

    fn component(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::Pix => self.pix,
            LossKind::Lm => self.lm,
            LossKind::Origin => self.o,
            LossKind::Target => self.t,
            LossKind::Skew => self.skew,
            LossKind::Gaze => self.g,
            LossKind::Reg => self.reg,
        }
    }

    pub fn group_weight(&self, group: LossGroup) -> f64 {
        match group {
            LossGroup::Reconstruction => self.group_weights.g1,
            LossGroup::GazePose => self.group_weights.g2,
            LossGroup::Vergence => self.group_weights.g3,
        }
    }

    pub fn effective(&self, kind: LossKind) -> f64 {
        self.component(kind) * self.group_weight(kind.group())
    }

    /// Effective `Λ` in slot order.
    pub fn lambda(&self) -> [f64; LOSS_COUNT] {
        LossKind::ALL.map(|k| self.effective(k))
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("pix", self.pix),
            ("lm", self.lm),
            ("o", self.o),
            ("t", self.t),
            ("skew", self.skew),
            ("g", self.g),
            ("reg", self.reg),
            ("behind", self.behind),
            ("g1", self.group_weights.g1),
            ("g2", self.group_weights.g2),
            ("g3", self.group_weights.g3),
        ];
        for (name, w) in all {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(GazeError::InvalidWeights(format!(
                    "{name} = {w} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }

    /// Only the given groups keep their weight.
    pub fn with_groups(mut self, g1: bool, g2: bool, g3: bool) -> Self {
        self.group_weights.g1 *= if g1 { 1.0 } else { 0.0 };
        self.group_weights.g2 *= if g2 { 1.0 } else { 0.0 };
        self.group_weights.g3 *= if g3 { 1.0 } else { 0.0 };
        self
    }
}

/// `L_vec` with per-slot activity. Inactive slots hold 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossVector {
    pub values: [f64; LOSS_COUNT],
    pub active: [bool; LOSS_COUNT],
}

impl LossVector {
    pub fn new(values: [f64; LOSS_COUNT]) -> Self {
        Self {
            values,
            active: [true; LOSS_COUNT],
        }
    }

    pub fn get(&self, kind: LossKind) -> f64 {
        self.values[kind as usize]
    }
}

/// Ground-truth supervision for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    pub landmarks_gt: Landmarks2D,
    #[serde(default)]
    pub target_gt: Option<[f64; 3]>,
    /// Two points (per-eye origins) or one point (compared against the
    /// midpoint of the two eyeball centres).
    #[serde(default)]
    pub origins_gt: Option<Vec<[f64; 3]>>,
    /// `[left, right]`.
    #[serde(default)]
    pub gaze_gt: Option<[GazeAngles; 2]>,
}

impl Observations {
    pub fn validate(&self) -> Result<()> {
        if let Some(o) = &self.origins_gt {
            if o.is_empty() || o.len() > 2 {
                return Err(GazeError::InvalidInput(format!(
                    "origins_gt must hold 1 or 2 points, got {}",
                    o.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

/// `(Σ|x_i|^q)^(p/q)`.
pub fn norm_pow<S: Scalar>(x: &[S], q: Norm, p: f64) -> S {
    match q {
        Norm::L1 => {
            let s = x.iter().fold(S::zero(), |acc, &v| acc + v.abs());
            if p == 1.0 {
                s
            } else {
                s.powf(p)
            }
        }
        Norm::L2 => {
            let s = x.iter().fold(S::zero(), |acc, &v| acc + v * v);
            if p == 2.0 {
                s
            } else {
                s.powf(p / 2.0)
            }
        }
    }
}

/// Exponents applied to the L1 terms of the origin, target and gaze losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormPowers {
    pub origin: f64,
    pub target: f64,
    pub gaze: f64,
}

impl NormPowers {
    pub const PLAIN: NormPowers = NormPowers {
        origin: 1.0,
        target: 1.0,
        gaze: 1.0,
    };
    /// `‖·‖₁⁴` read literally.
    pub const LITERAL: NormPowers = NormPowers {
        origin: 4.0,
        target: 4.0,
        gaze: 4.0,
    };

    pub fn select(literal: bool) -> Self {
        if literal {
            Self::LITERAL
        } else {
            Self::PLAIN
        }
    }
}

/// Origin residual per supervised point: one 3-vector per eye, or one for the
/// eyeball midpoint when a single origin is supplied.
pub(crate) fn origin_residuals<S: Scalar>(
    o_hat: [Vec3<S>; 2],
    origins_gt: &[[f64; 3]],
) -> Vec<Vec3<S>> {
    if origins_gt.len() == 1 {
        let mid = scale3(add3(o_hat[0], o_hat[1]), S::cst(0.5));
        vec![sub3(mid, lift3(origins_gt[0]))]
    } else {
        o_hat
            .iter()
            .zip(origins_gt)
            .map(|(o, gt)| sub3(*o, lift3(*gt)))
            .collect()
    }
}

/// `Σ_i ‖ô_i − o_i‖₁^P`.
pub fn loss_origin<S: Scalar>(o_hat: [Vec3<S>; 2], origins_gt: &[[f64; 3]], power: f64) -> S {
    origin_residuals(o_hat, origins_gt)
        .iter()
        .fold(S::zero(), |acc, r| acc + norm_pow(r, Norm::L1, power))
}

/// Squared distance over all 62 stacked landmark coordinates.
pub fn loss_landmark<S: Scalar>(lm_hat: &[[S; 2]], lm_gt: &Landmarks2D) -> Result<S> {
    if lm_hat.len() != lm_gt.points().len() {
        return Err(GazeError::DimensionMismatch {
            what: "predicted landmarks",
            expected: lm_gt.points().len(),
            got: lm_hat.len(),
        });
    }
    Ok(lm_hat
        .iter()
        .zip(lm_gt.points())
        .fold(S::zero(), |acc, (p, q)| {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            acc + dx * dx + dy * dy
        }))
}

/// `‖t̂ − t‖₁^P`.
pub fn loss_target<S: Scalar>(t_hat: Vec3<S>, t_gt: [f64; 3], power: f64) -> S {
    norm_pow(&sub3(t_hat, lift3(t_gt)), Norm::L1, power)
}

/// `d²`, computed from the segment vector so it stays smooth at `d = 0`.
pub fn loss_skew<S: Scalar>(solution: &VergenceSolution<S>) -> S {
    let g = solution.gap();
    g[0] * g[0] + g[1] * g[1] + g[2] * g[2]
}

/// Stacked angle order: `(e_l, a_l, e_r, a_r)`.
pub(crate) fn gaze_residuals<S: Scalar>(z_e: [S; 4], gaze_gt: &[GazeAngles; 2]) -> [S; 4] {
    [
        z_e[0] - gaze_gt[0].elevation,
        z_e[1] - gaze_gt[0].azimuth,
        z_e[2] - gaze_gt[1].elevation,
        z_e[3] - gaze_gt[1].azimuth,
    ]
}

/// `‖z_E − r_gt‖₁^P` over the four stacked angles.
pub fn loss_gaze<S: Scalar>(z_e: [S; 4], gaze_gt: &[GazeAngles; 2], power: f64) -> S {
    norm_pow(&gaze_residuals(z_e, gaze_gt), Norm::L1, power)
}

/// `‖z_S‖₂² + ‖z_A‖₂²`.
pub fn loss_reg<S: Scalar>(z_s: &[S], z_a: &[S]) -> S {
    norm_pow(z_s, Norm::L2, 2.0) + norm_pow(z_a, Norm::L2, 2.0)
}

/// `Λᵀ L_vec` over active slots.
pub fn combine(vec: &LossVector, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    Ok(combine_lambda(vec, &weights.lambda()))
}

pub(crate) fn combine_lambda(vec: &LossVector, lambda: &[f64; LOSS_COUNT]) -> f64 {
    vec.values
        .iter()
        .zip(&vec.active)
        .zip(lambda)
        .filter(|((_, &active), _)| active)
        .fold(0.0, |acc, ((v, _), w)| acc + w * v)
}

/// `Σ_i max(0, −k_i)²`: penalizes gaze lines that meet behind an eye.
pub fn penalty_behind<S: Scalar>(solution: &VergenceSolution<S>) -> S {
    let a = (-solution.k_left).relu();
    let b = (-solution.k_right).relu();
    a * a + b * b
}
