//! Procedural eye-region basis: two UV-sphere eyeballs behind a brow/nose
//! surface patch, with hand-built and seeded random deformation modes.
//!
//! Model frame: x to the subject's side (left eye at negative x), y down,
//! z forward. Gaze at rest points along +z.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};
use crate::model::{LinearBasis, LANDMARK_COUNT};
use crate::scalar::{add3, scale3, sub3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisConfig {
    pub shape_components: usize,
    pub color_components: usize,
    /// Latitude rings per eyeball, poles excluded.
    pub eyeball_rings: usize,
    /// Longitude segments per eyeball; must be even.
    pub eyeball_segments: usize,
    pub eyeball_radius: f64,
    /// Surface patch grid spacing, meters.
    pub grid_step: f64,
    /// Eye centre offset from the midline, in grid cells.
    pub eye_offset_cells: usize,
    pub half_width_cells: usize,
    pub half_height_cells: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            shape_components: 8,
            color_components: 4,
            eyeball_rings: 7,
            eyeball_segments: 12,
            eyeball_radius: 0.012,
            grid_step: 0.005,
            eye_offset_cells: 6,
            half_width_cells: 14,
            half_height_cells: 9,
        }
    }
}

impl BasisConfig {
    pub fn eyeball_vertex_count(&self) -> usize {
        self.eyeball_rings * self.eyeball_segments + 2
    }

    fn check(&self) -> Result<()> {
        let fail = |msg: String| Err(GazeError::InfeasibleConfig(msg));
        if self.shape_components < 2 {
            return fail(format!(
                "need at least 2 shape components, got {}",
                self.shape_components
            ));
        }
        if self.eyeball_vertex_count() < 16 {
            return fail(format!(
                "need at least 16 vertices per eyeball, got {}",
                self.eyeball_vertex_count()
            ));
        }
        if self.eyeball_segments % 2 != 0 || self.eyeball_segments < 4 {
            return fail("eyeball_segments must be even and at least 4".into());
        }
        if !(self.eyeball_radius > 0.0) || !(self.grid_step > 0.0) {
            return fail("eyeball_radius and grid_step must be positive".into());
        }
        // Brow landmarks reach 4 cells either side of the eye centre, the
        // nose base sits 7 rows below it.
        if self.eye_offset_cells < 5
            || self.half_width_cells < self.eye_offset_cells + 4
            || self.half_height_cells < 7
        {
            return fail(format!(
                "grid too small to place {LANDMARK_COUNT} landmarks (eye offset >= 5, half width >= eye offset + 4, half height >= 7)"
            ));
        }
        Ok(())
    }
}

struct Patch {
    /// `(col, row)` → vertex index, `None` for removed nodes.
    nodes: Vec<Option<usize>>,
    cols: usize,
    rows: usize,
    half_w: i64,
    half_h: i64,
}

impl Patch {
    fn at(&self, cx: i64, cy: i64) -> Option<usize> {
        if cx.abs() > self.half_w || cy.abs() > self.half_h {
            return None;
        }
        let col = (cx + self.half_w) as usize;
        let row = (cy + self.half_h) as usize;
        self.nodes[row * self.cols + col]
    }
}

fn gauss(x: f64, sigma: f64) -> f64 {
    (-(x * x) / (2.0 * sigma * sigma)).exp()
}

fn surface_depth(x: f64, y: f64) -> f64 {
    let nose = 0.016 * gauss(x, 0.007) * (0.5 + 0.5 * (y / 0.02).tanh());
    let brow = 0.004 * gauss(y + 0.025, 0.007);
    0.006 + nose + brow - 1.5 * x * x
}

/// Deterministic synthetic basis for `config` and `seed`.
pub fn synthetic_basis(config: &BasisConfig, seed: u64) -> Result<LinearBasis> {
    config.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = config.grid_step;
    let eye_x = config.eye_offset_cells as f64 * step;
    let rho = config.eyeball_radius;

    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();

    // Eyeballs: UV spheres with poles on the z axis.
    let mut eyeball_sets = Vec::new();
    let centres = [[-eye_x, 0.0, 0.0], [eye_x, 0.0, 0.0]];
    for centre in centres {
        let first = vertices.len();
        let rings = config.eyeball_rings;
        let segs = config.eyeball_segments;
        let push = |dir: [f64; 3], vertices: &mut Vec<[f64; 3]>, colors: &mut Vec<[f64; 3]>| {
            vertices.push(add3(centre, scale3(dir, rho)));
            let polar = dir[2].clamp(-1.0, 1.0).acos();
            colors.push(if polar < 0.2 {
                [0.05, 0.05, 0.06]
            } else if polar < 0.45 {
                [0.25, 0.35, 0.55]
            } else {
                [0.95, 0.94, 0.92]
            });
        };
        push([0.0, 0.0, 1.0], &mut vertices, &mut colors);
        for i in 1..=rings {
            let theta = PI * i as f64 / (rings + 1) as f64;
            for j in 0..segs {
                let phi = 2.0 * PI * j as f64 / segs as f64;
                push(
                    [
                        theta.sin() * phi.cos(),
                        theta.sin() * phi.sin(),
                        theta.cos(),
                    ],
                    &mut vertices,
                    &mut colors,
                );
            }
        }
        push([0.0, 0.0, -1.0], &mut vertices, &mut colors);
        let last = vertices.len() - 1;
        let ring = |i: usize, j: usize| first + 1 + (i - 1) * segs + (j % segs);
        for j in 0..segs {
            faces.push([first, ring(1, j + 1), ring(1, j)]);
            faces.push([last, ring(rings, j), ring(rings, j + 1)]);
        }
        for i in 1..rings {
            for j in 0..segs {
                faces.push([ring(i, j), ring(i, j + 1), ring(i + 1, j + 1)]);
                faces.push([ring(i, j), ring(i + 1, j + 1), ring(i + 1, j)]);
            }
        }
        eyeball_sets.push((first..vertices.len()).collect::<Vec<_>>());
    }

    // Surface patch on a regular grid, with the eye openings removed.
    let half_w = config.half_width_cells as i64;
    let half_h = config.half_height_cells as i64;
    let eye_c = config.eye_offset_cells as i64;
    let cols = (2 * half_w + 1) as usize;
    let rows = (2 * half_h + 1) as usize;
    let mut nodes = vec![None; cols * rows];
    for row in 0..rows {
        for col in 0..cols {
            let cx = col as i64 - half_w;
            let cy = row as i64 - half_h;
            let in_opening = cy == 0 && ((cx + eye_c).abs() <= 2 || (cx - eye_c).abs() <= 2);
            if in_opening {
                continue;
            }
            let x = cx as f64 * step;
            let y = cy as f64 * step;
            nodes[row * cols + col] = Some(vertices.len());
            vertices.push([x, y, surface_depth(x, y)]);
            colors.push([0.86, 0.66, 0.56]);
        }
    }
    let patch = Patch {
        nodes,
        cols,
        rows,
        half_w,
        half_h,
    };
    for row in 0..patch.rows - 1 {
        for col in 0..patch.cols - 1 {
            let cx = col as i64 - half_w;
            let cy = row as i64 - half_h;
            if let (Some(a), Some(b), Some(c), Some(d)) = (
                patch.at(cx, cy),
                patch.at(cx + 1, cy),
                patch.at(cx + 1, cy + 1),
                patch.at(cx, cy + 1),
            ) {
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            }
        }
    }

    // 10 brow + 12 eye contour + 9 nose landmarks.
    let mut cells: Vec<(i64, i64)> = Vec::with_capacity(LANDMARK_COUNT);
    for side in [-1i64, 1] {
        for dx in [-4, -2, 0, 2, 4] {
            cells.push((side * eye_c + dx, -5));
        }
    }
    for side in [-1i64, 1] {
        let c = side * eye_c;
        cells.extend([
            (c - 3, 0),
            (c - 1, -1),
            (c + 1, -1),
            (c + 3, 0),
            (c + 1, 1),
            (c - 1, 1),
        ]);
    }
    cells.extend([(0, -1), (0, 1), (0, 3), (0, 5)]);
    cells.extend([(-2, 7), (-1, 7), (0, 7), (1, 7), (2, 7)]);
    let mut landmark_indices = Vec::with_capacity(LANDMARK_COUNT);
    for &(cx, cy) in &cells {
        let idx = patch.at(cx, cy).ok_or_else(|| {
            GazeError::InfeasibleConfig(format!("landmark cell ({cx}, {cy}) has no vertex"))
        })?;
        landmark_indices.push(idx);
    }
    let left_eye_outer_corner = patch.at(-eye_c - 3, 0).expect("checked above");
    let right_eye_outer_corner = patch.at(eye_c + 3, 0).expect("checked above");

    // Deformation modes. Eyeballs move rigidly with their centre except in
    // the radius mode.
    let n = vertices.len();
    let mut is_eyeball = vec![None; n];
    for (side, set) in eyeball_sets.iter().enumerate() {
        for &i in set {
            is_eyeball[i] = Some(side);
        }
    }
    let eye_weight = |p: [f64; 3]| gauss(p[0].abs() - eye_x, 0.012) * gauss(p[1], 0.012);
    let field = |f: &dyn Fn([f64; 3]) -> [f64; 3]| -> Vec<[f64; 3]> {
        (0..n)
            .map(|i| match is_eyeball[i] {
                Some(side) => f(centres[side]),
                None => f(vertices[i]),
            })
            .collect()
    };

    let mut shape_components: Vec<Vec<[f64; 3]>> = Vec::new();
    // Interocular distance.
    shape_components.push(field(&|p| [0.002 * (p[0] / 0.02).tanh(), 0.0, 0.0]));
    // Eyeball radius.
    shape_components.push(
        (0..n)
            .map(|i| match is_eyeball[i] {
                Some(side) => scale3(sub3(vertices[i], centres[side]), 0.0006 / rho),
                None => [0.0; 3],
            })
            .collect(),
    );
    let named: [&dyn Fn([f64; 3]) -> [f64; 3]; 4] = [
        // Eye depth.
        &|p| [0.0, 0.0, 0.002 * eye_weight(p)],
        // Brow height.
        &|p| [0.0, -0.003 * gauss(p[1] + 0.025, 0.01), 0.0],
        // Nose protrusion.
        &|p| {
            [
                0.0,
                0.0,
                0.004 * gauss(p[0], 0.008) * gauss(p[1] - 0.02, 0.02),
            ]
        },
        // Vertical eye position.
        &|p| [0.0, 0.002 * eye_weight(p), 0.0],
    ];
    for f in named.iter().take(config.shape_components.saturating_sub(2)) {
        shape_components.push(field(*f));
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let random_field = |amplitude: f64, rng: &mut ChaCha8Rng| -> [[f64; 6]; 3] {
        let mut coeffs = [[0.0; 6]; 3];
        for axis in coeffs.iter_mut() {
            for c in axis.iter_mut() {
                *c = amplitude * normal.sample(rng);
            }
        }
        coeffs
    };
    let poly = |coeffs: &[[f64; 6]; 3], p: [f64; 3]| -> [f64; 3] {
        let (u, v) = (p[0] / 0.07, p[1] / 0.05);
        let terms = [1.0, u, v, u * v, u * u, v * v];
        let mut out = [0.0; 3];
        for (o, axis) in out.iter_mut().zip(coeffs) {
            *o = axis.iter().zip(&terms).map(|(c, t)| c * t).sum();
        }
        out
    };
    while shape_components.len() < config.shape_components {
        let coeffs = random_field(0.0008, &mut rng);
        shape_components.push(field(&|p| poly(&coeffs, p)));
    }

    let mut color_components = Vec::with_capacity(config.color_components);
    for _ in 0..config.color_components {
        let coeffs = random_field(0.03, &mut rng);
        color_components.push(vertices.iter().map(|&p| poly(&coeffs, p)).collect());
    }

    let basis = LinearBasis {
        n_vertices: n,
        mean_shape: vertices,
        shape_components,
        mean_color: colors,
        color_components,
        faces,
        landmark_indices,
        left_eyeball_indices: eyeball_sets[0].clone(),
        right_eyeball_indices: eyeball_sets[1].clone(),
        left_eye_outer_corner,
        right_eye_outer_corner,
    };
    basis.validate()?;
    Ok(basis)
}
