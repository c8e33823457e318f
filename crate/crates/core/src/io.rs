//! File formats: JSON documents, JSONL scene and fit lists, OBJ meshes, SVG
//! gaze overlays and the run manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::{BenchConfig, NoiseLevels, SceneRanges, SyntheticScene};
use crate::camera::CameraIntrinsics;
use crate::error::{GazeError, Result};
use crate::fitter::{fitted_mesh, FitResult, ForwardModel, ParamVector};
use crate::model::{pose_point, rodrigues, shape_vertex, EyeRegionMesh, LinearBasis};
use crate::scalar::{add3, scale3, Vec3};
use crate::synthetic::BasisConfig;
use crate::vergence::{solve_vergence_or_parallel, GazeRay, VergenceSolution};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GazeError + '_ {
    move |source| GazeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Byte offset of a 1-based line / column position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn parse_error(location: &str, text: &str, err: &serde_json::Error) -> GazeError {
    GazeError::Parse {
        location: location.to_string(),
        offset: byte_offset(text, err.line(), err.column()),
        line: err.line(),
        column: err.column(),
        message: err.to_string(),
    }
}

/// Parses one JSON document; errors carry the byte offset of the failure.
pub fn parse_json<T: DeserializeOwned>(location: &str, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| parse_error(location, text, &e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(&path.display().to_string(), &read_text(path)?)
}

/// Pretty JSON with a trailing newline. Floats use shortest round-trip
/// formatting, so reading back gives the same bits.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json(value))
}

/// One compact JSON value per line. Blank lines are skipped; offsets in
/// errors are relative to the start of the file.
pub fn parse_jsonl<T: DeserializeOwned>(location: &str, text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if !trimmed.trim().is_empty() {
            let value = serde_json::from_str(trimmed).map_err(|e| GazeError::Parse {
                location: location.to_string(),
                offset: start + byte_offset(trimmed, 1, e.column()),
                line: i + 1,
                column: e.column(),
                message: e.to_string(),
            })?;
            out.push(value);
        }
        start += line.len();
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_jsonl(&path.display().to_string(), &read_text(path)?)
}

pub fn to_jsonl<T: Serialize>(values: &[T]) -> String {
    let mut s = String::new();
    for v in values {
        s.push_str(&serde_json::to_string(v).expect("serializable value"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    write_text(path, &to_jsonl(values))
}

/// Loads and validates a basis.
pub fn load_basis(path: &Path) -> Result<LinearBasis> {
    let basis: LinearBasis = read_json(path)?;
    basis.validate()?;
    Ok(basis)
}

pub fn load_camera(path: &Path) -> Result<CameraIntrinsics> {
    let cam: CameraIntrinsics = read_json(path)?;
    cam.validate()?;
    Ok(cam)
}

pub fn load_scenes(path: &Path) -> Result<Vec<SyntheticScene>> {
    read_jsonl(path)
}

/// One line of a fit results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub scene_index: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<FitResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Settings shared by every command; every section is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub basis: BasisConfig,
    pub camera: Option<CameraIntrinsics>,
    pub ranges: SceneRanges,
    pub noise: NoiseLevels,
    pub scene_count: Option<usize>,
    pub bench: BenchConfig,
}

/// Everything needed to rerun a command: its argument vector plus the
/// resolved inputs, recorded verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub inputs: BTreeMap<String, String>,
    pub config: Option<String>,
    pub out_dir: String,
    pub seed: Option<u64>,
    pub outputs: Vec<String>,
    pub tool_version: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// OBJ text: `v x y z r g b` per vertex at 6 decimals, then 1-based faces.
pub fn obj_string(mesh: &EyeRegionMesh, faces: &[[usize; 3]]) -> String {
    let mut s = String::with_capacity(mesh.vertices.len() * 64 + faces.len() * 24);
    s.push_str("# gazefit eye-region mesh\n");
    for (v, c) in mesh.vertices.iter().zip(&mesh.colors) {
        let _ = writeln!(
            s,
            "v {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            v[0], v[1], v[2], c[0], c[1], c[2]
        );
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

/// Writes the camera-frame mesh of `params` as OBJ.
pub fn export_obj(basis: &LinearBasis, params: &ParamVector, path: &Path) -> Result<()> {
    let mesh = fitted_mesh(basis, params)?;
    write_text(path, &obj_string(&mesh, &basis.faces))
}

const RAY_FALLBACK_LENGTH: f64 = 0.3;

/// Per-eye ray end points: the closest points of the two gaze lines when
/// they converge in front of both eyes, otherwise a fixed length along
/// each ray.
fn ray_ends(origins: [Vec3<f64>; 2], gaze: [Vec3<f64>; 2]) -> ([Vec3<f64>; 2], VergenceSolution) {
    let sol = solve_vergence_or_parallel(
        &GazeRay {
            origin: origins[0],
            direction: gaze[0],
        },
        &GazeRay {
            origin: origins[1],
            direction: gaze[1],
        },
    );
    if sol.parallel || sol.diverging.iter().any(|&d| d) {
        let ends = [0, 1].map(|i| add3(origins[i], scale3(gaze[i], RAY_FALLBACK_LENGTH)));
        (ends, sol)
    } else {
        ([sol.k_point_left, sol.k_point_right], sol)
    }
}

fn svg_num(x: f64) -> String {
    format!("{x:.3}")
}

/// SVG overlay: model wireframe, predicted landmarks as crosses, observed
/// landmarks as circles, predicted gaze rays in red and true rays in green,
/// and the observed target.
pub fn plot_svg(
    basis: &LinearBasis,
    cam: &CameraIntrinsics,
    fitted: &ParamVector,
    scene: &SyntheticScene,
) -> Result<String> {
    let mesh = fitted_mesh(basis, fitted)?;
    let project = |p: Vec3<f64>| cam.project_generic(p).ok();

    let rot = rodrigues(fitted.r());
    let (f, t) = (fitted.f(), fitted.t());
    let landmarks: Vec<Option<[f64; 2]>> = basis
        .landmark_indices
        .iter()
        .map(|&v| project(pose_point(&rot, f, t, shape_vertex(basis, v, fitted.z_s()))))
        .collect();
    if landmarks.iter().all(Option::is_none) {
        return Err(GazeError::DepthNonPositive {
            z: f64::NAN,
            landmark: None,
        });
    }

    let pred = ForwardModel::new(basis, cam).forward_origins_and_gaze(fitted);
    let truth = ForwardModel::new(basis, cam).forward_origins_and_gaze(&scene.true_params);
    let (pred_ends, pred_sol) = ray_ends(pred.0, pred.1);
    let (true_ends, _) = ray_ends(truth.0, truth.1);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = cam.width,
        h = cam.height
    );
    let _ = writeln!(
        s,
        r#"<rect class="background" width="{}" height="{}" fill="white"/>"#,
        cam.width, cam.height
    );

    let mut edges = BTreeSet::new();
    for face in &basis.faces {
        for k in 0..3 {
            let (a, b) = (face[k], face[(k + 1) % 3]);
            edges.insert((a.min(b), a.max(b)));
        }
    }
    let projected: Vec<Option<[f64; 2]>> = mesh.vertices.iter().map(|&v| project(v)).collect();
    let mut d = String::new();
    for (a, b) in edges {
        if let (Some(p), Some(q)) = (projected[a], projected[b]) {
            let _ = write!(
                d,
                "M{} {}L{} {}",
                svg_num(p[0]),
                svg_num(p[1]),
                svg_num(q[0]),
                svg_num(q[1])
            );
        }
    }
    let _ = writeln!(
        s,
        r##"<path class="wireframe" d="{d}" stroke="#888888" stroke-width="0.3" fill="none"/>"##
    );

    for p in scene.obs.landmarks_gt.points() {
        let _ = writeln!(
            s,
            r#"<circle class="landmark-obs" cx="{}" cy="{}" r="2" stroke="green" stroke-width="0.6" fill="none"/>"#,
            svg_num(p[0]),
            svg_num(p[1])
        );
    }
    for p in landmarks.iter().flatten() {
        let (x, y) = (p[0], p[1]);
        let _ = writeln!(
            s,
            r#"<path class="landmark-pred" d="M{} {}L{} {}M{} {}L{} {}" stroke="blue" stroke-width="0.8"/>"#,
            svg_num(x - 2.5),
            svg_num(y - 2.5),
            svg_num(x + 2.5),
            svg_num(y + 2.5),
            svg_num(x - 2.5),
            svg_num(y + 2.5),
            svg_num(x + 2.5),
            svg_num(y - 2.5)
        );
    }

    for (class, color, origins, ends) in [
        ("ray-gt", "green", truth.0, true_ends),
        ("ray-pred", "red", pred.0, pred_ends),
    ] {
        for (o, e) in origins.iter().zip(&ends) {
            let (Some(a), Some(b)) = (project(*o), project(*e)) else {
                continue;
            };
            let _ = writeln!(
                s,
                r#"<line class="{class}" x1="{}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="1.5"/>"#,
                svg_num(a[0]),
                svg_num(a[1]),
                svg_num(b[0]),
                svg_num(b[1])
            );
        }
    }

    if let Some(p) = scene.obs.target_gt.and_then(project) {
        let _ = writeln!(
            s,
            r#"<circle class="target-gt" cx="{}" cy="{}" r="4" stroke="green" stroke-width="1" fill="none"/>"#,
            svg_num(p[0]),
            svg_num(p[1])
        );
    }
    if !pred_sol.parallel {
        if let Some(p) = project(pred_sol.target) {
            let _ = writeln!(
                s,
                r#"<circle class="target-pred" cx="{}" cy="{}" r="3" fill="red"/>"#,
                svg_num(p[0]),
                svg_num(p[1])
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}
