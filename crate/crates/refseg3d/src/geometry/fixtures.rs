//! Scene and view fixtures: a small JSON manifest next to TNSR binaries.
//!
//! The manifest stores counts, labels, masks and relative paths of the
//! binary blobs; coordinates, features and depth live in TNSR files so they
//! round-trip bit for bit.

use std::path::{Path, PathBuf};

use anyhow::Context;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dense::{Grid, Mat};
use crate::geometry::{CameraView, Scene};
use crate::tensor::io::{load_tensor, save_tensor};

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneManifest {
    pub expression_id: String,
    pub points: String,
    pub point_features: String,
    pub superpoint_id: Vec<usize>,
    pub gt_instances: Vec<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_features: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ViewManifest {
    pub intrinsics: [[f64; 3]; 3],
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub depth: String,
    pub pixel_features: String,
}

/// A scene plus, when the fixture carries one, its text-feature matrix.
#[derive(Debug)]
pub struct SceneFixture {
    pub scene: Scene,
    pub text_features: Option<Mat>,
}

pub fn save_mat(path: &Path, m: &Mat) -> anyhow::Result<()> {
    save_tensor(path, &[m.rows, m.cols], &m.data)
}

pub fn load_mat(path: &Path) -> anyhow::Result<Mat> {
    let (shape, data) = load_tensor(path)?;
    anyhow::ensure!(shape.len() == 2, "{}: expected rank 2, got {shape:?}", path.display());
    Ok(Mat::new(shape[0], shape[1], data))
}

pub fn save_grid(path: &Path, g: &Grid) -> anyhow::Result<()> {
    save_tensor(path, &[g.height, g.width, g.channels], &g.data)
}

pub fn load_grid(path: &Path) -> anyhow::Result<Grid> {
    let (shape, data) = load_tensor(path)?;
    anyhow::ensure!(shape.len() == 3, "{}: expected rank 3, got {shape:?}", path.display());
    Ok(Grid::new(shape[0], shape[1], shape[2], data))
}

fn sidecar(manifest: &Path, suffix: &str) -> (PathBuf, String) {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "fixture".to_string());
    let name = format!("{stem}.{suffix}.tnsr");
    (manifest.with_file_name(&name), name)
}

/// Writes `path` (a `.json` manifest) plus TNSR sidecars named after its stem.
pub fn save_scene(path: &Path, scene: &Scene, text_features: Option<&Mat>) -> anyhow::Result<()> {
    scene.validate()?;
    let (points_path, points_name) = sidecar(path, "points");
    let (pf_path, pf_name) = sidecar(path, "pfeat");
    save_mat(&points_path, &scene.points)?;
    save_mat(&pf_path, &scene.point_features)?;
    let text_name = match text_features {
        Some(t) => {
            let (tp, tn) = sidecar(path, "text");
            save_mat(&tp, t)?;
            Some(tn)
        }
        None => None,
    };
    let manifest = SceneManifest {
        expression_id: scene.expression_id.clone(),
        points: points_name,
        point_features: pf_name,
        superpoint_id: scene.superpoint_id.clone(),
        gt_instances: scene
            .gt_instances
            .iter()
            .map(|m| m.iter().map(|&b| b as u8).collect())
            .collect(),
        text_features: text_name,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, json).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

pub fn load_scene(path: &Path) -> anyhow::Result<SceneFixture> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    let manifest: SceneManifest = serde_json::from_str(&raw)
        .with_context(|| format!("parse {}", path.display()))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let scene = Scene {
        points: load_mat(&dir.join(&manifest.points))?,
        point_features: load_mat(&dir.join(&manifest.point_features))?,
        superpoint_id: manifest.superpoint_id,
        gt_instances: manifest
            .gt_instances
            .iter()
            .map(|m| m.iter().map(|&b| b != 0).collect())
            .collect(),
        expression_id: manifest.expression_id,
    };
    scene.validate()?;
    let text_features = match &manifest.text_features {
        Some(name) => Some(load_mat(&dir.join(name))?),
        None => None,
    };
    Ok(SceneFixture {
        scene,
        text_features,
    })
}

pub fn save_view(path: &Path, view: &CameraView) -> anyhow::Result<()> {
    view.validate()?;
    let (depth_path, depth_name) = sidecar(path, "depth");
    let (feat_path, feat_name) = sidecar(path, "pix");
    save_mat(&depth_path, &view.depth)?;
    save_grid(&feat_path, &view.pixel_features)?;
    let to_rows = |m: &Matrix3<f64>| -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = m[(r, c)];
            }
        }
        out
    };
    let manifest = ViewManifest {
        intrinsics: to_rows(&view.intrinsics),
        rotation: to_rows(&view.rotation),
        translation: [view.translation.x, view.translation.y, view.translation.z],
        depth: depth_name,
        pixel_features: feat_name,
    };
    std::fs::write(path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

pub fn load_view(path: &Path) -> anyhow::Result<CameraView> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    let manifest: ViewManifest = serde_json::from_str(&raw)
        .with_context(|| format!("parse {}", path.display()))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let from_rows = |rows: &[[f64; 3]; 3]| {
        Matrix3::from_fn(|r, c| rows[r][c])
    };
    let view = CameraView {
        intrinsics: from_rows(&manifest.intrinsics),
        rotation: from_rows(&manifest.rotation),
        translation: Vector3::new(
            manifest.translation[0],
            manifest.translation[1],
            manifest.translation[2],
        ),
        depth: load_mat(&dir.join(&manifest.depth))?,
        pixel_features: load_grid(&dir.join(&manifest.pixel_features))?,
    };
    view.validate()?;
    Ok(view)
}
