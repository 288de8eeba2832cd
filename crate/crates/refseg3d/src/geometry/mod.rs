//! Point-cloud and camera geometry.
//!
//! Back-projection of depth pixels (Eq. 5 style pinhole model), multi-view
//! feature lifting, spherical-query injection onto scene points, superpoint
//! pooling, farthest point sampling and kNN mask construction. Every
//! operation here is a pure function with documented tie-breaking, so
//! results are reproducible bit for bit.

pub mod fixtures;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::dense::{BoolMat, Grid, Mat};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("scene: {0}")]
    InvalidScene(String),
    #[error("camera view: {0}")]
    InvalidView(String),
    #[error("bilinear_upsample: {0}")]
    Upsample(String),
    #[error("project_pixel: pixel ({u}, {v}) outside {w}x{h} depth map")]
    PixelOutOfBounds { u: usize, v: usize, w: usize, h: usize },
    #[error("{op}: requested {count} from {available} items")]
    CountExceedsItems {
        op: &'static str,
        count: usize,
        available: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

// ── domain types ────────────────────────────────────────────────────

/// A point cloud with auxiliary features, a superpoint partition and the
/// ground truth for one referring expression (zero or more target masks).
#[derive(Debug, Clone)]
pub struct Scene {
    /// `N_p x 3` coordinates in scene units.
    pub points: Mat,
    /// `N_p x f` auxiliary per-point features (e.g. RGB).
    pub point_features: Mat,
    /// Superpoint label per point, values in `[0, N_s)`.
    pub superpoint_id: Vec<usize>,
    /// Binary target masks over points; may be empty (no-target expression).
    pub gt_instances: Vec<Vec<bool>>,
    /// Opaque key linking the scene to a text-feature fixture.
    pub expression_id: String,
}

impl Scene {
    pub fn num_points(&self) -> usize {
        self.points.rows
    }

    pub fn num_superpoints(&self) -> usize {
        self.superpoint_id.iter().map(|&s| s + 1).max().unwrap_or(0)
    }

    /// Checks the labeling and mask invariants; returns `N_s`.
    pub fn validate(&self) -> Result<usize> {
        let n = self.points.rows;
        if self.points.cols != 3 {
            return Err(GeometryError::InvalidScene(format!(
                "points must be N x 3, got {} x {}",
                self.points.rows, self.points.cols
            )));
        }
        if n == 0 {
            return Err(GeometryError::InvalidScene("empty point cloud".into()));
        }
        if self.point_features.rows != n {
            return Err(GeometryError::InvalidScene(format!(
                "point_features rows {} != point count {n}",
                self.point_features.rows
            )));
        }
        if self.superpoint_id.len() != n {
            return Err(GeometryError::InvalidScene(format!(
                "superpoint_id length {} != point count {n}",
                self.superpoint_id.len()
            )));
        }
        let n_s = self.num_superpoints();
        let mut used = vec![false; n_s];
        for &s in &self.superpoint_id {
            used[s] = true;
        }
        if let Some(gap) = used.iter().position(|u| !u) {
            return Err(GeometryError::InvalidScene(format!(
                "superpoint label {gap} unused; labels must cover [0, {n_s})"
            )));
        }
        for (i, mask) in self.gt_instances.iter().enumerate() {
            if mask.len() != n {
                return Err(GeometryError::InvalidScene(format!(
                    "gt mask {i} has length {} != point count {n}",
                    mask.len()
                )));
            }
        }
        if self.points.data.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidScene("non-finite coordinate".into()));
        }
        Ok(n_s)
    }
}

/// One posed RGB-D style view: pinhole intrinsics, world-from-camera pose,
/// a depth map (0 marks invalid pixels) and a feature grid that may be at a
/// lower resolution than the depth.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// `H x W`, scene units, `0.0` = invalid.
    pub depth: Mat,
    /// `H' x W' x C_I`, `H' <= H`, `W' <= W`.
    pub pixel_features: Grid,
}

impl CameraView {
    pub fn validate(&self) -> Result<()> {
        if self.intrinsics.determinant().abs() <= 1e-12 {
            return Err(GeometryError::InvalidView("singular intrinsics".into()));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let err = (gram - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(GeometryError::InvalidView(format!(
                "rotation not orthonormal (|R^T R - I| = {err:.3e})"
            )));
        }
        if self.depth.data.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(GeometryError::InvalidView("negative or non-finite depth".into()));
        }
        if self.depth.rows == 0 || self.depth.cols == 0 {
            return Err(GeometryError::InvalidView("empty depth map".into()));
        }
        if self.pixel_features.height == 0
            || self.pixel_features.width == 0
            || self.pixel_features.channels == 0
        {
            return Err(GeometryError::InvalidView("empty pixel feature grid".into()));
        }
        if self.pixel_features.height > self.depth.rows
            || self.pixel_features.width > self.depth.cols
        {
            return Err(GeometryError::InvalidView(format!(
                "feature grid {}x{} exceeds depth resolution {}x{}",
                self.pixel_features.height,
                self.pixel_features.width,
                self.depth.rows,
                self.depth.cols
            )));
        }
        Ok(())
    }
}

/// Superpoint centroids plus, per superpoint, the member point indices in
/// ascending order.
#[derive(Debug, Clone)]
pub struct Superpointization {
    /// `N_s x 3` centroid coordinates.
    pub sp_coords: Mat,
    pub sp_point_lists: Vec<Vec<usize>>,
}

impl Superpointization {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        let n_s = scene.validate()?;
        let mut lists = vec![Vec::new(); n_s];
        for (i, &s) in scene.superpoint_id.iter().enumerate() {
            lists[s].push(i);
        }
        let mut coords = Mat::zeros(n_s, 3);
        for (s, members) in lists.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for &p in members {
                for (a, &v) in acc.iter_mut().zip(scene.points.row(p)) {
                    *a += v;
                }
            }
            for (c, a) in acc.iter().enumerate() {
                coords.set(s, c, a / members.len() as f64);
            }
        }
        Ok(Self {
            sp_coords: coords,
            sp_point_lists: lists,
        })
    }

    pub fn num_superpoints(&self) -> usize {
        self.sp_point_lists.len()
    }

    /// Checks that stored centroids match the member means within 1e-9.
    pub fn validate(&self, scene: &Scene) -> Result<()> {
        let fresh = Self::from_scene(scene)?;
        if fresh.sp_point_lists != self.sp_point_lists {
            return Err(GeometryError::InvalidScene(
                "superpoint member lists disagree with scene labels".into(),
            ));
        }
        for s in 0..self.num_superpoints() {
            for c in 0..3 {
                let d = (self.sp_coords.get(s, c) - fresh.sp_coords.get(s, c)).abs();
                if d > 1e-9 {
                    return Err(GeometryError::InvalidScene(format!(
                        "centroid {s} off by {d:.3e} in axis {c}"
                    )));
                }
            }
        }
        Ok(())
    }
}

// ── operations ──────────────────────────────────────────────────────

/// Bilinear interpolation to a larger grid, align-corners convention:
/// output corner pixels coincide with input corner pixels, interior samples
/// at `src = out_idx * (in_len - 1) / (out_len - 1)`.
pub fn bilinear_upsample(grid: &Grid, target_h: usize, target_w: usize) -> Result<Grid> {
    if grid.height == 0 || grid.width == 0 || grid.channels == 0 {
        return Err(GeometryError::Upsample("zero-size grid".into()));
    }
    if target_h < grid.height || target_w < grid.width {
        return Err(GeometryError::Upsample(format!(
            "target {target_h}x{target_w} smaller than source {}x{}",
            grid.height, grid.width
        )));
    }
    let c = grid.channels;
    let mut out = Grid::zeros(target_h, target_w, c);
    let src_pos = |out_idx: usize, out_len: usize, in_len: usize| -> f64 {
        if out_len <= 1 || in_len <= 1 {
            0.0
        } else {
            out_idx as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
        }
    };
    for y in 0..target_h {
        let sy = src_pos(y, target_h, grid.height);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(grid.height - 1);
        let ty = sy - y0 as f64;
        for x in 0..target_w {
            let sx = src_pos(x, target_w, grid.width);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(grid.width - 1);
            let tx = sx - x0 as f64;
            let p00 = grid.pixel(y0, x0);
            let p01 = grid.pixel(y0, x1);
            let p10 = grid.pixel(y1, x0);
            let p11 = grid.pixel(y1, x1);
            let dst = out.pixel_mut(y, x);
            for ch in 0..c {
                let top = p00[ch] * (1.0 - tx) + p01[ch] * tx;
                let bottom = p10[ch] * (1.0 - tx) + p11[ch] * tx;
                dst[ch] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    Ok(out)
}

/// Back-projects pixel `(u, v)` (column, row) of a view into world space:
/// `R (K^-1 [u, v, 1]^T D) + T`. Returns `None` for invalid (zero) depth.
pub fn project_pixel(view: &CameraView, u: usize, v: usize) -> Result<Option<Vector3<f64>>> {
    if v >= view.depth.rows || u >= view.depth.cols {
        return Err(GeometryError::PixelOutOfBounds {
            u,
            v,
            w: view.depth.cols,
            h: view.depth.rows,
        });
    }
    let k_inv = view
        .intrinsics
        .try_inverse()
        .ok_or_else(|| GeometryError::InvalidView("singular intrinsics".into()))?;
    Ok(back_project(view, &k_inv, u, v))
}

fn back_project(
    view: &CameraView,
    k_inv: &Matrix3<f64>,
    u: usize,
    v: usize,
) -> Option<Vector3<f64>> {
    let d = view.depth.get(v, u);
    if d == 0.0 {
        return None;
    }
    let ray = k_inv * Vector3::new(u as f64, v as f64, 1.0);
    Some(view.rotation * (ray * d) + view.translation)
}

/// All valid pixels of all views lifted to world space, feature rows aligned
/// with coordinates. Deterministic order: views in the given order, pixels
/// row-major within each view. Feature grids are bilinearly upsampled to the
/// depth resolution first.
pub fn lift_views(views: &[CameraView]) -> Result<(Mat, Mat)> {
    if views.is_empty() {
        return Err(GeometryError::Empty { op: "lift_views" });
    }
    let channels = views[0].pixel_features.channels;
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    let mut count = 0usize;
    for view in views {
        view.validate()?;
        if view.pixel_features.channels != channels {
            return Err(GeometryError::InvalidView(format!(
                "inconsistent feature channels: {} vs {channels}",
                view.pixel_features.channels
            )));
        }
        let k_inv = view
            .intrinsics
            .try_inverse()
            .ok_or_else(|| GeometryError::InvalidView("singular intrinsics".into()))?;
        let full = bilinear_upsample(&view.pixel_features, view.depth.rows, view.depth.cols)?;
        for v in 0..view.depth.rows {
            for u in 0..view.depth.cols {
                if let Some(p) = back_project(view, &k_inv, u, v) {
                    coords.extend_from_slice(&[p.x, p.y, p.z]);
                    feats.extend_from_slice(full.pixel(v, u));
                    count += 1;
                }
            }
        }
    }
    Ok((Mat::new(count, 3, coords), Mat::new(count, channels, feats)))
}

/// Per scene point, the unweighted mean of all lifted feature rows whose
/// coordinate lies within `radius` (membership tested on squared distances).
/// Uncovered points get the zero vector.
///
/// Contributions are summed per channel in ascending value order, which
/// makes the result independent of the order the rows were lifted in.
pub fn spherical_inject(scene_points: &Mat, p_3d: &Mat, feats: &Mat, radius: f64) -> Result<Mat> {
    if radius <= 0.0 || !radius.is_finite() {
        return Err(GeometryError::InvalidScene(format!(
            "spherical_inject: radius must be positive, got {radius}"
        )));
    }
    let n = scene_points.rows;
    let c = feats.cols;
    let mut out = Mat::zeros(n, c);
    if p_3d.rows == 0 {
        return Ok(out);
    }

    // Uniform grid with cell edge = radius; candidates come from the 27
    // neighboring cells of a query point's cell.
    let cell = |v: f64| -> i64 { (v / radius).floor() as i64 };
    let mut buckets: std::collections::BTreeMap<(i64, i64, i64), Vec<usize>> =
        std::collections::BTreeMap::new();
    for j in 0..p_3d.rows {
        let r = p_3d.row(j);
        buckets
            .entry((cell(r[0]), cell(r[1]), cell(r[2])))
            .or_default()
            .push(j);
    }

    let r2 = radius * radius;
    let mut hits: Vec<usize> = Vec::new();
    let mut column: Vec<f64> = Vec::new();
    for i in 0..n {
        let p = scene_points.row(i);
        let (cx, cy, cz) = (cell(p[0]), cell(p[1]), cell(p[2]));
        hits.clear();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = buckets.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &j in bucket {
                        let q = p_3d.row(j);
                        let d2 = (p[0] - q[0]).powi(2)
                            + (p[1] - q[1]).powi(2)
                            + (p[2] - q[2]).powi(2);
                        if d2 <= r2 {
                            hits.push(j);
                        }
                    }
                }
            }
        }
        if hits.is_empty() {
            continue;
        }
        for ch in 0..c {
            column.clear();
            column.extend(hits.iter().map(|&j| feats.get(j, ch)));
            column.sort_by(f64::total_cmp);
            let sum: f64 = column.iter().sum();
            out.set(i, ch, sum / hits.len() as f64);
        }
    }
    Ok(out)
}

/// Mean of member point features per superpoint, accumulated in ascending
/// point-index order.
pub fn superpoint_pool(point_feats: &Mat, sp: &Superpointization) -> Result<Mat> {
    let c = point_feats.cols;
    let mut out = Mat::zeros(sp.num_superpoints(), c);
    for (s, members) in sp.sp_point_lists.iter().enumerate() {
        if members.is_empty() {
            return Err(GeometryError::InvalidScene(format!("superpoint {s} empty")));
        }
        for &p in members {
            if p >= point_feats.rows {
                return Err(GeometryError::InvalidScene(format!(
                    "superpoint {s} references point {p} outside feature rows {}",
                    point_feats.rows
                )));
            }
            for ch in 0..c {
                *out.row_mut(s).get_mut(ch).unwrap() += point_feats.get(p, ch);
            }
        }
        for ch in 0..c {
            out.set(s, ch, out.get(s, ch) / members.len() as f64);
        }
    }
    Ok(out)
}

/// Greedy farthest point sampling on squared Euclidean distances. The first
/// pick is `start_index`; each later pick maximizes the distance to its
/// nearest already-picked point, ties broken by lowest index.
pub fn fps(coords: &Mat, count: usize, start_index: usize) -> Result<Vec<usize>> {
    let n = coords.rows;
    if count == 0 || n == 0 {
        return Err(GeometryError::Empty { op: "fps" });
    }
    if count > n {
        return Err(GeometryError::CountExceedsItems {
            op: "fps",
            count,
            available: n,
        });
    }
    if start_index >= n {
        return Err(GeometryError::CountExceedsItems {
            op: "fps",
            count: start_index,
            available: n,
        });
    }
    let mut picks = Vec::with_capacity(count);
    let mut nearest = vec![f64::INFINITY; n];
    let mut current = start_index;
    picks.push(current);
    for _ in 1..count {
        let base = coords.row(current);
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for (i, near) in nearest.iter_mut().enumerate() {
            let r = coords.row(i);
            let d2 = (r[0] - base[0]).powi(2) + (r[1] - base[1]).powi(2) + (r[2] - base[2]).powi(2);
            if d2 < *near {
                *near = d2;
            }
            if *near > best_d {
                best_d = *near;
                best = i;
            }
        }
        current = best;
        picks.push(current);
    }
    Ok(picks)
}

/// `n x n` boolean matrix whose row `i` marks the `k` nearest neighbors of
/// point `i` (self always included; remaining slots filled by ascending
/// (squared distance, index)). Every row has exactly `k` true entries.
pub fn knn_mask(coords: &Mat, k: usize) -> Result<BoolMat> {
    let n = coords.rows;
    if n == 0 || k == 0 {
        return Err(GeometryError::Empty { op: "knn_mask" });
    }
    if k > n {
        return Err(GeometryError::CountExceedsItems {
            op: "knn_mask",
            count: k,
            available: n,
        });
    }
    let mut mask = BoolMat::filled(n, n, false);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        mask.set(i, i, true);
        if k == 1 {
            continue;
        }
        let p = coords.row(i);
        cand.clear();
        for j in 0..n {
            if j == i {
                continue;
            }
            let q = coords.row(j);
            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            cand.push((d2, j));
        }
        let take = k - 1;
        cand.select_nth_unstable_by(take - 1, |a, b| {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        });
        for &(_, j) in &cand[..take] {
            mask.set(i, j, true);
        }
    }
    Ok(mask)
}
