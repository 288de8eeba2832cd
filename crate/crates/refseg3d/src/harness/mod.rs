//! Synthetic scenes, metrics, the toy training loop and evaluation.
//!
//! Scenes are clusters of box or ball shaped objects with planted,
//! well-separated feature vectors; text tokens reuse the target objects'
//! signatures so the referring task is solvable from the mechanism alone.
//! Everything is a pure function of the seed.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dense::{Grid, Mat};
use crate::geometry::{CameraView, GeometryError, Scene};
use crate::loss::{assign, pool_gt_to_superpoints, total_loss, LossError, LossReport};
use crate::model::params::ParamStore;
use crate::model::{
    forward, infer_gres, infer_res, ModelConfig, ModelError, RawFeatures, SceneInputs,
};
use crate::tensor::{Tape, TensorError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("synth spec: {0}")]
    Spec(String),
    #[error("iou: mask lengths differ ({pred} vs {gt})")]
    MaskLength { pred: usize, gt: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training step {step}: loss became non-finite ({value})")]
    LossNotFinite { step: usize, value: f64 },
    #[error("training step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

// ── synthetic scenes ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// One referred object.
    Single,
    /// A fixed number of referred objects.
    Multi(usize),
    /// No-target expression: the text refers to nothing in the scene.
    Zero,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_objects: usize,
    pub points_per_object: usize,
    /// Gaussian jitter added to every point.
    pub noise_sigma: f64,
    pub n_views: usize,
    /// (height, width) of rendered depth/feature images.
    pub image_size: (usize, usize),
    /// Channels of the rendered per-pixel features.
    pub feature_dim: usize,
    /// Channels of the planted per-point features.
    pub feature_dim_3d: usize,
    /// Channels of the planted text tokens.
    pub text_dim: usize,
    pub target_rule: TargetRule,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_objects: 4,
            points_per_object: 32,
            noise_sigma: 0.02,
            n_views: 0,
            image_size: (32, 32),
            feature_dim: 3,
            feature_dim_3d: 4,
            text_dim: 5,
            target_rule: TargetRule::Single,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects == 0 {
            return Err(HarnessError::Spec("n_objects must be positive".into()));
        }
        if self.points_per_object == 0 {
            return Err(HarnessError::Spec("points_per_object must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(HarnessError::Spec("noise_sigma must be non-negative".into()));
        }
        if self.n_views > 0 && (self.image_size.0 < 2 || self.image_size.1 < 2) {
            return Err(HarnessError::Spec(format!(
                "image_size {}x{} too small for rendering",
                self.image_size.0, self.image_size.1
            )));
        }
        if self.feature_dim == 0 || self.feature_dim_3d == 0 || self.text_dim == 0 {
            return Err(HarnessError::Spec("feature widths must be positive".into()));
        }
        if let TargetRule::Multi(n) = self.target_rule {
            if n == 0 || n > self.n_objects {
                return Err(HarnessError::Spec(format!(
                    "multi-target count {n} outside [1, {}]",
                    self.n_objects
                )));
            }
        }
        Ok(())
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; avoids ln(0) by sampling from the open interval.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A planted, well-separated signature: a scaled axis direction plus a
/// small random residue, so cosine similarities discriminate objects.
fn signature(rng: &mut ChaCha8Rng, index: usize, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.2..0.2)).collect();
    v[index % dim] += if (index / dim) % 2 == 0 { 2.0 } else { -2.0 };
    v
}

const OBJECT_SPACING: f64 = 3.0;
const SUPERPOINT_CELL: f64 = 0.5;

/// Generates one scene: objects, planted features, grid-cell superpoints,
/// target masks, text tokens and optional rendered views.
pub fn generate_scene(spec: &SynthSpec) -> Result<(Scene, Vec<CameraView>, Mat)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_obj = spec.n_objects;
    let grid_side = (n_obj as f64).sqrt().ceil() as usize;

    let feat3d: Vec<Vec<f64>> = (0..n_obj)
        .map(|o| signature(&mut rng, o, spec.feature_dim_3d))
        .collect();
    let feat2d: Vec<Vec<f64>> = (0..n_obj)
        .map(|o| signature(&mut rng, o, spec.feature_dim))
        .collect();
    let text_sig: Vec<Vec<f64>> = (0..n_obj)
        .map(|o| signature(&mut rng, o, spec.text_dim))
        .collect();

    let n_p = n_obj * spec.points_per_object;
    let mut points = Mat::zeros(n_p, 3);
    let mut point_features = Mat::zeros(n_p, spec.feature_dim_3d);
    let mut owner = Vec::with_capacity(n_p);
    for o in 0..n_obj {
        let center = [
            (o % grid_side) as f64 * OBJECT_SPACING,
            (o / grid_side) as f64 * OBJECT_SPACING,
            0.0,
        ];
        let boxy = o % 2 == 0;
        for j in 0..spec.points_per_object {
            let p = o * spec.points_per_object + j;
            for c in 0..3 {
                let offset = if boxy {
                    rng.gen_range(-0.4..0.4)
                } else {
                    // Ball: clamped gaussian radius keeps objects separated.
                    (gauss(&mut rng) * 0.2).clamp(-0.45, 0.45)
                };
                points.set(p, c, center[c] + offset + gauss(&mut rng) * spec.noise_sigma);
            }
            point_features
                .row_mut(p)
                .copy_from_slice(&feat3d[o]);
            owner.push(o);
        }
    }

    // Superpoints: dense ids for occupied grid cells, in cell order.
    let cell_of = |p: usize| -> (i64, i64, i64) {
        (
            (points.get(p, 0) / SUPERPOINT_CELL).floor() as i64,
            (points.get(p, 1) / SUPERPOINT_CELL).floor() as i64,
            (points.get(p, 2) / SUPERPOINT_CELL).floor() as i64,
        )
    };
    let mut cells = BTreeMap::new();
    for p in 0..n_p {
        let next = cells.len();
        cells.entry(cell_of(p)).or_insert(next);
    }
    // Re-number in sorted cell order so ids are independent of point order.
    for (i, (_, id)) in cells.iter_mut().enumerate() {
        *id = i;
    }
    let superpoint_id: Vec<usize> = (0..n_p).map(|p| cells[&cell_of(p)]).collect();

    let targets: Vec<usize> = match spec.target_rule {
        TargetRule::Zero => vec![],
        TargetRule::Single => vec![rng.gen_range(0..n_obj)],
        TargetRule::Multi(n) => {
            let mut ids: Vec<usize> = (0..n_obj).collect();
            for i in (1..ids.len()).rev() {
                ids.swap(i, rng.gen_range(0..=i));
            }
            let mut chosen = ids[..n].to_vec();
            chosen.sort_unstable();
            chosen
        }
    };
    let gt_instances: Vec<Vec<bool>> = targets
        .iter()
        .map(|&t| (0..n_p).map(|p| owner[p] == t).collect())
        .collect();

    // Text: one token per target plus two low-magnitude noise tokens. The
    // noise must not reuse other objects' signatures: token order carries no
    // information downstream, so the target has to be the only token that
    // matches a planted signature.
    let mut token_rows: Vec<Vec<f64>> = targets.iter().map(|&t| text_sig[t].clone()).collect();
    for _ in 0..2 {
        token_rows.push((0..spec.text_dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    let text_raw = Mat::new(
        token_rows.len(),
        spec.text_dim,
        token_rows.into_iter().flatten().collect(),
    );

    let scene = Scene {
        points,
        point_features,
        superpoint_id,
        gt_instances,
        expression_id: format!("synth-{}", spec.seed),
    };
    scene.validate()?;

    let views = render_views(spec, &scene, &owner, &feat2d, &mut rng)?;
    Ok((scene, views, text_raw))
}

/// Point-splat rendering: cameras on a circle above the scene center; each
/// pixel keeps the nearest point's depth and its object's 2D feature.
fn render_views(
    spec: &SynthSpec,
    scene: &Scene,
    owner: &[usize],
    feat2d: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CameraView>> {
    if spec.n_views == 0 {
        return Ok(vec![]);
    }
    let n_p = scene.num_points();
    let mut center = Vector3::zeros();
    for p in 0..n_p {
        center += Vector3::new(
            scene.points.get(p, 0),
            scene.points.get(p, 1),
            scene.points.get(p, 2),
        );
    }
    center /= n_p as f64;
    let mut extent = 0.0f64;
    for p in 0..n_p {
        let d = (Vector3::new(
            scene.points.get(p, 0),
            scene.points.get(p, 1),
            scene.points.get(p, 2),
        ) - center)
            .norm();
        extent = extent.max(d);
    }
    let radius = (extent * 2.0).max(1.0);

    let (h, w) = spec.image_size;
    let f = 0.8 * h.min(w) as f64;
    let intrinsics = Matrix3::new(
        f,
        0.0,
        (w as f64 - 1.0) / 2.0,
        0.0,
        f,
        (h as f64 - 1.0) / 2.0,
        0.0,
        0.0,
        1.0,
    );

    let mut views = Vec::with_capacity(spec.n_views);
    for v in 0..spec.n_views {
        let angle = std::f64::consts::TAU * v as f64 / spec.n_views as f64
            + rng.gen_range(-0.05..0.05);
        let eye = center
            + Vector3::new(
                radius * angle.cos(),
                radius * angle.sin(),
                radius * 0.75,
            );
        let fwd = (center - eye).normalize();
        let up = Vector3::z();
        let right = fwd.cross(&up).normalize();
        let down = fwd.cross(&right).normalize();
        let rotation = Matrix3::from_columns(&[right, down, fwd]);

        let mut depth = Mat::zeros(h, w);
        let mut feats = Grid::zeros(h, w, spec.feature_dim);
        for p in 0..n_p {
            let world = Vector3::new(
                scene.points.get(p, 0),
                scene.points.get(p, 1),
                scene.points.get(p, 2),
            );
            let cam = rotation.transpose() * (world - eye);
            if cam.z <= 1e-9 {
                continue;
            }
            let u = f * cam.x / cam.z + intrinsics[(0, 2)];
            let vv = f * cam.y / cam.z + intrinsics[(1, 2)];
            let ui = u.round();
            let vi = vv.round();
            if ui < 0.0 || vi < 0.0 || ui >= w as f64 || vi >= h as f64 {
                continue;
            }
            let (ui, vi) = (ui as usize, vi as usize);
            let current = depth.get(vi, ui);
            if current == 0.0 || cam.z < current {
                depth.set(vi, ui, cam.z);
                feats
                    .pixel_mut(vi, ui)
                    .copy_from_slice(&feat2d[owner[p]]);
            }
        }
        let view = CameraView {
            intrinsics,
            rotation,
            translation: eye,
            depth,
            pixel_features: feats,
        };
        view.validate()?;
        views.push(view);
    }
    Ok(views)
}

/// One training/eval sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: Scene,
    pub views: Vec<CameraView>,
    pub text_raw: Mat,
}

/// `count` scenes from consecutive seeds (spec.seed, spec.seed+1, ...).
pub fn generate_dataset(spec: &SynthSpec, count: usize) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let one = SynthSpec { seed: spec.seed.wrapping_add(i as u64), ..spec.clone() };
            let (scene, views, text_raw) = generate_scene(&one)?;
            Ok(Sample { scene, views, text_raw })
        })
        .collect()
}

// ── metrics ─────────────────────────────────────────────────────────

/// Intersection over union with the zero-target rule: two empty masks
/// count as a perfect prediction.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(HarnessError::MaskLength { pred: pred.len(), gt: gt.len() });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalResult {
    pub per_sample_iou: Vec<f64>,
    pub miou: f64,
    pub acc_25: f64,
    pub acc_50: f64,
}

/// Metrics from per-sample predictions; thresholds are strict.
pub fn score_masks(preds: &[Vec<bool>], gts: &[Vec<bool>]) -> Result<EvalResult> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(HarnessError::EmptyDataset);
    }
    let per_sample_iou: Vec<f64> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| iou(p, g))
        .collect::<Result<_>>()?;
    let n = per_sample_iou.len() as f64;
    let miou = per_sample_iou.iter().sum::<f64>() / n;
    let acc_25 = per_sample_iou.iter().filter(|&&v| v > 0.25).count() as f64 / n;
    let acc_50 = per_sample_iou.iter().filter(|&&v| v > 0.5).count() as f64 / n;
    Ok(EvalResult { per_sample_iou, miou, acc_25, acc_50 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferMode {
    Res,
    Gres,
}

fn gt_union(scene: &Scene) -> Vec<bool> {
    let mut out = vec![false; scene.num_points()];
    for mask in &scene.gt_instances {
        for (slot, &b) in out.iter_mut().zip(mask) {
            *slot = *slot || b;
        }
    }
    out
}

/// Runs the model over the dataset and scores predicted point masks
/// against the union of gt instances.
pub fn evaluate(
    cfg: &ModelConfig,
    store: &ParamStore,
    samples: &[Sample],
    mode: InferMode,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for sample in samples {
        let inputs = SceneInputs::prepare(
            &sample.scene,
            &RawFeatures,
            &sample.views,
            sample.text_raw.clone(),
            cfg,
        )?;
        let tape = Tape::new();
        let p = store.leaves(&tape, false);
        let out = forward(&inputs, cfg, &p)?;
        let pred = match mode {
            InferMode::Res => infer_res(&out.queries, &inputs.sp, inputs.n_points),
            InferMode::Gres => infer_gres(&out.queries, &inputs.sp, inputs.n_points),
        };
        preds.push(pred);
        gts.push(gt_union(&sample.scene));
    }
    score_masks(&preds, &gts)
}

// ── training ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    /// Polynomial decay lr * (1 - step/steps)^power; plain GD when off.
    pub poly_decay: bool,
    pub power: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { steps: 2000, lr: 0.05, poly_decay: false, power: 4.0, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub sample: usize,
    pub lr: f64,
    pub l_mask: f64,
    pub l_prob: f64,
    pub l_con: f64,
    pub total: f64,
}

struct PreparedSample<'a> {
    scene: &'a Scene,
    inputs: SceneInputs,
    gt_sp: Vec<Vec<f64>>,
}

fn train_step(
    cfg: &ModelConfig,
    store: &mut ParamStore,
    prep: &PreparedSample,
    lr: f64,
) -> Result<LossReport> {
    let tape = Tape::new();
    let p = store.leaves(&tape, true);
    let out = forward(&prep.inputs, cfg, &p)?;
    let assignment = assign(&out.queries.coords, &prep.scene.gt_instances, prep.scene)?;
    let (total, report) = total_loss(&out, &assignment, &prep.gt_sp, cfg)?;
    total.backward()?;
    store
        .apply_grads(&p.grads(), lr)
        .expect("gradients come from this store's own layout");
    Ok(report)
}

/// Plain (optionally poly-decayed) gradient descent over the dataset with
/// a seeded per-epoch shuffle. Aborts with a step diagnostic if the loss
/// or any intermediate value stops being finite.
pub fn train_toy(
    cfg: &ModelConfig,
    store: &mut ParamStore,
    samples: &[Sample],
    opts: &TrainOptions,
) -> Result<Vec<StepLog>> {
    if samples.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let mut prepared = Vec::with_capacity(samples.len());
    for sample in samples {
        let inputs = SceneInputs::prepare(
            &sample.scene,
            &RawFeatures,
            &sample.views,
            sample.text_raw.clone(),
            cfg,
        )?;
        let gt_sp = sample
            .scene
            .gt_instances
            .iter()
            .map(|m| pool_gt_to_superpoints(m, &inputs.sp))
            .collect();
        prepared.push(PreparedSample { scene: &sample.scene, inputs, gt_sp });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut log = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        if step % prepared.len() == 0 {
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
        }
        let idx = order[step % prepared.len()];
        let lr = if opts.poly_decay {
            opts.lr * (1.0 - step as f64 / opts.steps as f64).powf(opts.power)
        } else {
            opts.lr
        };
        let report = train_step(cfg, store, &prepared[idx], lr)
            .map_err(|e| HarnessError::Step { step, source: Box::new(e) })?;
        if !report.total.is_finite() {
            return Err(HarnessError::LossNotFinite { step, value: report.total });
        }
        log.push(StepLog {
            step,
            sample: idx,
            lr,
            l_mask: report.l_mask,
            l_prob: report.l_prob,
            l_con: report.l_con,
            total: report.total,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests;
