//! The full segmentation model.
//!
//! Pipeline: project text embeddings (T = E W_t), fuse visual features
//! (V = MLP(SPPool(F_3d)) + MLP(SPPool(F_2d))), sample sparse queries from
//! superpoint centroids, then run an L-layer prompt-aware decoder. Each
//! layer builds task prompts from text/query cross-attention scores,
//! filters them by the previous layer's predicted probabilities, runs three
//! attention streams around one shared residual, re-applies spatial
//! attention, and predicts per-query masks and probabilities.

pub mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{cross_attention, spatial_aware_attention, AttentionError};
use crate::dense::Mat;
use crate::geometry::{
    fps, lift_views, spherical_inject, superpoint_pool, CameraView, GeometryError, Scene,
    Superpointization,
};
use crate::model::params::ModelParams;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("generate_queries: need 2m = {needed} seeds but scene has {available} superpoints")]
    NotEnoughSuperpoints { needed: usize, available: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

// ── configuration ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden dimension shared by queries, text tokens and visual features.
    pub d: usize,
    /// Query count m.
    pub m: usize,
    /// Decoder layers L.
    pub layers: usize,
    /// Neighbors k for spatial-aware attention.
    pub k: usize,
    /// Prompt filter threshold r on the previous layer's probabilities.
    pub r: f64,
    /// Spherical query radius for 2D feature injection (scene units).
    pub radius: f64,
    /// Loss weights: mask (BCE+Dice), probability, contrastive.
    pub lambda_mask: f64,
    pub lambda_prob: f64,
    pub lambda_con: f64,
    /// Raw feature widths: text embeddings, 3D point features, 2D pixels.
    pub c_text: usize,
    pub c_3d: usize,
    pub c_2d: usize,
    /// Contrastive temperature.
    pub temperature: f64,
    /// Prompt mechanism on/off (ablation switch).
    pub use_prompts: bool,
    /// One shared residual around the three decoder attention streams
    /// (false: each stream carries its own residual).
    pub shared_residual: bool,
    /// Supervise every layer (averaged) instead of only the final one.
    pub deep_supervision: bool,
    /// First pick of farthest point sampling.
    pub fps_start: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            m: 128,
            layers: 6,
            k: 8,
            r: 0.75,
            radius: 0.05,
            lambda_mask: 1.0,
            lambda_prob: 0.1,
            lambda_con: 0.1,
            c_text: 16,
            c_3d: 6,
            c_2d: 8,
            temperature: 0.07,
            use_prompts: true,
            shared_residual: true,
            deep_supervision: true,
            fps_start: 0,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for finite-difference tests and fast experiments.
    pub fn micro() -> Self {
        Self {
            d: 8,
            m: 4,
            layers: 2,
            k: 2,
            c_text: 5,
            c_3d: 4,
            c_2d: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.d == 0 || self.m == 0 || self.layers == 0 {
            return fail(format!(
                "d, m, layers must be positive (got {}, {}, {})",
                self.d, self.m, self.layers
            ));
        }
        if self.k == 0 || self.k > self.m {
            return fail(format!("k must satisfy 1 <= k <= m, got k={} m={}", self.k, self.m));
        }
        if !(0.0..=1.0).contains(&self.r) {
            return fail(format!("r must lie in [0, 1], got {}", self.r));
        }
        if self.radius <= 0.0 {
            return fail(format!("radius must be positive, got {}", self.radius));
        }
        if self.temperature <= 0.0 {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.lambda_mask < 0.0 || self.lambda_prob < 0.0 || self.lambda_con < 0.0 {
            return fail("loss weights must be non-negative".into());
        }
        if self.c_text == 0 || self.c_3d == 0 || self.c_2d == 0 {
            return fail("feature widths must be positive".into());
        }
        Ok(())
    }
}

// ── inputs ──────────────────────────────────────────────────────────

/// Source of per-point 3D features F_3d.
pub trait FeatureProvider {
    fn features(&self, scene: &Scene) -> Mat;
}

/// Uses the scene's stored point features as F_3d.
pub struct RawFeatures;

impl FeatureProvider for RawFeatures {
    fn features(&self, scene: &Scene) -> Mat {
        scene.point_features.clone()
    }
}

/// All-zero F_3d of a given width; isolates the 2D branch.
pub struct ZeroFeatures(pub usize);

impl FeatureProvider for ZeroFeatures {
    fn features(&self, scene: &Scene) -> Mat {
        Mat::zeros(scene.num_points(), self.0)
    }
}

/// Everything the differentiable forward pass needs, with all grad-free
/// geometry (lifting, injection, pooling) precomputed once.
#[derive(Debug, Clone)]
pub struct SceneInputs {
    pub sp: Superpointization,
    /// SPPool(F_3d), `N_s x c_3d`.
    pub pooled_3d: Mat,
    /// SPPool of injected 2D features, `N_s x c_2d`; `None` without views.
    pub pooled_2d: Option<Mat>,
    /// Raw text embeddings E, `N_t x c_text`.
    pub text_raw: Mat,
    pub n_points: usize,
}

impl SceneInputs {
    pub fn prepare(
        scene: &Scene,
        provider: &dyn FeatureProvider,
        views: &[CameraView],
        text_raw: Mat,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        scene.validate()?;
        let sp = Superpointization::from_scene(scene)?;
        let f3d = provider.features(scene);
        if f3d.rows != scene.num_points() || f3d.cols != cfg.c_3d {
            return Err(ModelError::Input(format!(
                "F_3d is {}x{}, config expects {}x{}",
                f3d.rows,
                f3d.cols,
                scene.num_points(),
                cfg.c_3d
            )));
        }
        let pooled_3d = superpoint_pool(&f3d, &sp)?;
        let pooled_2d = if views.is_empty() {
            None
        } else {
            let (p_3d, feats) = lift_views(views)?;
            if feats.cols != cfg.c_2d {
                return Err(ModelError::Input(format!(
                    "views deliver {} feature channels, config expects {}",
                    feats.cols, cfg.c_2d
                )));
            }
            let injected = spherical_inject(&scene.points, &p_3d, &feats, cfg.radius)?;
            Some(superpoint_pool(&injected, &sp)?)
        };
        if text_raw.rows == 0 || text_raw.cols != cfg.c_text {
            return Err(ModelError::Input(format!(
                "text embeddings are {}x{}, config expects N_t>=1 x {}",
                text_raw.rows, text_raw.cols, cfg.c_text
            )));
        }
        Ok(Self {
            sp,
            pooled_3d,
            pooled_2d,
            text_raw,
            n_points: scene.num_points(),
        })
    }
}

// ── forward building blocks ─────────────────────────────────────────

fn mlp2(x: &Tensor, p: &ModelParams, prefix: &str) -> Result<Tensor> {
    let h = x
        .linear(
            p.get(&format!("{prefix}.w1")),
            Some(p.get(&format!("{prefix}.b1"))),
        )?
        .relu()?;
    Ok(h.linear(
        p.get(&format!("{prefix}.w2")),
        Some(p.get(&format!("{prefix}.b2"))),
    )?)
}

/// V = MLP(SPPool(F_3d)) + MLP(SPPool(F_2d)); the 2D branch is skipped
/// entirely when no views were lifted, so V equals the 3D path exactly.
pub fn fuse_visual(inputs: &SceneInputs, p: &ModelParams) -> Result<Tensor> {
    let x3 = p.tape().constant_mat(&inputs.pooled_3d)?;
    let v3 = mlp2(&x3, p, "fuse.mlp3d")?;
    match &inputs.pooled_2d {
        None => Ok(v3),
        Some(pooled) => {
            let x2 = p.tape().constant_mat(pooled)?;
            Ok(v3.add(&mlp2(&x2, p, "fuse.mlp2d")?)?)
        }
    }
}

/// Max cosine similarity between `row` and any row of `tokens`.
fn max_cosine(row: &[f64], tokens: &Mat) -> f64 {
    let nq: f64 = row.iter().map(|v| v * v).sum();
    let mut best = f64::NEG_INFINITY;
    for t in 0..tokens.rows {
        let tok = tokens.row(t);
        let dot: f64 = row.iter().zip(tok).map(|(a, b)| a * b).sum();
        let nt: f64 = tok.iter().map(|v| v * v).sum();
        // 1e-12 keeps zero vectors finite (score 0) without moving real ones.
        let sim = dot / ((nq + 1e-12) * (nt + 1e-12)).sqrt();
        best = best.max(sim);
    }
    best
}

/// Ranks all rows by (score descending, index ascending) and returns the
/// top `count` row indices, sorted ascending.
fn top_by_score(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order[..count].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Sparse query generation: FPS picks 2m superpoint seeds, spatial
/// attention mixes them, the m seeds most text-relevant (max cosine against
/// token features, computed off-tape) survive, and an MLP projects them.
/// Returns (Q_0, query coords, chosen superpoint ids).
pub fn generate_queries(
    v: &Tensor,
    sp_coords: &Mat,
    t: &Tensor,
    cfg: &ModelConfig,
    p: &ModelParams,
) -> Result<(Tensor, Mat, Vec<usize>)> {
    let n_s = sp_coords.rows;
    if 2 * cfg.m > n_s {
        return Err(ModelError::NotEnoughSuperpoints {
            needed: 2 * cfg.m,
            available: n_s,
        });
    }
    let seeds = fps(sp_coords, 2 * cfg.m, cfg.fps_start)?;
    let q_seed = v.gather_rows(&seeds)?;
    let mut seed_coords = Mat::zeros(seeds.len(), 3);
    for (row, &s) in seeds.iter().enumerate() {
        seed_coords.row_mut(row).copy_from_slice(sp_coords.row(s));
    }
    let q = spatial_aware_attention(&q_seed, &seed_coords, cfg.k, p.attention("queries.spa"))?;

    let q_data = Mat::new(seeds.len(), cfg.d, q.data());
    let tokens = Mat::new(t.shape()[0], cfg.d, t.data());
    let scores: Vec<f64> = (0..q_data.rows)
        .map(|j| max_cosine(q_data.row(j), &tokens))
        .collect();
    let selected = top_by_score(&scores, cfg.m);

    let q_sel = q.gather_rows(&selected)?;
    let q0 = mlp2(&q_sel, p, "queries.mlp")?;
    let mut coords = Mat::zeros(cfg.m, 3);
    let mut chosen = Vec::with_capacity(cfg.m);
    for (row, &j) in selected.iter().enumerate() {
        coords.row_mut(row).copy_from_slice(seed_coords.row(j));
        chosen.push(seeds[j]);
    }
    Ok((q0, coords, chosen))
}

// ── prompts ─────────────────────────────────────────────────────────

/// Diagnostics of one prompt construction (plain data; the differentiable
/// path lives in [`PromptBuild`]).
#[derive(Debug, Clone)]
pub struct PromptState {
    /// Sc: attention scores summed over text tokens, one per query.
    pub scores: Vec<f64>,
    /// Sc with -inf at filtered positions (the Eq. 8 view), regardless of
    /// whether the fallback kicked in.
    pub filtered_scores: Vec<f64>,
    /// The softmax weights actually used.
    pub weights: Vec<f64>,
    /// Prompt rows, m x d.
    pub prompts: Mat,
    /// True when every query fell below the threshold and the unfiltered
    /// scores were used instead.
    pub fallback_used: bool,
}

pub struct PromptBuild {
    /// Text tokens updated by attending over queries (T-hat).
    pub t_hat: Tensor,
    /// Prompt matrix Pt, m x d.
    pub prompts: Tensor,
    pub state: PromptState,
}

/// Eqs. 7-10: cross-attend text over queries, sum attention columns into
/// per-query relevance, filter by the previous layer's probabilities
/// (threshold `r`), softmax, and scale query rows into prompts. If the
/// filter removes every query, the unfiltered scores are used (training
/// from scratch starts with all probabilities near 0.5).
pub fn build_prompt(
    q_l: &Tensor,
    t: &Tensor,
    prob_prev: &[f64],
    r: f64,
    p: &ModelParams,
    layer: &str,
) -> Result<PromptBuild> {
    let m = q_l.shape()[0];
    debug_assert_eq!(prob_prev.len(), m);
    debug_assert!(prob_prev.iter().all(|&v| (0.0..=1.0).contains(&v)));

    let cross = cross_attention(t, q_l, p.attention(&format!("{layer}.prompt")))?;
    let sc = cross.weights.sum_axis(0)?;
    let keep: Vec<bool> = prob_prev.iter().map(|&prob| prob >= r).collect();
    let fallback_used = keep.iter().all(|&b| !b);
    let weights = if fallback_used {
        sc.softmax(0)?
    } else {
        sc.masked_fill(&keep, f64::NEG_INFINITY)?.softmax(0)?
    };
    let prompts = q_l.row_scale(&weights)?;

    let scores = sc.data();
    let filtered_scores: Vec<f64> = scores
        .iter()
        .zip(&keep)
        .map(|(&s, &k)| if k { s } else { f64::NEG_INFINITY })
        .collect();
    let state = PromptState {
        scores,
        filtered_scores,
        weights: weights.data(),
        prompts: Mat::new(m, q_l.shape()[1], prompts.data()),
        fallback_used,
    };
    Ok(PromptBuild {
        t_hat: cross.values,
        prompts,
        state,
    })
}

// ── decoder ─────────────────────────────────────────────────────────

pub struct LayerOutput {
    /// Query embeddings the heads read from, m x d.
    pub embeddings: Tensor,
    /// Per-query superpoint mask logits, m x N_s.
    pub mask_logits: Tensor,
    /// Pre-sigmoid probability logits, length m.
    pub prob_logits: Tensor,
    /// Sigmoid probabilities, length m.
    pub prob: Tensor,
    /// Prompt diagnostics (None at layer 0 and with prompts disabled).
    pub prompt: Option<PromptState>,
}

fn prediction_head(
    q: &Tensor,
    v: &Tensor,
    p: &ModelParams,
    prefix: &str,
) -> Result<(Tensor, Tensor, Tensor)> {
    let m = q.shape()[0];
    let v_emb = v.matmul(p.get(&format!("{prefix}.w_mask")))?;
    let mask_logits = q.matmul(&v_emb.transpose()?)?;
    let prob_logits = q
        .matmul(p.get(&format!("{prefix}.w_prob")))?
        .reshape(vec![m])?;
    let prob = prob_logits.sigmoid()?;
    Ok((mask_logits, prob_logits, prob))
}

/// One decoder layer: prompts (Eqs. 7-10), concat, three attention streams
/// summed around a single shared residual, Abandon (keep the first m rows),
/// spatial-aware attention over the query coordinates, prediction head.
pub fn decoder_layer(
    q_l: &Tensor,
    t: &Tensor,
    v: &Tensor,
    coords: &Mat,
    prob_prev: &[f64],
    cfg: &ModelConfig,
    p: &ModelParams,
    l: usize,
) -> Result<(Tensor, LayerOutput)> {
    let prefix = format!("layer{l}");
    let (q_hat, t_used, prompt_state) = if cfg.use_prompts {
        let pb = build_prompt(q_l, t, prob_prev, cfg.r, p, &prefix)?;
        (q_l.concat_rows(&pb.prompts)?, pb.t_hat, Some(pb.state))
    } else {
        (q_l.clone(), t.clone(), None)
    };
    let text = cross_attention(&q_hat, &t_used, p.attention(&format!("{prefix}.text")))?;
    let selfa = cross_attention(&q_hat, &q_hat, p.attention(&format!("{prefix}.self")))?;
    let visual = cross_attention(&q_hat, v, p.attention(&format!("{prefix}.visual")))?;
    let fused = if cfg.shared_residual {
        q_hat
            .add(&text.attended)?
            .add(&selfa.attended)?
            .add(&visual.attended)?
    } else {
        text.values.add(&selfa.values)?.add(&visual.values)?
    };
    let q_bar = fused.slice_rows(0, cfg.m)?;
    let q_next = spatial_aware_attention(&q_bar, coords, cfg.k, p.attention(&format!("{prefix}.spa")))?;
    let (mask_logits, prob_logits, prob) = prediction_head(&q_next, v, p, &format!("{prefix}.head"))?;
    Ok((
        q_next.clone(),
        LayerOutput {
            embeddings: q_next,
            mask_logits,
            prob_logits,
            prob,
            prompt: prompt_state,
        },
    ))
}

// ── full forward ────────────────────────────────────────────────────

/// Final per-query state, detached from the tape.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub embeddings: Mat,
    pub coords: Mat,
    pub prob: Vec<f64>,
    pub mask_logits: Mat,
}

pub struct ForwardOutput {
    /// layers[0] is the init head on Q_0; layers[1..=L] are decoder layers.
    pub layers: Vec<LayerOutput>,
    pub v: Tensor,
    pub t: Tensor,
    pub q_final: Tensor,
    pub queries: QuerySet,
    /// Superpoint ids the m queries were seeded from.
    pub seed_superpoints: Vec<usize>,
}

pub fn forward(inputs: &SceneInputs, cfg: &ModelConfig, p: &ModelParams) -> Result<ForwardOutput> {
    cfg.validate()?;
    let t_raw = p.tape().constant_mat(&inputs.text_raw)?;
    let t = t_raw.matmul(p.get("text.w_t"))?;
    let v = fuse_visual(inputs, p)?;
    let (q0, coords, seed_superpoints) = generate_queries(&v, &inputs.sp.sp_coords, &t, cfg, p)?;

    let (mask0, plog0, prob0) = prediction_head(&q0, &v, p, "init")?;
    let mut layers = vec![LayerOutput {
        embeddings: q0.clone(),
        mask_logits: mask0,
        prob_logits: plog0,
        prob: prob0,
        prompt: None,
    }];
    let mut q = q0;
    for l in 0..cfg.layers {
        let prob_prev = layers.last().unwrap().prob.data();
        let (q_next, out) = decoder_layer(&q, &t, &v, &coords, &prob_prev, cfg, p, l)?;
        layers.push(out);
        q = q_next;
    }

    let last = layers.last().unwrap();
    let n_s = inputs.sp.num_superpoints();
    let queries = QuerySet {
        embeddings: Mat::new(cfg.m, cfg.d, q.data()),
        coords,
        prob: last.prob.data(),
        mask_logits: Mat::new(cfg.m, n_s, last.mask_logits.data()),
    };
    Ok(ForwardOutput {
        layers,
        v,
        t,
        q_final: q,
        queries,
        seed_superpoints,
    })
}

// ── inference ───────────────────────────────────────────────────────

fn expand_to_points(sp_mask: &[bool], sp: &Superpointization, n_points: usize) -> Vec<bool> {
    let mut out = vec![false; n_points];
    for (s, members) in sp.sp_point_lists.iter().enumerate() {
        if sp_mask[s] {
            for &p in members {
                out[p] = true;
            }
        }
    }
    out
}

fn binarize_row(logits: &[f64]) -> Vec<bool> {
    // sigmoid(x) > 0.5 is exactly x > 0.
    logits.iter().map(|&v| v > 0.0).collect()
}

/// Single-target inference: the query with the highest probability (lowest
/// index on ties) contributes its binarized mask.
pub fn infer_res(queries: &QuerySet, sp: &Superpointization, n_points: usize) -> Vec<bool> {
    let mut best = 0;
    for (i, &p) in queries.prob.iter().enumerate() {
        if p > queries.prob[best] {
            best = i;
        }
    }
    let sp_mask = binarize_row(queries.mask_logits.row(best));
    expand_to_points(&sp_mask, sp, n_points)
}

/// Generalized inference: union of binarized masks of every query with
/// probability strictly above 0.5; no such query means an empty mask.
pub fn infer_gres(queries: &QuerySet, sp: &Superpointization, n_points: usize) -> Vec<bool> {
    let n_s = queries.mask_logits.cols;
    let mut sp_mask = vec![false; n_s];
    for (i, &p) in queries.prob.iter().enumerate() {
        if p > 0.5 {
            for (s, slot) in sp_mask.iter_mut().enumerate() {
                *slot = *slot || queries.mask_logits.get(i, s) > 0.0;
            }
        }
    }
    expand_to_points(&sp_mask, sp, n_points)
}
