//! Training objective: per-query mask loss (BCE + Dice) on assigned
//! queries, probability supervision over all queries, a simplified
//! contrastive term pulling positive queries toward the pooled text
//! feature, and the weighted total with optional deep supervision.

use serde::Serialize;
use thiserror::Error;

use crate::dense::Mat;
use crate::geometry::{Scene, Superpointization};
use crate::model::{ForwardOutput, ModelConfig};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("assign: {instances} gt instances but only {queries} queries")]
    TooManyInstances { instances: usize, queries: usize },
    #[error("assign: gt instance {index} has an empty point mask")]
    EmptyInstance { index: usize },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

// ── assignment ──────────────────────────────────────────────────────

/// Which query supervises which ground-truth instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    /// (gt_instance_index, query_index) pairs.
    pub pairs: Vec<(usize, usize)>,
    /// labels[q] = 1.0 iff query q appears in `pairs`.
    pub labels: Vec<f64>,
}

/// Greedy nearest-centroid matching: instances in index order each take
/// the unassigned query whose coordinate is closest to the instance
/// centroid (squared Euclidean, ties by lowest query index).
pub fn assign(query_coords: &Mat, gt_instances: &[Vec<bool>], scene: &Scene) -> Result<Assignment> {
    let m = query_coords.rows;
    if gt_instances.len() > m {
        return Err(LossError::TooManyInstances {
            instances: gt_instances.len(),
            queries: m,
        });
    }
    let mut taken = vec![false; m];
    let mut pairs = Vec::with_capacity(gt_instances.len());
    for (i, mask) in gt_instances.iter().enumerate() {
        if mask.len() != scene.num_points() {
            return Err(LossError::Shape(format!(
                "gt instance {i} has {} entries, scene has {} points",
                mask.len(),
                scene.num_points()
            )));
        }
        let mut centroid = [0.0f64; 3];
        let mut count = 0usize;
        for (p, &inside) in mask.iter().enumerate() {
            if inside {
                for (c, acc) in centroid.iter_mut().enumerate() {
                    *acc += scene.points.get(p, c);
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(LossError::EmptyInstance { index: i });
        }
        for acc in &mut centroid {
            *acc /= count as f64;
        }
        let mut best: Option<(f64, usize)> = None;
        for q in 0..m {
            if taken[q] {
                continue;
            }
            let row = query_coords.row(q);
            let d2: f64 = row
                .iter()
                .zip(&centroid)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if best.map_or(true, |(bd, _)| d2 < bd) {
                best = Some((d2, q));
            }
        }
        let (_, q) = best.expect("instances <= queries leaves a free query");
        taken[q] = true;
        pairs.push((i, q));
    }
    let mut labels = vec![0.0; m];
    for &(_, q) in &pairs {
        labels[q] = 1.0;
    }
    Ok(Assignment { pairs, labels })
}

/// Point-level gt mask to superpoint resolution: a superpoint counts as
/// target when a strict majority of its member points are inside.
pub fn pool_gt_to_superpoints(mask: &[bool], sp: &Superpointization) -> Vec<f64> {
    sp.sp_point_lists
        .iter()
        .map(|members| {
            let inside = members.iter().filter(|&&p| mask[p]).count();
            if 2 * inside > members.len() {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

// ── individual terms ────────────────────────────────────────────────

/// Mean binary cross-entropy on logits (stable log-sum-exp form).
pub fn bce_mask(logits: &Tensor, target: &[f64]) -> Result<Tensor> {
    Ok(logits.bce_with_logits_mean(target)?)
}

/// 1 - (2 sum(sigmoid(x) y) + eps) / (sum(sigmoid(x)) + sum(y) + eps),
/// smoothing eps = 1.
pub fn dice_mask(logits: &Tensor, target: &[f64]) -> Result<Tensor> {
    if logits.numel() != target.len() {
        return Err(LossError::Shape(format!(
            "dice_mask: {} logits vs {} targets",
            logits.numel(),
            target.len()
        )));
    }
    let eps = 1.0;
    let y = logits.tape().constant(target.to_vec(), logits.shape().to_vec())?;
    let s = logits.sigmoid()?;
    let num = s.mul(&y)?.sum_all()?.mul_scalar(2.0)?.add_scalar(eps)?;
    let y_total: f64 = target.iter().sum();
    let den = s.sum_all()?.add_scalar(y_total + eps)?;
    Ok(num.div(&den)?.mul_scalar(-1.0)?.add_scalar(1.0)?)
}

/// Mean over assigned pairs of BCE + Dice between the query's mask-logit
/// row and the superpoint-pooled gt mask. No pairs gives a constant zero.
pub fn base_loss(
    mask_logits: &Tensor,
    assignment: &Assignment,
    gt_sp: &[Vec<f64>],
) -> Result<Tensor> {
    if assignment.pairs.is_empty() {
        return Ok(mask_logits.tape().constant(vec![0.0], vec![1])?);
    }
    let n_s = mask_logits.shape()[1];
    let mut total: Option<Tensor> = None;
    for &(inst, q) in &assignment.pairs {
        let target = &gt_sp[inst];
        if target.len() != n_s {
            return Err(LossError::Shape(format!(
                "base_loss: gt instance {inst} pooled to {} superpoints, masks have {n_s}",
                target.len()
            )));
        }
        let row = mask_logits.slice_rows(q, q + 1)?.reshape(vec![n_s])?;
        let pair = bce_mask(&row, target)?.add(&dice_mask(&row, target)?)?;
        total = Some(match total {
            None => pair,
            Some(t) => t.add(&pair)?,
        });
    }
    Ok(total
        .unwrap()
        .mul_scalar(1.0 / assignment.pairs.len() as f64)?)
}

/// Mean BCE between per-query probability logits and assignment labels.
pub fn prob_loss(prob_logits: &Tensor, labels: &[f64]) -> Result<Tensor> {
    Ok(prob_logits.bce_with_logits_mean(labels)?)
}

/// Simplified InfoNCE: cosine similarities between every query and the
/// pooled text vector are scaled by 1/temperature; each positive pays
/// logsumexp(all) - its own similarity, averaged over positives. The other
/// queries act as in-batch negatives. No positives gives a constant zero.
pub fn contrastive_loss(
    queries: &Tensor,
    positives: &[usize],
    text_pooled: &Tensor,
    temperature: f64,
) -> Result<Tensor> {
    if positives.is_empty() {
        return Ok(queries.tape().constant(vec![0.0], vec![1])?);
    }
    let m = queries.shape()[0];
    let d = queries.shape()[1];
    if text_pooled.numel() != d {
        return Err(LossError::Shape(format!(
            "contrastive_loss: text vector has {} entries, queries have width {d}",
            text_pooled.numel()
        )));
    }
    let t_col = text_pooled.reshape(vec![d, 1])?;
    let dots = queries.matmul(&t_col)?;
    let qsq = queries.mul(queries)?.sum_axis(1)?.reshape(vec![m, 1])?;
    let tsq = text_pooled.mul(text_pooled)?.sum_all()?.reshape(vec![1, 1])?;
    // 1e-12 inside the root keeps zero vectors finite and the gradient bounded.
    let denom = qsq.matmul(&tsq)?.add_scalar(1e-12)?.sqrt()?;
    let sims = dots.div(&denom)?.mul_scalar(1.0 / temperature)?;
    let lse = sims.reshape(vec![m])?.logsumexp()?;
    let pos_mean = sims.gather_rows(positives)?.mean_all()?;
    Ok(lse.sub(&pos_mean)?)
}

// ── total ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub l_mask: f64,
    pub l_prob: f64,
    pub l_con: f64,
    pub total: f64,
    pub assignment: Assignment,
}

/// Weighted sum of the three terms. With deep supervision each term is
/// averaged over all layer outputs (init head included); otherwise only
/// the final layer is supervised.
pub fn total_loss(
    out: &ForwardOutput,
    assignment: &Assignment,
    gt_sp: &[Vec<f64>],
    cfg: &ModelConfig,
) -> Result<(Tensor, LossReport)> {
    let selected: Vec<usize> = if cfg.deep_supervision {
        (0..out.layers.len()).collect()
    } else {
        vec![out.layers.len() - 1]
    };
    let n_t = out.t.shape()[0];
    let text_pooled = out.t.sum_axis(0)?.mul_scalar(1.0 / n_t as f64)?;
    let positives: Vec<usize> = assignment.pairs.iter().map(|&(_, q)| q).collect();

    let mut l_mask: Option<Tensor> = None;
    let mut l_prob: Option<Tensor> = None;
    let mut l_con: Option<Tensor> = None;
    let push = |slot: &mut Option<Tensor>, term: Tensor| -> Result<()> {
        *slot = Some(match slot.take() {
            None => term,
            Some(t) => t.add(&term)?,
        });
        Ok(())
    };
    for &l in &selected {
        let layer = &out.layers[l];
        push(&mut l_mask, base_loss(&layer.mask_logits, assignment, gt_sp)?)?;
        push(&mut l_prob, prob_loss(&layer.prob_logits, &assignment.labels)?)?;
        push(
            &mut l_con,
            contrastive_loss(&layer.embeddings, &positives, &text_pooled, cfg.temperature)?,
        )?;
    }
    let scale = 1.0 / selected.len() as f64;
    let l_mask = l_mask.unwrap().mul_scalar(scale)?;
    let l_prob = l_prob.unwrap().mul_scalar(scale)?;
    let l_con = l_con.unwrap().mul_scalar(scale)?;

    let total = l_mask
        .mul_scalar(cfg.lambda_mask)?
        .add(&l_prob.mul_scalar(cfg.lambda_prob)?)?
        .add(&l_con.mul_scalar(cfg.lambda_con)?)?;
    let report = LossReport {
        l_mask: l_mask.value(),
        l_prob: l_prob.value(),
        l_con: l_con.value(),
        total: total.value(),
        assignment: assignment.clone(),
    };
    Ok((total, report))
}
