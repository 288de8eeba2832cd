//! Attention primitives.
//!
//! Single-head scaled dot-product attention in three flavors: masked
//! self-attention, cross-attention (which also exposes its post-softmax
//! weight matrix), and spatial-aware attention, i.e. self-attention masked
//! to each point's k nearest neighbors.
//!
//! Projections are bias-free; no layer normalization on the reference path.
//! Masked logits are -inf, so masked weights are exactly zero and outputs
//! are bitwise independent of masked-out key rows.

use thiserror::Error;

use crate::dense::{BoolMat, Mat};
use crate::geometry::{knn_mask, GeometryError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("mask row {row} has no true entries")]
    EmptyMaskRow { row: usize },
    #[error("cross_attention: no key rows")]
    NoKeys,
    #[error("mask is {rows}x{cols} but input has {n} rows")]
    MaskShape { rows: usize, cols: usize, n: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, AttentionError>;

/// Query/key/value projection weights, each `d x d`.
#[derive(Clone, Copy)]
pub struct AttentionParams<'a> {
    pub w_q: &'a Tensor,
    pub w_k: &'a Tensor,
    pub w_v: &'a Tensor,
}

/// Result of one attention application.
pub struct AttentionOutput {
    /// Residual-applied embeddings: `query_input + attended`.
    pub values: Tensor,
    /// `weights . (kv W_V)`, without the residual. The decoder sums several
    /// of these around a single shared residual stream.
    pub attended: Tensor,
    /// Post-softmax attention matrix, `n_q x n_k`.
    pub weights: Tensor,
}

/// Scaled dot-product core: softmax((q W_Q)(kv W_K)^T / sqrt(d)) . (kv W_V).
fn attention_core(
    q_in: &Tensor,
    kv_in: &Tensor,
    keep: Option<&[bool]>,
    params: AttentionParams<'_>,
) -> Result<(Tensor, Tensor)> {
    let shape = q_in.shape();
    let d = *shape.get(1).ok_or(TensorError::InvalidRank {
        op: "attention",
        expected: 2,
        shape: shape.clone(),
    })?;
    let q = q_in.matmul(params.w_q)?;
    let k = kv_in.matmul(params.w_k)?;
    let v = kv_in.matmul(params.w_v)?;
    let mut logits = q
        .matmul(&k.transpose()?)?
        .mul_scalar(1.0 / (d as f64).sqrt())?;
    if let Some(keep) = keep {
        logits = logits.masked_fill(keep, f64::NEG_INFINITY)?;
    }
    let weights = logits.softmax(1)?;
    let attended = weights.matmul(&v)?;
    Ok((attended, weights))
}

/// Self-attention over `x` with logits masked to -inf where `mask` is false.
/// Every row must keep at least one key. `values` carries the residual.
pub fn masked_self_attention(
    x: &Tensor,
    mask: &BoolMat,
    params: AttentionParams<'_>,
) -> Result<AttentionOutput> {
    let xs = x.shape();
    if xs.len() != 2 {
        return Err(TensorError::InvalidRank {
            op: "masked_self_attention",
            expected: 2,
            shape: xs,
        }
        .into());
    }
    let n = xs[0];
    if mask.rows != n || mask.cols != n {
        return Err(AttentionError::MaskShape {
            rows: mask.rows,
            cols: mask.cols,
            n,
        });
    }
    for row in 0..n {
        if mask.row_count(row) == 0 {
            return Err(AttentionError::EmptyMaskRow { row });
        }
    }
    let (attended, weights) = attention_core(x, x, Some(&mask.data), params)?;
    Ok(AttentionOutput {
        values: x.add(&attended)?,
        attended,
        weights,
    })
}

/// Cross-attention of `q` over `kv`; the weight matrix is `n_q x n_k`.
/// `values` carries the residual on `q`.
pub fn cross_attention(
    q: &Tensor,
    kv: &Tensor,
    params: AttentionParams<'_>,
) -> Result<AttentionOutput> {
    if kv.shape().first().copied().unwrap_or(0) == 0 {
        return Err(AttentionError::NoKeys);
    }
    let (attended, weights) = attention_core(q, kv, None, params)?;
    Ok(AttentionOutput {
        values: q.add(&attended)?,
        attended,
        weights,
    })
}

/// Self-attention restricted to each row's `k` nearest neighbors in space:
/// `knn_mask(coords, k)` composed with [`masked_self_attention`]. Returns
/// the residual-applied values.
pub fn spatial_aware_attention(
    x: &Tensor,
    coords: &Mat,
    k: usize,
    params: AttentionParams<'_>,
) -> Result<Tensor> {
    let mask = knn_mask(coords, k)?;
    Ok(masked_self_attention(x, &mask, params)?.values)
}
