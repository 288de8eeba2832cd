//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The tape is a growing arena of nodes; every operation appends one node
//! holding its output values and enough bookkeeping to replay the chain rule
//! in reverse. Tensors are cheap handles (tape pointer + node index) and are
//! immutable after construction; only grad buffers mutate, during
//! [`Tensor::backward`].
//!
//! Forward operations validate their outputs: a NaN (or an infinity outside
//! the deliberate `masked_fill` path) is reported as an error, never
//! propagated silently. Everything is double precision; the tape is
//! single-threaded by design.

pub mod gradcheck;
pub mod io;

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    DataLength {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    InvalidRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of bounds ({bound})")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: produced a non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("softmax: lane {lane} is entirely -inf")]
    DegenerateSoftmaxLane { lane: usize },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward: graph contains NaN at node {node}")]
    NanInGraph { node: usize },
    #[error("backward: already ran on this tape; call zero_grad first")]
    BackwardAlreadyRan,
    #[error("{op}: operands live on different tapes")]
    TapeMismatch { op: &'static str },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

// ── Tape internals ──────────────────────────────────────────────────

enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, c: f64 },
    Matmul { a: usize, b: usize, p: usize, q: usize, r: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    AddBias { a: usize, bias: usize, cols: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Sqrt { a: usize },
    Softmax { a: usize, axis: usize },
    MaskedFill { a: usize, keep: Rc<Vec<bool>> },
    SumAll { a: usize },
    MeanAll { a: usize },
    SumAxis { a: usize, axis: usize, rows: usize, cols: usize },
    RowScale { a: usize, w: usize, cols: usize },
    ConcatRows { a: usize, b: usize, rows_a: usize, cols: usize },
    SliceRows { a: usize, start: usize, cols: usize },
    GatherRows { a: usize, idx: Rc<Vec<usize>>, cols: usize },
    Reshape { a: usize },
    BceWithLogitsMean { a: usize, targets: Rc<Vec<f64>> },
    LogSumExp { a: usize },
    CustomUnary { a: usize, df: Rc<dyn Fn(f64) -> f64> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

struct TapeInner {
    nodes: Vec<Node>,
    backward_ran: bool,
}

/// Recording tape; owns every node created through it.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                backward_ran: false,
            })),
        }
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        Tensor {
            tape: self.clone(),
            id,
        }
    }

    /// New leaf tensor. Leaf values are taken as-is; downstream operations
    /// validate their own outputs.
    pub fn leaf(&self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(TensorError::DataLength {
                op: "leaf",
                len: data.len(),
                shape,
            });
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    /// Constant (non-differentiable) leaf.
    pub fn constant(&self, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn constant_mat(&self, m: &crate::dense::Mat) -> Result<Tensor> {
        self.constant(m.data.clone(), vec![m.rows, m.cols])
    }

    /// Clears all gradient buffers and re-arms backward.
    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.backward_ran = false;
        for node in &mut inner.nodes {
            node.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ── Tensor handle ───────────────────────────────────────────────────

/// Handle to one node on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op, index: i });
        }
    }
    Ok(())
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    /// Value of a one-element tensor.
    pub fn value(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        debug_assert_eq!(node.data.len(), 1, "value() on non-scalar");
        node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Gradient buffer populated by `backward`, if any reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn same_tape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch { op })
        }
    }

    fn with_node<R>(&self, f: impl FnOnce(&Node) -> R) -> R {
        let inner = self.tape.inner.borrow();
        f(&inner.nodes[self.id])
    }

    fn binary_same_shape(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Tensor> {
        self.same_tape(other, op)?;
        let (shape, data, rg) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            if a.shape != b.shape {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let data: Vec<f64> = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| f(x, y))
                .collect();
            (a.shape.clone(), data, a.requires_grad || b.requires_grad)
        };
        check_finite(op, &data)?;
        Ok(self.tape.push(shape, data, rg, make(self.id, other.id)))
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        make: impl FnOnce(usize) -> Op,
    ) -> Result<Tensor> {
        let (shape, data, rg) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let data: Vec<f64> = a.data.iter().map(|&x| f(x)).collect();
            (a.shape.clone(), data, a.requires_grad)
        };
        check_finite(op, &data)?;
        Ok(self.tape.push(shape, data, rg, make(self.id)))
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "div", |x, y| x / y, |a, b| Op::Div { a, b })
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary("add_scalar", |x| x + c, |a| Op::AddScalar { a })
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary("mul_scalar", |x| x * c, |a| Op::MulScalar { a, c })
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary("relu", |x| if x > 0.0 { x } else { 0.0 }, |a| Op::Relu { a })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary("sigmoid", stable_sigmoid, |a| Op::Sigmoid { a })
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary("sqrt", f64::sqrt, |a| Op::Sqrt { a })
    }

    /// Elementwise op with a caller-supplied derivative rule. The escape
    /// hatch for ops the tape does not know; also what the gradient-check
    /// negative-control tests corrupt on purpose.
    pub fn custom_unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let df: Rc<dyn Fn(f64) -> f64> = Rc::new(df);
        self.unary("custom_unary", f, move |a| Op::CustomUnary { a, df })
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other, "matmul")?;
        let (p, q, r, data, rg) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            if a.shape.len() != 2 {
                return Err(TensorError::InvalidRank {
                    op: "matmul",
                    expected: 2,
                    shape: a.shape.clone(),
                });
            }
            if b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (p, q, r) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; p * r];
            for i in 0..p {
                for k in 0..q {
                    let aik = a.data[i * q + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &b.data[k * r..(k + 1) * r];
                    let orow = &mut out[i * r..(i + 1) * r];
                    for j in 0..r {
                        orow[j] += aik * brow[j];
                    }
                }
            }
            (p, q, r, out, a.requires_grad || b.requires_grad)
        };
        check_finite("matmul", &data)?;
        Ok(self.tape.push(
            vec![p, r],
            data,
            rg,
            Op::Matmul { a: self.id, b: other.id, p, q, r },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (rows, cols, data, rg) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            if a.shape.len() != 2 {
                return Err(TensorError::InvalidRank {
                    op: "transpose",
                    expected: 2,
                    shape: a.shape.clone(),
                });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    out[j * rows + i] = a.data[i * cols + j];
                }
            }
            (rows, cols, out, a.requires_grad)
        };
        Ok(self.tape.push(
            vec![cols, rows],
            data,
            rg,
            Op::Transpose { a: self.id, rows, cols },
        ))
    }

    /// Adds a length-`b` bias vector to every row of an `n x b` matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        self.same_tape(bias, "add_bias")?;
        let (shape, data, rg, cols) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[bias.id];
            if a.shape.len() != 2 || b.shape.len() != 1 || b.shape[0] != a.shape[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "add_bias",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let cols = a.shape[1];
            let data: Vec<f64> = a
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| v + b.data[i % cols])
                .collect();
            (a.shape.clone(), data, a.requires_grad || b.requires_grad, cols)
        };
        check_finite("add_bias", &data)?;
        Ok(self.tape.push(
            shape,
            data,
            rg,
            Op::AddBias { a: self.id, bias: bias.id, cols },
        ))
    }

    /// `x W (+ bias)`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }

    // ── softmax and masking ─────────────────────────────────────────

    /// Numerically stabilized softmax along `axis`. Entries equal to -inf
    /// are treated as masked and map to exactly 0. A lane with no finite
    /// entry is an error.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (shape, data, rg) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let rank = a.shape.len();
            if rank == 0 || rank > 2 {
                return Err(TensorError::InvalidRank {
                    op: "softmax",
                    expected: 2,
                    shape: a.shape.clone(),
                });
            }
            if axis >= rank {
                return Err(TensorError::InvalidAxis {
                    op: "softmax",
                    axis,
                    shape: a.shape.clone(),
                });
            }
            let mut out = vec![0.0; a.data.len()];
            for (lane, (start, stride, len)) in lanes(&a.shape, axis).enumerate() {
                softmax_lane(&a.data, &mut out, start, stride, len)
                    .map_err(|_| TensorError::DegenerateSoftmaxLane { lane })?;
            }
            (a.shape.clone(), out, a.requires_grad)
        };
        check_finite("softmax", &data)?;
        Ok(self.tape.push(shape, data, rg, Op::Softmax { a: self.id, axis }))
    }

    /// Keeps entries where `keep` is true, replaces the rest with `value`
    /// (typically -inf ahead of a softmax). `keep` is flat, row-major.
    pub fn masked_fill(&self, keep: &[bool], value: f64) -> Result<Tensor> {
        let (shape, data, rg) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            if keep.len() != a.data.len() {
                return Err(TensorError::DataLength {
                    op: "masked_fill",
                    len: keep.len(),
                    shape: a.shape.clone(),
                });
            }
            let data: Vec<f64> = a
                .data
                .iter()
                .zip(keep)
                .map(|(&v, &k)| if k { v } else { value })
                .collect();
            (a.shape.clone(), data, a.requires_grad)
        };
        // -inf is legitimate here; NaN is not.
        for (i, v) in data.iter().enumerate() {
            if v.is_nan() {
                return Err(TensorError::NonFinite { op: "masked_fill", index: i });
            }
        }
        let keep = Rc::new(keep.to_vec());
        Ok(self
            .tape
            .push(shape, data, rg, Op::MaskedFill { a: self.id, keep }))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&self) -> Result<Tensor> {
        let (data, rg) = self.with_node(|a| (vec![a.data.iter().sum()], a.requires_grad));
        check_finite("sum_all", &data)?;
        Ok(self.tape.push(vec![1], data, rg, Op::SumAll { a: self.id }))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let (data, rg) = self.with_node(|a| {
            let n = a.data.len().max(1) as f64;
            (vec![a.data.iter().sum::<f64>() / n], a.requires_grad)
        });
        check_finite("mean_all", &data)?;
        Ok(self.tape.push(vec![1], data, rg, Op::MeanAll { a: self.id }))
    }

    /// Sum of a 2D tensor along `axis` (0 = column sums, 1 = row sums).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (rows, cols, data, rg) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            if a.shape.len() != 2 {
                return Err(TensorError::InvalidRank {
                    op: "sum_axis",
                    expected: 2,
                    shape: a.shape.clone(),
                });
            }
            if axis > 1 {
                return Err(TensorError::InvalidAxis {
                    op: "sum_axis",
                    axis,
                    shape: a.shape.clone(),
                });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let data = if axis == 0 {
                let mut out = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        out[j] += a.data[i * cols + j];
                    }
                }
                out
            } else {
                (0..rows)
                    .map(|i| a.data[i * cols..(i + 1) * cols].iter().sum())
                    .collect()
            };
            (rows, cols, data, a.requires_grad)
        };
        check_finite("sum_axis", &data)?;
        let len = data.len();
        Ok(self.tape.push(
            vec![len],
            data,
            rg,
            Op::SumAxis { a: self.id, axis, rows, cols },
        ))
    }

    /// Stable log(sum(exp(x))) of a rank-1 tensor.
    pub fn logsumexp(&self) -> Result<Tensor> {
        let (data, rg) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            if a.shape.len() != 1 {
                return Err(TensorError::InvalidRank {
                    op: "logsumexp",
                    expected: 1,
                    shape: a.shape.clone(),
                });
            }
            if a.data.is_empty() {
                return Err(TensorError::Empty { op: "logsumexp" });
            }
            let m = a.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = a.data.iter().map(|&x| (x - m).exp()).sum();
            (vec![m + s.ln()], a.requires_grad)
        };
        check_finite("logsumexp", &data)?;
        Ok(self
            .tape
            .push(vec![1], data, rg, Op::LogSumExp { a: self.id }))
    }

    // ── row structure ───────────────────────────────────────────────

    /// Scales row `i` of an `n x d` matrix by `w[i]`. Gradient flows to
    /// both the matrix and the weights.
    pub fn row_scale(&self, w: &Tensor) -> Result<Tensor> {
        self.same_tape(w, "row_scale")?;
        let (shape, data, rg, cols) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let wn = &inner.nodes[w.id];
            if a.shape.len() != 2 || wn.shape.len() != 1 || wn.shape[0] != a.shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "row_scale",
                    lhs: a.shape.clone(),
                    rhs: wn.shape.clone(),
                });
            }
            let cols = a.shape[1];
            let data: Vec<f64> = a
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| v * wn.data[i / cols])
                .collect();
            (a.shape.clone(), data, a.requires_grad || wn.requires_grad, cols)
        };
        check_finite("row_scale", &data)?;
        Ok(self.tape.push(
            shape,
            data,
            rg,
            Op::RowScale { a: self.id, w: w.id, cols },
        ))
    }

    /// Stacks `self` on top of `other` (both 2D with equal column count).
    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other, "concat_rows")?;
        let (rows_a, cols, data, rg) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let mut data = a.data.clone();
            data.extend_from_slice(&b.data);
            (a.shape[0], a.shape[1], data, a.requires_grad || b.requires_grad)
        };
        let rows = data.len() / cols.max(1);
        Ok(self.tape.push(
            vec![rows, cols],
            data,
            rg,
            Op::ConcatRows { a: self.id, b: other.id, rows_a, cols },
        ))
    }

    /// Rows `start..end` of a 2D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (cols, data, rg) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            if a.shape.len() != 2 {
                return Err(TensorError::InvalidRank {
                    op: "slice_rows",
                    expected: 2,
                    shape: a.shape.clone(),
                });
            }
            if start >= end || end > a.shape[0] {
                return Err(TensorError::IndexOutOfBounds {
                    op: "slice_rows",
                    index: end,
                    bound: a.shape[0],
                });
            }
            let cols = a.shape[1];
            (cols, a.data[start * cols..end * cols].to_vec(), a.requires_grad)
        };
        Ok(self.tape.push(
            vec![end - start, cols],
            data,
            rg,
            Op::SliceRows { a: self.id, start, cols },
        ))
    }

    /// Selects rows of a 2D tensor by index (duplicates allowed). The
    /// backward pass scatter-adds into the source rows.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        if idx.is_empty() {
            return Err(TensorError::Empty { op: "gather_rows" });
        }
        let (cols, data, rg) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            if a.shape.len() != 2 {
                return Err(TensorError::InvalidRank {
                    op: "gather_rows",
                    expected: 2,
                    shape: a.shape.clone(),
                });
            }
            let cols = a.shape[1];
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                if i >= a.shape[0] {
                    return Err(TensorError::IndexOutOfBounds {
                        op: "gather_rows",
                        index: i,
                        bound: a.shape[0],
                    });
                }
                data.extend_from_slice(&a.data[i * cols..(i + 1) * cols]);
            }
            (cols, data, a.requires_grad)
        };
        let idx = Rc::new(idx.to_vec());
        let rows = idx.len();
        Ok(self.tape.push(
            vec![rows, cols],
            data,
            rg,
            Op::GatherRows { a: self.id, idx, cols },
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let (data, rg) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let n: usize = shape.iter().product();
            if n != a.data.len() {
                return Err(TensorError::DataLength {
                    op: "reshape",
                    len: a.data.len(),
                    shape,
                });
            }
            (a.data.clone(), a.requires_grad)
        };
        Ok(self.tape.push(shape, data, rg, Op::Reshape { a: self.id }))
    }

    // ── losses ──────────────────────────────────────────────────────

    /// Mean binary cross-entropy with logits against constant targets,
    /// in the overflow-safe max(x,0) - x*y + ln(1 + exp(-|x|)) form.
    pub fn bce_with_logits_mean(&self, targets: &[f64]) -> Result<Tensor> {
        let (data, rg) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            if targets.len() != a.data.len() {
                return Err(TensorError::DataLength {
                    op: "bce_with_logits_mean",
                    len: targets.len(),
                    shape: a.shape.clone(),
                });
            }
            if a.data.is_empty() {
                return Err(TensorError::Empty { op: "bce_with_logits_mean" });
            }
            let sum: f64 = a
                .data
                .iter()
                .zip(targets)
                .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
                .sum();
            (vec![sum / a.data.len() as f64], a.requires_grad)
        };
        check_finite("bce_with_logits_mean", &data)?;
        let targets = Rc::new(targets.to_vec());
        Ok(self.tape.push(
            vec![1],
            data,
            rg,
            Op::BceWithLogitsMean { a: self.id, targets },
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss; fills grad buffers of every
    /// node that requires grad and contributed to the loss. Running twice
    /// without [`Tape::zero_grad`] is an error.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.inner.borrow_mut();
        if inner.backward_ran {
            return Err(TensorError::BackwardAlreadyRan);
        }
        {
            let loss = &inner.nodes[self.id];
            if loss.data.len() != 1 {
                return Err(TensorError::NonScalarLoss {
                    shape: loss.shape.clone(),
                });
            }
        }
        for (i, node) in inner.nodes.iter().enumerate() {
            if node.data.iter().any(|v| v.is_nan()) {
                return Err(TensorError::NanInGraph { node: i });
            }
        }
        inner.backward_ran = true;
        inner.nodes[self.id].grad = Some(vec![1.0]);
        backward_sweep(&mut inner.nodes, self.id);
        Ok(())
    }
}

// ── softmax helpers ─────────────────────────────────────────────────

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Iterates the (start, stride, len) triples of every lane along `axis`.
fn lanes(shape: &[usize], axis: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let (count, starts_stride, stride, len) = match shape.len() {
        1 => (1, 0, 1, shape[0]),
        2 => {
            let (rows, cols) = (shape[0], shape[1]);
            if axis == 1 {
                (rows, cols, 1, cols)
            } else {
                (cols, 1, cols, rows)
            }
        }
        _ => unreachable!("softmax rank checked by caller"),
    };
    (0..count).map(move |lane| (lane * starts_stride, stride, len))
}

fn softmax_lane(
    input: &[f64],
    out: &mut [f64],
    start: usize,
    stride: usize,
    len: usize,
) -> std::result::Result<(), ()> {
    let mut max = f64::NEG_INFINITY;
    for i in 0..len {
        let v = input[start + i * stride];
        if v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return Err(()); // entire lane masked
    }
    let mut sum = 0.0;
    for i in 0..len {
        let e = (input[start + i * stride] - max).exp();
        out[start + i * stride] = e;
        sum += e;
    }
    for i in 0..len {
        out[start + i * stride] /= sum;
    }
    Ok(())
}

// ── backward sweep ──────────────────────────────────────────────────

fn grad_buf(nodes: &mut [Node], id: usize) -> &mut Vec<f64> {
    if nodes[id].grad.is_none() {
        let n = nodes[id].data.len();
        nodes[id].grad = Some(vec![0.0; n]);
    }
    nodes[id].grad.as_mut().unwrap()
}

fn backward_sweep(nodes: &mut Vec<Node>, root: usize) {
    for id in (0..=root).rev() {
        let Some(g) = nodes[id].grad.clone() else {
            continue;
        };
        if !nodes[id].requires_grad {
            continue;
        }
        // Per-op accumulation into input grads.
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                accumulate(nodes, a, |ga| {
                    for (gi, &gv) in ga.iter_mut().zip(&g) {
                        *gi += gv;
                    }
                });
                accumulate(nodes, b, |gb| {
                    for (gi, &gv) in gb.iter_mut().zip(&g) {
                        *gi += gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                accumulate(nodes, a, |ga| {
                    for (gi, &gv) in ga.iter_mut().zip(&g) {
                        *gi += gv;
                    }
                });
                accumulate(nodes, b, |gb| {
                    for (gi, &gv) in gb.iter_mut().zip(&g) {
                        *gi -= gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let bd = nodes[b].data.clone();
                let ad = nodes[a].data.clone();
                accumulate(nodes, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                accumulate(nodes, b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Div { a, b } => {
                let (a, b) = (*a, *b);
                let bd = nodes[b].data.clone();
                let ad = nodes[a].data.clone();
                accumulate(nodes, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / bd[i];
                    }
                });
                accumulate(nodes, b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
                    }
                });
            }
            Op::AddScalar { a } => {
                let a = *a;
                accumulate(nodes, a, |ga| {
                    for (gi, &gv) in ga.iter_mut().zip(&g) {
                        *gi += gv;
                    }
                });
            }
            Op::MulScalar { a, c } => {
                let (a, c) = (*a, *c);
                accumulate(nodes, a, |ga| {
                    for (gi, &gv) in ga.iter_mut().zip(&g) {
                        *gi += gv * c;
                    }
                });
            }
            Op::Matmul { a, b, p, q, r } => {
                let (a, b, p, q, r) = (*a, *b, *p, *q, *r);
                let ad = nodes[a].data.clone();
                let bd = nodes[b].data.clone();
                // dA = dC . B^T
                accumulate(nodes, a, |ga| {
                    for i in 0..p {
                        for k in 0..q {
                            let mut s = 0.0;
                            for j in 0..r {
                                s += g[i * r + j] * bd[k * r + j];
                            }
                            ga[i * q + k] += s;
                        }
                    }
                });
                // dB = A^T . dC
                accumulate(nodes, b, |gb| {
                    for k in 0..q {
                        for j in 0..r {
                            let mut s = 0.0;
                            for i in 0..p {
                                s += ad[i * q + k] * g[i * r + j];
                            }
                            gb[k * r + j] += s;
                        }
                    }
                });
            }
            Op::Transpose { a, rows, cols } => {
                let (a, rows, cols) = (*a, *rows, *cols);
                accumulate(nodes, a, |ga| {
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[i * cols + j] += g[j * rows + i];
                        }
                    }
                });
            }
            Op::AddBias { a, bias, cols } => {
                let (a, bias, cols) = (*a, *bias, *cols);
                accumulate(nodes, a, |ga| {
                    for (gi, &gv) in ga.iter_mut().zip(&g) {
                        *gi += gv;
                    }
                });
                accumulate(nodes, bias, |gb| {
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % cols] += gv;
                    }
                });
            }
            Op::Relu { a } => {
                let a = *a;
                let ad = nodes[a].data.clone();
                accumulate(nodes, a, |ga| {
                    for i in 0..ga.len() {
                        if ad[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid { a } => {
                let a = *a;
                let out = nodes[id].data.clone();
                accumulate(nodes, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::Sqrt { a } => {
                let a = *a;
                let out = nodes[id].data.clone();
                accumulate(nodes, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / (2.0 * out[i]);
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let (a, axis) = (*a, *axis);
                let out = nodes[id].data.clone();
                let shape = nodes[id].shape.clone();
                accumulate(nodes, a, |ga| {
                    for (start, stride, len) in lanes(&shape, axis) {
                        let mut dot = 0.0;
                        for i in 0..len {
                            let idx = start + i * stride;
                            dot += g[idx] * out[idx];
                        }
                        for i in 0..len {
                            let idx = start + i * stride;
                            ga[idx] += out[idx] * (g[idx] - dot);
                        }
                    }
                });
            }
            Op::MaskedFill { a, keep } => {
                let a = *a;
                let keep = Rc::clone(keep);
                accumulate(nodes, a, |ga| {
                    for i in 0..ga.len() {
                        if keep[i] {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                let a = *a;
                accumulate(nodes, a, |ga| {
                    for gi in ga.iter_mut() {
                        *gi += g[0];
                    }
                });
            }
            Op::MeanAll { a } => {
                let a = *a;
                let n = nodes[a].data.len().max(1) as f64;
                accumulate(nodes, a, |ga| {
                    for gi in ga.iter_mut() {
                        *gi += g[0] / n;
                    }
                });
            }
            Op::SumAxis { a, axis, rows, cols } => {
                let (a, axis, rows, cols) = (*a, *axis, *rows, *cols);
                accumulate(nodes, a, |ga| {
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[i * cols + j] += if axis == 0 { g[j] } else { g[i] };
                        }
                    }
                });
            }
            Op::RowScale { a, w, cols } => {
                let (a, w, cols) = (*a, *w, *cols);
                let ad = nodes[a].data.clone();
                let wd = nodes[w].data.clone();
                accumulate(nodes, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * wd[i / cols];
                    }
                });
                accumulate(nodes, w, |gw| {
                    for i in 0..ad.len() {
                        gw[i / cols] += g[i] * ad[i];
                    }
                });
            }
            Op::ConcatRows { a, b, rows_a, cols } => {
                let (a, b, rows_a, cols) = (*a, *b, *rows_a, *cols);
                let split = rows_a * cols;
                accumulate(nodes, a, |ga| {
                    for i in 0..split {
                        ga[i] += g[i];
                    }
                });
                accumulate(nodes, b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[split + i];
                    }
                });
            }
            Op::SliceRows { a, start, cols } => {
                let (a, start, cols) = (*a, *start, *cols);
                accumulate(nodes, a, |ga| {
                    for (i, &gv) in g.iter().enumerate() {
                        ga[start * cols + i] += gv;
                    }
                });
            }
            Op::GatherRows { a, idx, cols } => {
                let (a, cols) = (*a, *cols);
                let idx = Rc::clone(idx);
                accumulate(nodes, a, |ga| {
                    for (row, &src) in idx.iter().enumerate() {
                        for j in 0..cols {
                            ga[src * cols + j] += g[row * cols + j];
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                let a = *a;
                accumulate(nodes, a, |ga| {
                    for (gi, &gv) in ga.iter_mut().zip(&g) {
                        *gi += gv;
                    }
                });
            }
            Op::BceWithLogitsMean { a, targets } => {
                let a = *a;
                let targets = Rc::clone(targets);
                let ad = nodes[a].data.clone();
                let n = ad.len() as f64;
                accumulate(nodes, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[0] * (stable_sigmoid(ad[i]) - targets[i]) / n;
                    }
                });
            }
            Op::LogSumExp { a } => {
                let a = *a;
                let ad = nodes[a].data.clone();
                let out = nodes[id].data[0];
                accumulate(nodes, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[0] * (ad[i] - out).exp();
                    }
                });
            }
            Op::CustomUnary { a, df } => {
                let a = *a;
                let df = Rc::clone(df);
                let ad = nodes[a].data.clone();
                accumulate(nodes, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * df(ad[i]);
                    }
                });
            }
        }
    }
}

/// Runs `f` on the grad buffer of `id` if that node participates in
/// differentiation.
fn accumulate(nodes: &mut [Node], id: usize, f: impl FnOnce(&mut Vec<f64>)) {
    if nodes[id].requires_grad {
        f(grad_buf(nodes, id));
    }
}

#[cfg(test)]
mod tests;
