//! Dense f64 tensors and a tape-style compute graph with reverse-mode
//! differentiation.
//!
//! The graph records every operation in insertion order; `backward` walks
//! the tape once in reverse and accumulates gradients into the leaves that
//! were registered with `grad_required`. Storage is row-major without
//! views, so every op produces a fresh buffer.

use std::collections::HashMap;

use thiserror::Error;

/// Additive mask value for attention scores. Large enough that `exp`
/// underflows to exactly zero in f64, small enough to stay finite.
pub const MASK_NEG: f64 = -1.0e9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044715;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {context} with shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("non-finite value at flat index {index} in {context}")]
    NonFinite { context: &'static str, index: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("finite-difference oracle error: {0}")]
    Oracle(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense tensor of 64-bit floats in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad_required: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(TensorError::InvalidShape {
                shape,
                reason: "rank must be between 1 and 3".into(),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("data length {} != shape product {expected}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            grad_required: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            grad_required: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.grad_required = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad_required(&self) -> bool {
        self.grad_required
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count / row width for rank-1 (single row) and rank-2 tensors.
    fn rows_cols(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[0], s[1] * s[2]),
        }
    }
}

/// Handle into a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        input: NodeId,
        inv_std: Vec<f64>,
    },
    SoftmaxLastDim(NodeId),
    Rope {
        input: NodeId,
        start_pos: usize,
        base: f64,
    },
    Rows {
        input: NodeId,
        start: usize,
        len: usize,
    },
    Cols {
        input: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    requires: bool,
}

/// Elementwise operation tags exposed as a single dispatch surface.
#[derive(Debug, Clone, Copy)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Gelu,
    LayerNorm { eps: f64 },
    SoftmaxLastDim,
}

/// Append-only compute graph. Confined to one thread of execution;
/// topological order is insertion order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf node; gradient tracking follows the tensor's flag.
    pub fn input(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.clone(), t.grad_required)
    }

    /// Registers a leaf that never receives gradient entries.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let mut t = t;
        t.grad_required = false;
        self.push(Op::Leaf, t, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    fn check_finite(&self, id: NodeId, context: &'static str) -> Result<()> {
        if let Some(index) = self.nodes[id.0]
            .value
            .data
            .iter()
            .position(|v| !v.is_finite())
        {
            return Err(TensorError::NonFinite { context, index });
        }
        Ok(())
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, inputs: &[NodeId]) -> Result<NodeId> {
        match op {
            ElementwiseOp::Add => {
                self.expect_arity(inputs, 2, "add")?;
                self.add(inputs[0], inputs[1])
            }
            ElementwiseOp::Mul => {
                self.expect_arity(inputs, 2, "mul")?;
                self.mul(inputs[0], inputs[1])
            }
            ElementwiseOp::Gelu => {
                self.expect_arity(inputs, 1, "gelu")?;
                self.gelu(inputs[0])
            }
            ElementwiseOp::LayerNorm { eps } => {
                self.expect_arity(inputs, 1, "layernorm")?;
                self.layer_norm(inputs[0], eps)
            }
            ElementwiseOp::SoftmaxLastDim => {
                self.expect_arity(inputs, 1, "softmax")?;
                self.softmax_lastdim(inputs[0])
            }
        }
    }

    fn expect_arity(&self, inputs: &[NodeId], n: usize, tag: &str) -> Result<()> {
        if inputs.len() != n {
            return Err(TensorError::Contract(format!(
                "{tag} expects {n} inputs, got {}",
                inputs.len()
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (&[m, k], &[k2, n]) = match (va.shape.as_slice(), vb.shape.as_slice()) {
            (l @ [_, _], r @ [_, _]) => (
                <&[usize; 2]>::try_from(l).unwrap(),
                <&[usize; 2]>::try_from(r).unwrap(),
            ),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    context: "matmul requires rank-2 operands",
                    lhs: va.shape.clone(),
                    rhs: vb.shape.clone(),
                })
            }
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                context: "matmul inner dimensions",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let out = matmul_raw(&va.data, &vb.data, m, k, n);
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(
            Op::MatMul(a, b),
            Tensor::new(vec![m, n], out)?,
            requires,
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let (r, c) = match va.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => {
                return Err(TensorError::InvalidShape {
                    shape: va.shape.clone(),
                    reason: "transpose requires rank 2".into(),
                })
            }
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va.data[i * c + j];
            }
        }
        let requires = self.requires(a);
        Ok(self.push(Op::Transpose(a), Tensor::new(vec![c, r], out)?, requires))
    }

    /// Elementwise sum. The right operand may be a rank-1 vector matching
    /// the row width of the left operand (broadcast over rows).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_finite(a, "add")?;
        self.check_finite(b, "add")?;
        let out = self.binary_broadcast(a, b, "add", |x, y| x + y)?;
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add(a, b), out, requires))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_finite(a, "sub")?;
        self.check_finite(b, "sub")?;
        let out = self.binary_broadcast(a, b, "sub", |x, y| x - y)?;
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Sub(a, b), out, requires))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_finite(a, "mul")?;
        self.check_finite(b, "mul")?;
        let out = self.binary_broadcast(a, b, "mul", |x, y| x * y)?;
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul(a, b), out, requires))
    }

    fn binary_broadcast(
        &self,
        a: NodeId,
        b: NodeId,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape == vb.shape {
            let data = va
                .data
                .iter()
                .zip(&vb.data)
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Tensor::new(va.shape.clone(), data);
        }
        let (rows, cols) = va.rows_cols();
        if vb.rank() == 1 && vb.len() == cols && rows >= 1 {
            let mut data = Vec::with_capacity(va.len());
            for i in 0..rows {
                for j in 0..cols {
                    data.push(f(va.data[i * cols + j], vb.data[j]));
                }
            }
            return Tensor::new(va.shape.clone(), data);
        }
        Err(TensorError::ShapeMismatch {
            context,
            lhs: va.shape.clone(),
            rhs: vb.shape.clone(),
        })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|&x| x * c).collect();
        let t = Tensor {
            shape: va.shape.clone(),
            data,
            grad_required: false,
        };
        let requires = self.requires(a);
        self.push(Op::Scale(a, c), t, requires)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_finite(a, "gelu")?;
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|&x| gelu(x)).collect();
        let t = Tensor {
            shape: va.shape.clone(),
            data,
            grad_required: false,
        };
        let requires = self.requires(a);
        Ok(self.push(Op::Gelu(a), t, requires))
    }

    /// Per-row standardization over the last dimension: mean 0, variance 1
    /// before any affine scale.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(TensorError::Contract(format!(
                "layernorm eps must be positive, got {eps}"
            )));
        }
        self.check_finite(a, "layernorm")?;
        let va = &self.nodes[a.0].value;
        let (rows, cols) = va.rows_cols();
        let mut data = vec![0.0; va.len()];
        let mut inv_std = vec![0.0; rows];
        for i in 0..rows {
            let row = &va.data[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..cols {
                data[i * cols + j] = (row[j] - mean) * s;
            }
        }
        let t = Tensor {
            shape: va.shape.clone(),
            data,
            grad_required: false,
        };
        let requires = self.requires(a);
        Ok(self.push(Op::LayerNorm { input: a, inv_std }, t, requires))
    }

    /// Softmax over the last dimension, row by row.
    pub fn softmax_lastdim(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_finite(a, "softmax")?;
        let va = &self.nodes[a.0].value;
        let (rows, cols) = va.rows_cols();
        let mut data = vec![0.0; va.len()];
        for i in 0..rows {
            let row = &va.data[i * cols..(i + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (row[j] - max).exp();
                data[i * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                data[i * cols + j] /= sum;
            }
        }
        let t = Tensor {
            shape: va.shape.clone(),
            data,
            grad_required: false,
        };
        let requires = self.requires(a);
        Ok(self.push(Op::SoftmaxLastDim(a), t, requires))
    }

    /// Rotary position transform on a `[n, d]` tensor with even `d`.
    /// Row `i` is rotated for absolute position `start_pos + i`; pair
    /// `(j, j + d/2)` turns by `pos * base^(-2j/d)`.
    pub fn rope(&mut self, a: NodeId, start_pos: usize, base: f64) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let (n, d) = match va.shape.as_slice() {
            [n, d] => (*n, *d),
            _ => {
                return Err(TensorError::InvalidShape {
                    shape: va.shape.clone(),
                    reason: "rope requires rank 2".into(),
                })
            }
        };
        if d % 2 != 0 {
            return Err(TensorError::InvalidShape {
                shape: va.shape.clone(),
                reason: "rope requires an even last dimension".into(),
            });
        }
        let half = d / 2;
        let mut data = vec![0.0; va.len()];
        for i in 0..n {
            let pos = (start_pos + i) as f64;
            for j in 0..half {
                let theta = pos * base.powf(-2.0 * j as f64 / d as f64);
                let (sin, cos) = theta.sin_cos();
                let x1 = va.data[i * d + j];
                let x2 = va.data[i * d + half + j];
                data[i * d + j] = x1 * cos - x2 * sin;
                data[i * d + half + j] = x1 * sin + x2 * cos;
            }
        }
        let t = Tensor {
            shape: va.shape.clone(),
            data,
            grad_required: false,
        };
        let requires = self.requires(a);
        Ok(self.push(
            Op::Rope {
                input: a,
                start_pos,
                base,
            },
            t,
            requires,
        ))
    }

    pub fn rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let (r, c) = match va.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => {
                return Err(TensorError::InvalidShape {
                    shape: va.shape.clone(),
                    reason: "row slice requires rank 2".into(),
                })
            }
        };
        if start + len > r || len == 0 {
            return Err(TensorError::Contract(format!(
                "row slice {start}..{} out of bounds for {r} rows",
                start + len
            )));
        }
        let data = va.data[start * c..(start + len) * c].to_vec();
        let requires = self.requires(a);
        Ok(self.push(
            Op::Rows {
                input: a,
                start,
                len,
            },
            Tensor::new(vec![len, c], data)?,
            requires,
        ))
    }

    pub fn cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let (r, c) = match va.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => {
                return Err(TensorError::InvalidShape {
                    shape: va.shape.clone(),
                    reason: "column slice requires rank 2".into(),
                })
            }
        };
        if start + len > c || len == 0 {
            return Err(TensorError::Contract(format!(
                "column slice {start}..{} out of bounds for {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&va.data[i * c + start..i * c + start + len]);
        }
        let requires = self.requires(a);
        Ok(self.push(
            Op::Cols {
                input: a,
                start,
                len,
            },
            Tensor::new(vec![r, len], data)?,
            requires,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_cols of zero parts".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows_cols().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.nodes[p.0].value.rows_cols();
            if r != rows || self.nodes[p.0].value.rank() != 2 {
                return Err(TensorError::ShapeMismatch {
                    context: "concat_cols row counts",
                    lhs: self.nodes[parts[0].0].value.shape.clone(),
                    rhs: self.nodes[p.0].value.shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = &self.nodes[p.0].value;
                data.extend_from_slice(&v.data[i * w..(i + 1) * w]);
            }
        }
        let requires = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::new(vec![rows, total], data)?,
            requires,
        ))
    }

    /// Row-major reinterpretation under a new shape of equal length.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let t = Tensor::new(shape, va.data.clone())?;
        let requires = self.requires(a);
        Ok(self.push(Op::Reshape(a), t, requires))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        let requires = self.requires(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), requires)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data.iter().sum::<f64>() / v.len() as f64;
        let requires = self.requires(a);
        self.push(Op::MeanAll(a), Tensor::scalar(s), requires)
    }

    /// Reverse pass from a scalar loss. Returns gradients for every leaf
    /// registered with `grad_required`; frozen leaves receive no entry.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].requires {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k) = (va.shape[0], va.shape[1]);
                    let n = vb.shape[1];
                    if self.requires(*a) {
                        // dA = G @ B^T
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * vb.data[p * n + j];
                                }
                                da[i * k + p] = s;
                            }
                        }
                        accumulate(&mut grads, a.0, &da);
                    }
                    if self.requires(*b) {
                        // dB = A^T @ G
                        let mut db = vec![0.0; k * n];
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += va.data[i * k + p] * g[i * n + j];
                                }
                                db[p * n + j] = s;
                            }
                        }
                        accumulate(&mut grads, b.0, &db);
                    }
                }
                Op::Transpose(a) => {
                    let va = &self.nodes[a.0].value;
                    let (r, c) = (va.shape[0], va.shape[1]);
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = g[j * r + i];
                        }
                    }
                    accumulate(&mut grads, a.0, &da);
                }
                Op::Add(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut grads, a.0, &g);
                    }
                    if self.requires(*b) {
                        let db = self.reduce_to_operand(&g, idx, *b);
                        accumulate(&mut grads, b.0, &db);
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut grads, a.0, &g);
                    }
                    if self.requires(*b) {
                        let neg: Vec<f64> = g.iter().map(|&x| -x).collect();
                        let db = self.reduce_to_operand(&neg, idx, *b);
                        accumulate(&mut grads, b.0, &db);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.requires(*a) {
                        let da: Vec<f64> = if va.shape == vb.shape {
                            g.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect()
                        } else {
                            let (rows, cols) = va.rows_cols();
                            let mut da = vec![0.0; va.len()];
                            for i in 0..rows {
                                for j in 0..cols {
                                    da[i * cols + j] = g[i * cols + j] * vb.data[j];
                                }
                            }
                            da
                        };
                        accumulate(&mut grads, a.0, &da);
                    }
                    if self.requires(*b) {
                        let scaled: Vec<f64> =
                            g.iter().zip(&va.data).map(|(&x, &y)| x * y).collect();
                        let db = self.reduce_to_operand(&scaled, idx, *b);
                        accumulate(&mut grads, b.0, &db);
                    }
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|&x| x * c).collect();
                    accumulate(&mut grads, a.0, &da);
                }
                Op::Gelu(a) => {
                    let va = &self.nodes[a.0].value;
                    let da: Vec<f64> = va
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| gv * gelu_grad(x))
                        .collect();
                    accumulate(&mut grads, a.0, &da);
                }
                Op::LayerNorm { input, inv_std } => {
                    let y = &self.nodes[idx].value;
                    let (rows, cols) = y.rows_cols();
                    let mut da = vec![0.0; y.len()];
                    for i in 0..rows {
                        let yr = &y.data[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let gmean = gr.iter().sum::<f64>() / cols as f64;
                        let gymean = gr
                            .iter()
                            .zip(yr)
                            .map(|(&gv, &yv)| gv * yv)
                            .sum::<f64>()
                            / cols as f64;
                        for j in 0..cols {
                            da[i * cols + j] = inv_std[i] * (gr[j] - gmean - yr[j] * gymean);
                        }
                    }
                    accumulate(&mut grads, input.0, &da);
                }
                Op::SoftmaxLastDim(a) => {
                    let p = &self.nodes[idx].value;
                    let (rows, cols) = p.rows_cols();
                    let mut da = vec![0.0; p.len()];
                    for i in 0..rows {
                        let pr = &p.data[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let dot = pr.iter().zip(gr).map(|(&pv, &gv)| pv * gv).sum::<f64>();
                        for j in 0..cols {
                            da[i * cols + j] = pr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, a.0, &da);
                }
                Op::Rope {
                    input,
                    start_pos,
                    base,
                } => {
                    let v = &self.nodes[idx].value;
                    let (n, d) = (v.shape[0], v.shape[1]);
                    let half = d / 2;
                    let mut da = vec![0.0; v.len()];
                    for i in 0..n {
                        let pos = (start_pos + i) as f64;
                        for j in 0..half {
                            let theta = pos * base.powf(-2.0 * j as f64 / d as f64);
                            let (sin, cos) = theta.sin_cos();
                            let g1 = g[i * d + j];
                            let g2 = g[i * d + half + j];
                            da[i * d + j] = g1 * cos + g2 * sin;
                            da[i * d + half + j] = -g1 * sin + g2 * cos;
                        }
                    }
                    accumulate(&mut grads, input.0, &da);
                }
                Op::Rows { input, start, len } => {
                    let v = &self.nodes[input.0].value;
                    let (_, c) = v.rows_cols();
                    let mut da = vec![0.0; v.len()];
                    da[start * c..(start + len) * c].copy_from_slice(&g);
                    accumulate(&mut grads, input.0, &da);
                }
                Op::Cols { input, start, len } => {
                    let v = &self.nodes[input.0].value;
                    let (r, c) = v.rows_cols();
                    let mut da = vec![0.0; v.len()];
                    for i in 0..r {
                        da[i * c + start..i * c + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut grads, input.0, &da);
                }
                Op::ConcatCols(parts) => {
                    let rows = self.nodes[idx].value.rows_cols().0;
                    let total = self.nodes[idx].value.rows_cols().1;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.rows_cols().1;
                        if self.requires(p) {
                            let mut dp = vec![0.0; rows * w];
                            for i in 0..rows {
                                dp[i * w..(i + 1) * w]
                                    .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                            }
                            accumulate(&mut grads, p.0, &dp);
                        }
                        offset += w;
                    }
                }
                Op::Reshape(a) => {
                    accumulate(&mut grads, a.0, &g);
                }
                Op::SumAll(a) => {
                    let v = &self.nodes[a.0].value;
                    let da = vec![g[0]; v.len()];
                    accumulate(&mut grads, a.0, &da);
                }
                Op::MeanAll(a) => {
                    let v = &self.nodes[a.0].value;
                    let da = vec![g[0] / v.len() as f64; v.len()];
                    accumulate(&mut grads, a.0, &da);
                }
            }
        }

        let mut by_leaf = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.grad_required {
                let data = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                by_leaf.insert(
                    NodeId(idx),
                    Tensor::new(node.value.shape.clone(), data)?,
                );
            }
        }
        Ok(Gradients { by_leaf })
    }

    /// Reduces a full-shape gradient back to a row-broadcast operand.
    fn reduce_to_operand(&self, g: &[f64], out_idx: usize, operand: NodeId) -> Vec<f64> {
        let vo = &self.nodes[operand.0].value;
        let out = &self.nodes[out_idx].value;
        if vo.shape == out.shape {
            return g.to_vec();
        }
        let (rows, cols) = out.rows_cols();
        let mut reduced = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                reduced[j] += g[i * cols + j];
            }
        }
        reduced
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, delta: &[f64]) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot => *slot = Some(delta.to_vec()),
    }
}

pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Gradients keyed by the leaf node that produced them.
#[derive(Debug)]
pub struct Gradients {
    by_leaf: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_leaf.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.by_leaf.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

/// One evaluation of a differentiable scalar function: its value plus the
/// analytic gradient for each parameter, in parameter order.
pub struct FdEval {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Compares analytic gradients against central finite differences and
/// returns the worst relative error over all parameter components.
///
/// `f` must be deterministic; it is evaluated twice at the base point and
/// any bitwise mismatch is reported as an oracle error.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<FdEval>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::Contract(format!(
            "finite-difference eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let base = f(params)?;
    let again = f(params)?;
    if base.value.to_bits() != again.value.to_bits() {
        return Err(TensorError::Oracle(format!(
            "function is not deterministic: {} vs {}",
            base.value, again.value
        )));
    }
    if base.grads.len() != params.len() {
        return Err(TensorError::Oracle(format!(
            "expected {} gradient blocks, got {}",
            params.len(),
            base.grads.len()
        )));
    }

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        if base.grads[pi].len() != param.len() {
            return Err(TensorError::Oracle(format!(
                "gradient block {pi} has length {}, parameter has {}",
                base.grads[pi].len(),
                param.len()
            )));
        }
        for ci in 0..param.len() {
            let original = work[pi].data[ci];
            work[pi].data[ci] = original + eps;
            let plus = f(&work)?.value;
            work[pi].data[ci] = original - eps;
            let minus = f(&work)?.value;
            work[pi].data[ci] = original;
            let central = (plus - minus) / (2.0 * eps);
            let analytic = base.grads[pi][ci];
            let rel = (analytic - central).abs() / (central.abs() + 1e-12);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn graph_with(t: Tensor) -> (Graph, NodeId) {
        let mut g = Graph::new();
        let id = g.input(&t);
        (g, id)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_product() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] worked by hand.
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_annihilation() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let b = g.constant(Tensor::matrix(3, 2, vec![4.0, -1.0, 2.5, 9.0, 0.1, 7.0]).unwrap());
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let (mut g, x) = graph_with(Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap());
        let s = g.softmax_lastdim(x).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layernorm_zero_mean() {
        let (mut g, x) = graph_with(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.layer_norm(x, 1e-5).unwrap();
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn gelu_zero_fixed_point() {
        let (mut g, x) = graph_with(Tensor::vector(vec![0.0]).unwrap());
        let y = g.gelu(x).unwrap();
        assert_eq!(g.value(y).data()[0], 0.0);
    }

    #[test]
    fn nonfinite_input_reports_index() {
        let (mut g, x) = graph_with(Tensor::vector(vec![1.0, f64::NAN, 3.0]).unwrap());
        let err = g.gelu(x).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { index: 1, .. }));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap().with_grad());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_linear_map_gives_column_sums() {
        // loss = sum(A @ x) => dx = column sums of A.
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let x = g.input(&Tensor::matrix(3, 1, vec![1.0, 1.0, 1.0]).unwrap().with_grad());
        let y = g.matmul(a, x).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn frozen_leaf_absent_from_gradient_map() {
        let mut g = Graph::new();
        let frozen = g.constant(Tensor::vector(vec![2.0]).unwrap());
        let x = g.input(&Tensor::vector(vec![3.0]).unwrap().with_grad());
        let y = g.mul(frozen, x).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_some());
        assert!(grads.get(frozen).is_none());
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad());
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }

    #[test]
    fn shared_subexpression_matches_expanded_form() {
        // z = x*x; loss = sum(z + z) versus loss = sum(x*x + x*x).
        let t = Tensor::vector(vec![1.5, -2.0, 0.5]).unwrap().with_grad();

        let mut g1 = Graph::new();
        let x1 = g1.input(&t);
        let z = g1.mul(x1, x1).unwrap();
        let s = g1.add(z, z).unwrap();
        let l1 = g1.sum_all(s);
        let grad_shared = g1.backward(l1).unwrap().get(x1).unwrap().clone();

        let mut g2 = Graph::new();
        let x2 = g2.input(&t);
        let z1 = g2.mul(x2, x2).unwrap();
        let z2 = g2.mul(x2, x2).unwrap();
        let s2 = g2.add(z1, z2).unwrap();
        let l2 = g2.sum_all(s2);
        let grad_expanded = g2.backward(l2).unwrap().get(x2).unwrap().clone();

        assert_eq!(grad_shared.data(), grad_expanded.data());
    }

    #[test]
    fn replay_is_bit_identical() {
        let t = Tensor::vector(vec![0.3, -1.7, 2.9, 0.01]).unwrap();
        let run = || {
            let (mut g, x) = graph_with(t.clone());
            let a = g.gelu(x).unwrap();
            let b = g.softmax_lastdim(a).unwrap();
            let c = g.layer_norm(b, 1e-5).unwrap();
            g.value(c).data().to_vec()
        };
        let first = run();
        let second = run();
        let bits: Vec<u64> = first.iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = second.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, bits2);
    }

    #[test]
    fn rope_scores_depend_on_relative_offset() {
        // Shift query and key positions together; pairwise dot products
        // must be unchanged.
        let q = Tensor::matrix(3, 4, vec![0.3, -0.2, 0.9, 0.4, 1.1, 0.0, -0.5, 0.7, 0.2, 0.8, -0.9, 0.1]).unwrap();
        let k = Tensor::matrix(3, 4, vec![-0.6, 0.5, 0.2, -0.1, 0.4, 0.9, 0.3, -0.8, 1.0, -0.3, 0.6, 0.2]).unwrap();
        let scores_at = |start: usize| {
            let mut g = Graph::new();
            let qi = g.constant(q.clone());
            let ki = g.constant(k.clone());
            let qr = g.rope(qi, start, 10_000.0).unwrap();
            let kr = g.rope(ki, start, 10_000.0).unwrap();
            let kt = g.transpose(kr).unwrap();
            let s = g.matmul(qr, kt).unwrap();
            g.value(s).data().to_vec()
        };
        let base = scores_at(0);
        let shifted = scores_at(17);
        for (a, b) in base.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn fd_check_sum_of_squares() {
        let p = Tensor::vector(vec![0.4, -1.2, 2.0]).unwrap().with_grad();
        let err = finite_difference_check(
            |params| {
                let mut g = Graph::new();
                let x = g.input(&params[0]);
                let sq = g.mul(x, x).unwrap();
                let loss = g.sum_all(sq);
                let grads = g.backward(loss)?;
                Ok(FdEval {
                    value: g.value(loss).data()[0],
                    grads: vec![grads.get(x).unwrap().data().to_vec()],
                })
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn fd_check_constant_function_is_exact() {
        let p = Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad();
        let err = finite_difference_check(
            |params| {
                Ok(FdEval {
                    value: 42.0,
                    grads: vec![vec![0.0; params[0].len()]],
                })
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn fd_check_rejects_bad_eps() {
        let p = Tensor::vector(vec![1.0]).unwrap().with_grad();
        let r = finite_difference_check(
            |_| {
                Ok(FdEval {
                    value: 0.0,
                    grads: vec![vec![0.0]],
                })
            },
            &[p],
            1e-2,
        );
        assert!(r.is_err());
    }

    #[test]
    fn fd_check_detects_nondeterminism() {
        use std::cell::Cell;
        let counter = Cell::new(0.0);
        let p = Tensor::vector(vec![1.0]).unwrap().with_grad();
        let r = finite_difference_check(
            |_| {
                counter.set(counter.get() + 1.0);
                Ok(FdEval {
                    value: counter.get(),
                    grads: vec![vec![0.0]],
                })
            },
            &[p],
            1e-5,
        );
        assert!(matches!(r, Err(TensorError::Oracle(_))));
    }

    #[test]
    fn fd_check_through_matmul_rope_slices() {
        // Covers matmul (both operands), transpose, rope, column slicing
        // and concatenation in one differentiable path.
        let a = Tensor::matrix(3, 4, vec![0.3, -0.5, 0.8, 0.1, 1.2, -0.4, 0.6, -0.9, 0.2, 0.7, -1.1, 0.5])
            .unwrap()
            .with_grad();
        let b = Tensor::matrix(4, 4, (0..16).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect())
            .unwrap()
            .with_grad();
        let err = finite_difference_check(
            |params| {
                let mut g = Graph::new();
                let x = g.input(&params[0]);
                let w = g.input(&params[1]);
                let y = g.matmul(x, w)?;
                let left = g.cols(y, 0, 2)?;
                let right = g.cols(y, 2, 2)?;
                let lr = g.rope(left, 3, 10_000.0)?;
                let cat = g.concat_cols(&[lr, right])?;
                let t = g.transpose(cat)?;
                let z = g.matmul(t, x)?;
                let sq = g.mul(z, z).unwrap();
                let loss = g.mean_all(sq);
                let grads = g.backward(loss)?;
                Ok(FdEval {
                    value: g.value(loss).data()[0],
                    grads: vec![
                        grads.get(x).unwrap().data().to_vec(),
                        grads.get(w).unwrap().data().to_vec(),
                    ],
                })
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn fd_check_through_gelu_layernorm_softmax() {
        let p = Tensor::matrix(2, 4, vec![0.2, -0.7, 1.3, 0.5, -0.1, 0.9, -1.4, 0.3])
            .unwrap()
            .with_grad();
        let err = finite_difference_check(
            |params| {
                let mut g = Graph::new();
                let x = g.input(&params[0]);
                let a = g.gelu(x).unwrap();
                let b = g.layer_norm(a, 1e-5).unwrap();
                let c = g.softmax_lastdim(b).unwrap();
                let sq = g.mul(c, c).unwrap();
                let loss = g.mean_all(sq);
                let grads = g.backward(loss)?;
                Ok(FdEval {
                    value: g.value(loss).data()[0],
                    grads: vec![grads.get(x).unwrap().data().to_vec()],
                })
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(rows in 1usize..4, cols in 1usize..6, seedval in 0u64..1000) {
            let mut vals = Vec::with_capacity(rows * cols);
            let mut s = seedval;
            for _ in 0..rows * cols {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                vals.push(((s >> 11) as f64 / (1u64 << 53) as f64) * 10.0 - 5.0);
            }
            let t = Tensor::matrix(rows, cols, vals).unwrap();
            let mut g = Graph::new();
            let x = g.constant(t);
            let sm = g.softmax_lastdim(x).unwrap();
            let out = g.value(sm).data();
            for i in 0..rows {
                let row = &out[i * cols..(i + 1) * cols];
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                for &v in row {
                    prop_assert!(v > 0.0 && v < 1.0 + 1e-15);
                }
            }
        }

        #[test]
        fn add_broadcast_matches_manual(rows in 1usize..4, cols in 1usize..5) {
            let m: Vec<f64> = (0..rows * cols).map(|i| i as f64 * 0.5).collect();
            let b: Vec<f64> = (0..cols).map(|i| 1.0 + i as f64).collect();
            let mut g = Graph::new();
            let mt = g.constant(Tensor::matrix(rows, cols, m.clone()).unwrap());
            let bt = g.constant(Tensor::vector(b.clone()).unwrap());
            let out = g.add(mt, bt).unwrap();
            for i in 0..rows {
                for j in 0..cols {
                    prop_assert_eq!(g.value(out).data()[i * cols + j], m[i * cols + j] + b[j]);
                }
            }
        }
    }
}
