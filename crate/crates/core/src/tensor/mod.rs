//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation during the forward pass; calling
//! [`Tape::backward`] on a scalar result replays the records in reverse and
//! accumulates gradients into every `requires_grad` leaf. Repeated backward
//! calls on the same tape accumulate additively.
//!
//! Storage is row-major flat `Vec<f64>`. All shapes are explicit; shape
//! errors name both offending shapes.

pub mod gradcheck;
pub mod io;

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: invalid axis permutation {perm:?}")]
    InvalidPermutation { op: &'static str, perm: Vec<usize> },
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
    #[error("tensor io: {0}")]
    Io(String),
}

/// Dense n-dimensional array. `data.len() == shape.iter().product()` always.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// 2-D constructor from row slices; rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![r, c],
                    rhs: vec![r, row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }
}

/// Handle into a [`Tape`].
#[derive(Debug, Copy, Clone, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    Ln { x: TensorId },
    Sigmoid { x: TensorId },
    Relu { x: TensorId },
    SoftmaxRows { x: TensorId },
    Transpose { x: TensorId },
    Permute3 { x: TensorId, perm: [usize; 3] },
    Reshape { x: TensorId },
    ConcatRows { xs: Vec<TensorId> },
    SliceRows { x: TensorId, start: usize },
    Embedding { table: TensorId, ids: Vec<usize> },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        pad_id: Option<usize>,
    },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
    Dropout { x: TensorId, mask: Vec<f64> },
    StopGrad,
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
    /// True when this node's value depends on some requires_grad leaf.
    needs: bool,
}

/// Records forward operations for later reverse-mode replay.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// ── broadcasting helpers ─────────────────────────────────────────────

fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn pad_shape(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut p = vec![1usize; rank];
    p[rank - shape.len()..].copy_from_slice(shape);
    p
}

/// Expand `data` of `shape` to `out_shape` (both broadcast-compatible).
fn expand_to(data: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return data.to_vec();
    }
    let rank = out_shape.len();
    let padded = pad_shape(shape, rank);
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; rank];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..rank).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0usize;
        let mut stride = 1usize;
        for d in (0..rank).rev() {
            let c = if padded[d] == 1 { 0 } else { coords[d] };
            src += c * stride;
            stride *= padded[d];
        }
        *slot = data[src];
    }
    out
}

/// Sum `grad` of `grad_shape` down to `target_shape` (inverse of broadcast).
fn reduce_to(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let rank = grad_shape.len();
    let padded = pad_shape(target_shape, rank);
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![0.0; target_numel];
    let mut coords = vec![0usize; rank];
    for (flat, &g) in grad.iter().enumerate() {
        let mut rem = flat;
        for d in (0..rank).rev() {
            coords[d] = rem % grad_shape[d];
            rem /= grad_shape[d];
        }
        let mut dst = 0usize;
        let mut stride = 1usize;
        for d in (0..rank).rev() {
            let c = if padded[d] == 1 { 0 } else { coords[d] };
            dst += c * stride;
            stride *= padded[d];
        }
        out[dst] += g;
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn permute3_raw(x: &[f64], shape: &[usize], perm: [usize; 3]) -> (Vec<f64>, Vec<usize>) {
    let out_shape = [shape[perm[0]], shape[perm[1]], shape[perm[2]]];
    let in_strides = [shape[1] * shape[2], shape[2], 1];
    let mut out = vec![0.0; x.len()];
    let mut idx = 0usize;
    for c0 in 0..out_shape[0] {
        for c1 in 0..out_shape[1] {
            for c2 in 0..out_shape[2] {
                let coords = [c0, c1, c2];
                let mut src = 0usize;
                for k in 0..3 {
                    src += coords[k] * in_strides[perm[k]];
                }
                out[idx] = x[src];
                idx += 1;
            }
        }
    }
    (out, out_shape.to_vec())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf tensor (input or parameter).
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    /// Record a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId, TensorError> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    /// Record a differentiable leaf.
    pub fn var(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId, TensorError> {
        Ok(self.leaf(Tensor::new(shape, data)?.with_grad()))
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op, needs });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Clone the value out of the tape, dropping gradient state.
    pub fn detach(&self, id: TensorId) -> Tensor {
        let t = &self.nodes[id.0].tensor;
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    // ── forward operations ───────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 {
            return Err(TensorError::RankMismatch { op: "matmul", expected: 2, shape: sa });
        }
        if sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], data)?,
            Op::MatMul { a, b },
            needs,
        ))
    }

    fn binary_broadcast(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(op_name, &sa, &sb)?;
        let ea = expand_to(self.data(a), &sa, &out_shape);
        let eb = expand_to(self.data(b), &sb, &out_shape);
        let data: Vec<f64> = ea.iter().zip(eb.iter()).map(|(&x, &y)| f(x, y)).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(out_shape, data)?, op, needs))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_broadcast("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_broadcast("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_broadcast("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let t = self.value(x);
        let data: Vec<f64> = t.data.iter().map(|&v| v * c).collect();
        let shape = t.shape.clone();
        let needs = self.needs(x);
        self.push(
            Tensor { shape, data, requires_grad: false, grad: None },
            Op::Scale { x, c },
            needs,
        )
    }

    /// Elementwise natural logarithm. Caller guarantees positive inputs.
    pub fn ln(&mut self, x: TensorId) -> TensorId {
        let t = self.value(x);
        let data: Vec<f64> = t.data.iter().map(|&v| v.ln()).collect();
        let shape = t.shape.clone();
        let needs = self.needs(x);
        self.push(
            Tensor { shape, data, requires_grad: false, grad: None },
            Op::Ln { x },
            needs,
        )
    }

    /// Elementwise logistic function, overflow-safe at both tails.
    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let t = self.value(x);
        let data: Vec<f64> = t.data.iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = t.shape.clone();
        let needs = self.needs(x);
        self.push(
            Tensor { shape, data, requires_grad: false, grad: None },
            Op::Sigmoid { x },
            needs,
        )
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let t = self.value(x);
        let data: Vec<f64> = t.data.iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape.clone();
        let needs = self.needs(x);
        self.push(
            Tensor { shape, data, requires_grad: false, grad: None },
            Op::Relu { x },
            needs,
        )
    }

    /// Row-wise softmax of a rank-2 tensor, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let t = self.value(x);
        if t.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "softmax_rows",
                expected: 2,
                shape: t.shape.clone(),
            });
        }
        let (m, n) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::SoftmaxRows { x }, needs))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let t = self.value(x);
        if t.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "transpose",
                expected: 2,
                shape: t.shape.clone(),
            });
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let data = transpose_raw(&t.data, r, c);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose { x }, needs))
    }

    /// Permute the axes of a rank-3 tensor.
    pub fn permute3(&mut self, x: TensorId, perm: [usize; 3]) -> Result<TensorId, TensorError> {
        let t = self.value(x);
        if t.shape.len() != 3 {
            return Err(TensorError::RankMismatch {
                op: "permute3",
                expected: 3,
                shape: t.shape.clone(),
            });
        }
        let mut seen = [false; 3];
        for &p in &perm {
            if p > 2 || seen[p] {
                return Err(TensorError::InvalidPermutation {
                    op: "permute3",
                    perm: perm.to_vec(),
                });
            }
            seen[p] = true;
        }
        let (data, shape) = permute3_raw(&t.data, &t.shape, perm);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Permute3 { x, perm }, needs))
    }

    pub fn reshape(&mut self, x: TensorId, new_shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let t = self.value(x);
        let expected: usize = new_shape.iter().product();
        if expected != t.data.len() {
            return Err(TensorError::DataLength {
                shape: new_shape,
                expected,
                got: t.data.len(),
            });
        }
        let data = t.data.clone();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(new_shape, data)?, Op::Reshape { x }, needs))
    }

    /// Stack rank-2 tensors along axis 0; all inputs must share a column count.
    pub fn concat_rows(&mut self, xs: &[TensorId]) -> Result<TensorId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_rows" });
        }
        let cols = self.shape(xs[0])[1];
        let mut rows = 0usize;
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            if t.shape.len() != 2 || t.shape[1] != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: t.shape.clone(),
                });
            }
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows { xs: xs.to_vec() },
            needs,
        ))
    }

    /// Contiguous row range [start, start+len) of a rank-2 tensor.
    pub fn slice_rows(
        &mut self,
        x: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let t = self.value(x);
        if t.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "slice_rows",
                expected: 2,
                shape: t.shape.clone(),
            });
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        if start + len > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                size: r,
            });
        }
        let data = t.data[start * c..(start + len) * c].to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![len, c], data)?,
            Op::SliceRows { x, start },
            needs,
        ))
    }

    /// Gather rows of `table` (V×d) by token id; gradient scatter-adds.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId, TensorError> {
        let t = self.value(table);
        if t.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "embedding",
                expected: 2,
                shape: t.shape.clone(),
            });
        }
        let (v, d) = (t.shape[0], t.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(&t.data[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding { table, ids: ids.to_vec() },
            needs,
        ))
    }

    /// Row-wise layer normalization with learned gain/shift.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let t = self.value(x);
        if t.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "layer_norm",
                expected: 2,
                shape: t.shape.clone(),
            });
        }
        let (r, d) = (t.shape[0], t.shape[1]);
        let gs = self.shape(gamma).to_vec();
        let bs = self.shape(beta).to_vec();
        if gs != [d] || bs != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: if gs != [d] { gs } else { bs },
                rhs: vec![d],
            });
        }
        let gd = self.data(gamma).to_vec();
        let bd = self.data(beta).to_vec();
        let xd = self.data(x);
        let mut data = vec![0.0; r * d];
        for i in 0..r {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(vec![r, d], data)?,
            Op::LayerNorm { x, gamma, beta, eps },
            needs,
        ))
    }

    /// Mean negative log-likelihood over non-pad positions.
    ///
    /// `logits` is n×V, `targets` has length n. Positions whose target equals
    /// `pad_id` are excluded from the mean; if every position is padding the
    /// loss is zero.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        pad_id: Option<usize>,
    ) -> Result<TensorId, TensorError> {
        let t = self.value(logits);
        if t.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "cross_entropy",
                expected: 2,
                shape: t.shape.clone(),
            });
        }
        let (n, v) = (t.shape[0], t.shape[1]);
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &tid) in targets.iter().enumerate() {
            if Some(tid) == pad_id {
                continue;
            }
            if tid >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: tid,
                    size: v,
                });
            }
            let row = &t.data[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[tid];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
            },
            needs,
        ))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let d = self.data(x);
        let m = if d.is_empty() { 0.0 } else { d.iter().sum::<f64>() / d.len() as f64 };
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::MeanAll { x }, needs)
    }

    /// Mean over rows of a rank-2 tensor, producing 1×d.
    pub fn mean_rows(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let t = self.value(x);
        if t.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "mean_rows",
                expected: 2,
                shape: t.shape.clone(),
            });
        }
        let n = t.shape[0];
        let weights = self.constant(vec![1, n], vec![1.0 / n as f64; n])?;
        self.matmul(weights, x)
    }

    /// Inverted dropout: surviving entries are scaled by 1/(1-rate).
    pub fn dropout(&mut self, x: TensorId, rate: f64, rng: &mut crate::rng::Rng) -> TensorId {
        let t = self.value(x);
        let keep = 1.0 - rate;
        let mask: Vec<f64> = t
            .data
            .iter()
            .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data: Vec<f64> = t.data.iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect();
        let shape = t.shape.clone();
        let needs = self.needs(x);
        self.push(
            Tensor { shape, data, requires_grad: false, grad: None },
            Op::Dropout { x, mask },
            needs,
        )
    }

    /// Identity forward; blocks gradient flow.
    pub fn stop_gradient(&mut self, x: TensorId) -> TensorId {
        let t = self.detach(x);
        self.push(t, Op::StopGrad, false)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-replay from a scalar loss, accumulating into leaf gradients.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// overwritten each call. Every `requires_grad` leaf ends populated,
    /// with zeros if it does not influence the loss.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut temp: Vec<Option<Vec<f64>>> = vec![None; n];
        temp[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if !self.nodes[i].needs {
                continue;
            }
            let Some(g) = temp[i].take() else { continue };
            self.propagate(i, &g, &mut temp);
            temp[i] = Some(g);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            let is_leaf = matches!(node.op, Op::Leaf);
            if is_leaf && node.tensor.requires_grad {
                let slot = node
                    .tensor
                    .grad
                    .get_or_insert_with(|| vec![0.0; node.tensor.data.len()]);
                if let Some(g) = &temp[i] {
                    for (a, b) in slot.iter_mut().zip(g.iter()) {
                        *a += b;
                    }
                }
            } else if !is_leaf && node.needs {
                if let Some(g) = temp[i].take() {
                    node.tensor.grad = Some(g);
                }
            }
        }
        Ok(())
    }

    fn accumulate(temp: &mut [Option<Vec<f64>>], id: TensorId, contrib: &[f64]) {
        match &mut temp[id.0] {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(contrib.iter()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib.to_vec()),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], temp: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out_shape = &nodes[i].tensor.shape;
        match &nodes[i].op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul { a, b } => {
                let sa = &nodes[a.0].tensor.shape;
                let (m, k) = (sa[0], sa[1]);
                let nn = nodes[b.0].tensor.shape[1];
                if nodes[a.0].needs {
                    let bt = transpose_raw(&nodes[b.0].tensor.data, k, nn);
                    let da = matmul_raw(g, &bt, m, nn, k);
                    Self::accumulate(temp, *a, &da);
                }
                if nodes[b.0].needs {
                    let at = transpose_raw(&nodes[a.0].tensor.data, m, k);
                    let db = matmul_raw(&at, g, k, m, nn);
                    Self::accumulate(temp, *b, &db);
                }
            }
            Op::Add { a, b } => {
                if nodes[a.0].needs {
                    let da = reduce_to(g, out_shape, &nodes[a.0].tensor.shape);
                    Self::accumulate(temp, *a, &da);
                }
                if nodes[b.0].needs {
                    let db = reduce_to(g, out_shape, &nodes[b.0].tensor.shape);
                    Self::accumulate(temp, *b, &db);
                }
            }
            Op::Sub { a, b } => {
                if nodes[a.0].needs {
                    let da = reduce_to(g, out_shape, &nodes[a.0].tensor.shape);
                    Self::accumulate(temp, *a, &da);
                }
                if nodes[b.0].needs {
                    let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                    let db = reduce_to(&neg, out_shape, &nodes[b.0].tensor.shape);
                    Self::accumulate(temp, *b, &db);
                }
            }
            Op::Mul { a, b } => {
                let sa = &nodes[a.0].tensor.shape;
                let sb = &nodes[b.0].tensor.shape;
                let ea = expand_to(&nodes[a.0].tensor.data, sa, out_shape);
                let eb = expand_to(&nodes[b.0].tensor.data, sb, out_shape);
                if nodes[a.0].needs {
                    let full: Vec<f64> = g.iter().zip(eb.iter()).map(|(&x, &y)| x * y).collect();
                    let da = reduce_to(&full, out_shape, sa);
                    Self::accumulate(temp, *a, &da);
                }
                if nodes[b.0].needs {
                    let full: Vec<f64> = g.iter().zip(ea.iter()).map(|(&x, &y)| x * y).collect();
                    let db = reduce_to(&full, out_shape, sb);
                    Self::accumulate(temp, *b, &db);
                }
            }
            Op::Scale { x, c } => {
                if nodes[x.0].needs {
                    let dx: Vec<f64> = g.iter().map(|&v| v * c).collect();
                    Self::accumulate(temp, *x, &dx);
                }
            }
            Op::Ln { x } => {
                if nodes[x.0].needs {
                    let xd = &nodes[x.0].tensor.data;
                    let dx: Vec<f64> =
                        g.iter().zip(xd.iter()).map(|(&gv, &xv)| gv / xv).collect();
                    Self::accumulate(temp, *x, &dx);
                }
            }
            Op::Sigmoid { x } => {
                if nodes[x.0].needs {
                    let s = &nodes[i].tensor.data;
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(s.iter())
                        .map(|(&gv, &sv)| gv * sv * (1.0 - sv))
                        .collect();
                    Self::accumulate(temp, *x, &dx);
                }
            }
            Op::Relu { x } => {
                if nodes[x.0].needs {
                    let xd = &nodes[x.0].tensor.data;
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xd.iter())
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    Self::accumulate(temp, *x, &dx);
                }
            }
            Op::SoftmaxRows { x } => {
                if nodes[x.0].needs {
                    let s = &nodes[i].tensor.data;
                    let (m, nn) = (out_shape[0], out_shape[1]);
                    let mut dx = vec![0.0; m * nn];
                    for r in 0..m {
                        let srow = &s[r * nn..(r + 1) * nn];
                        let grow = &g[r * nn..(r + 1) * nn];
                        let dot: f64 = srow.iter().zip(grow.iter()).map(|(&a, &b)| a * b).sum();
                        for j in 0..nn {
                            dx[r * nn + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    Self::accumulate(temp, *x, &dx);
                }
            }
            Op::Transpose { x } => {
                if nodes[x.0].needs {
                    let (r, c) = (out_shape[0], out_shape[1]);
                    let dx = transpose_raw(g, r, c);
                    Self::accumulate(temp, *x, &dx);
                }
            }
            Op::Permute3 { x, perm } => {
                if nodes[x.0].needs {
                    let mut inv = [0usize; 3];
                    for (k, &p) in perm.iter().enumerate() {
                        inv[p] = k;
                    }
                    let (dx, _) = permute3_raw(g, out_shape, inv);
                    Self::accumulate(temp, *x, &dx);
                }
            }
            Op::Reshape { x } => {
                if nodes[x.0].needs {
                    Self::accumulate(temp, *x, g);
                }
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0usize;
                for &x in xs {
                    let len = nodes[x.0].tensor.data.len();
                    if nodes[x.0].needs {
                        Self::accumulate(temp, x, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                if nodes[x.0].needs {
                    let c = nodes[x.0].tensor.shape[1];
                    let mut dx = vec![0.0; nodes[x.0].tensor.data.len()];
                    dx[start * c..start * c + g.len()].copy_from_slice(g);
                    Self::accumulate(temp, *x, &dx);
                }
            }
            Op::Embedding { table, ids } => {
                if nodes[table.0].needs {
                    let d = nodes[table.0].tensor.shape[1];
                    let mut dt = vec![0.0; nodes[table.0].tensor.data.len()];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[row * d + j];
                        }
                    }
                    Self::accumulate(temp, *table, &dt);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, d) = (out_shape[0], out_shape[1]);
                let xd = &nodes[x.0].tensor.data;
                let gd = &nodes[gamma.0].tensor.data;
                let mut dx = vec![0.0; r * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for row in 0..r {
                    let xs = &xd[row * d..(row + 1) * d];
                    let gs = &g[row * d..(row + 1) * d];
                    let mean = xs.iter().sum::<f64>() / d as f64;
                    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = gs.iter().zip(gd.iter()).map(|(&a, &b)| a * b).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 =
                        dxhat.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dgamma[j] += gs[j] * xhat[j];
                        dbeta[j] += gs[j];
                        dx[row * d + j] =
                            inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                if nodes[x.0].needs {
                    Self::accumulate(temp, *x, &dx);
                }
                if nodes[gamma.0].needs {
                    Self::accumulate(temp, *gamma, &dgamma);
                }
                if nodes[beta.0].needs {
                    Self::accumulate(temp, *beta, &dbeta);
                }
            }
            Op::CrossEntropy { logits, targets, pad_id } => {
                if nodes[logits.0].needs {
                    let shape = &nodes[logits.0].tensor.shape;
                    let (n, v) = (shape[0], shape[1]);
                    let ld = &nodes[logits.0].tensor.data;
                    let count = targets.iter().filter(|&&t| Some(t) != *pad_id).count();
                    let mut dl = vec![0.0; n * v];
                    if count > 0 {
                        let scale = g[0] / count as f64;
                        for (row, &tid) in targets.iter().enumerate() {
                            if Some(tid) == *pad_id {
                                continue;
                            }
                            let lrow = &ld[row * v..(row + 1) * v];
                            let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let exps: Vec<f64> = lrow.iter().map(|&x| (x - max).exp()).collect();
                            let sum: f64 = exps.iter().sum();
                            for j in 0..v {
                                let p = exps[j] / sum;
                                let onehot = if j == tid { 1.0 } else { 0.0 };
                                dl[row * v + j] = scale * (p - onehot);
                            }
                        }
                    }
                    Self::accumulate(temp, *logits, &dl);
                }
            }
            Op::SumAll { x } => {
                if nodes[x.0].needs {
                    let dx = vec![g[0]; nodes[x.0].tensor.data.len()];
                    Self::accumulate(temp, *x, &dx);
                }
            }
            Op::MeanAll { x } => {
                if nodes[x.0].needs {
                    let n = nodes[x.0].tensor.data.len();
                    let dx = vec![g[0] / n as f64; n];
                    Self::accumulate(temp, *x, &dx);
                }
            }
            Op::Dropout { x, mask } => {
                if nodes[x.0].needs {
                    let dx: Vec<f64> =
                        g.iter().zip(mask.iter()).map(|(&gv, &mv)| gv * mv).collect();
                    Self::accumulate(temp, *x, &dx);
                }
            }
        }
    }
}
