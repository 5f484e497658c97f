use super::broadcast::{broadcast_shape, reduce_into, IndexMap};
use super::kernels::{around_axis, gemm, sigmoid};
use super::{Result, Tensor, TensorError};

/// Denominator floor for L2 normalization; makes n(0) = 0.
pub const L2_EPS: f64 = 1e-12;
/// Probability clamp used by [`Op::BinaryCrossEntropy`].
pub const CE_EPS: f64 = 1e-6;

/// Operation kinds recordable on a [`Graph`]. Attributes ride along in the
/// variant; reductions drop the reduced axis.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    /// `[.., m, k] x [k, n]` (shared rhs) or `[b, m, k] x [b, k, n]` (batched).
    MatMul,
    /// Broadcasting elementwise ops.
    Add,
    Sub,
    Mul,
    /// `[.., n] + [n]`.
    AddBias,
    Concat { axis: usize },
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Softmax { axis: usize },
    L2Normalize { axis: usize },
    Mean { axis: usize },
    Sum { axis: usize },
    Max { axis: usize },
    SumAll,
    Slice { axis: usize, start: usize, end: usize },
    Reshape { shape: Vec<usize> },
    /// Swaps the last two axes.
    Transpose,
    /// Row gather from a `[vocab, dim]` table.
    Embedding { indices: Vec<usize> },
    Clip { lo: f64, hi: f64 },
    Scale { factor: f64 },
    /// Elementwise sigmoid cross-entropy of (logits, targets).
    CrossEntropyWithLogits,
    /// Elementwise cross-entropy of (probabilities, targets), probabilities
    /// clamped to `[CE_EPS, 1 - CE_EPS]`.
    BinaryCrossEntropy,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddBias => "add_bias",
            Op::Concat { .. } => "concat",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softmax { .. } => "softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::Max { .. } => "max",
            Op::SumAll => "sum_all",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Transpose => "transpose",
            Op::Embedding { .. } => "embedding",
            Op::Clip { .. } => "clip",
            Op::Scale { .. } => "scale",
            Op::CrossEntropyWithLogits => "cross_entropy_with_logits",
            Op::BinaryCrossEntropy => "binary_cross_entropy",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::Concat { .. } => None,
            Op::MatMul
            | Op::Add
            | Op::Sub
            | Op::Mul
            | Op::AddBias
            | Op::CrossEntropyWithLogits
            | Op::BinaryCrossEntropy => Some(2),
            _ => Some(1),
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation record. Node ids grow monotonically and every
/// input of node `k` has an id below `k`.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, Vec::new(), value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input ids of a node, in application order.
    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, inputs, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and records the result.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(TensorError::InvalidArgument {
                    op: op.name(),
                    reason: format!("expected {n} inputs, got {}", inputs.len()),
                });
            }
        }
        if matches!(op, Op::Leaf) {
            return Err(TensorError::InvalidArgument { op: "leaf", reason: "use Graph::leaf".into() });
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, inputs.to_vec(), out, requires_grad))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards [`Graph::grad`] holds
    /// d loss / d node for every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: shape.to_vec() });
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let ins: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = backward(&node.op, &ins, &node.value, &g, &needs);
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                if let Some(ig) = ig {
                    match &mut self.grads[v.0] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward pass. `None` for nodes that do not
    /// require grad; zeros for nodes the loss does not reach.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor { shape, data: g.clone() },
            None => Tensor::zeros(&shape),
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    // Convenience wrappers, one per op kind.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.apply(Op::AddBias, &[a, bias])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Op::Concat { axis }, parts)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { axis }, &[a])
    }
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::L2Normalize { axis }, &[a])
    }
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Mean { axis }, &[a])
    }
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Sum { axis }, &[a])
    }
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Max { axis }, &[a])
    }
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SumAll, &[a])
    }
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        if axis < self.shape(a).len() && start == 0 && end == self.shape(a)[axis] {
            return Ok(a);
        }
        self.apply(Op::Slice { axis, start, end }, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[a])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.apply(Op::Embedding { indices: indices.to_vec() }, &[table])
    }
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Op::Clip { lo, hi }, &[a])
    }
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(Op::Scale { factor }, &[a])
    }
    pub fn ce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.apply(Op::CrossEntropyWithLogits, &[logits, targets])
    }
    pub fn bce(&mut self, probs: Var, targets: Var) -> Result<Var> {
        self.apply(Op::BinaryCrossEntropy, &[probs, targets])
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::AxisOutOfRange { op, axis, rank });
    }
    Ok(())
}

fn mismatch(op: &Op, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op: op.name(), lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor { shape, data }
}

fn forward(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Leaf => unreachable!("leaf nodes are not applied"),
        Op::MatMul => matmul_forward(op, x[0], x[1]),
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (x[0], x[1]);
            let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| mismatch(op, a, b))?;
            let ma = IndexMap::new(a.shape(), &shape);
            let mb = IndexMap::new(b.shape(), &shape);
            let n: usize = shape.iter().product();
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |p, q| p + q,
                Op::Sub => |p, q| p - q,
                _ => |p, q| p * q,
            };
            let data = if let (IndexMap::Identity, IndexMap::Identity) = (&ma, &mb) {
                a.data.iter().zip(&b.data).map(|(&p, &q)| f(p, q)).collect()
            } else {
                (0..n).map(|i| f(a.data[ma.get(i)], b.data[mb.get(i)])).collect()
            };
            Ok(t(shape, data))
        }
        Op::AddBias => {
            let (a, b) = (x[0], x[1]);
            if b.rank() != 1 || a.shape().last() != Some(&b.len()) {
                return Err(mismatch(op, a, b));
            }
            let n = b.len();
            let data = a.data.iter().enumerate().map(|(i, &v)| v + b.data[i % n]).collect();
            Ok(t(a.shape.clone(), data))
        }
        Op::Concat { axis } => {
            let first = x.first().ok_or_else(|| TensorError::InvalidArgument {
                op: "concat",
                reason: "no inputs".into(),
            })?;
            let rank = first.rank();
            check_axis("concat", *axis, rank)?;
            let mut shape = first.shape.clone();
            shape[*axis] = 0;
            for p in x {
                let ok = p.rank() == rank && (0..rank).all(|d| d == *axis || p.shape[d] == first.shape[d]);
                if !ok {
                    return Err(mismatch(op, first, p));
                }
                shape[*axis] += p.shape[*axis];
            }
            let (outer, _, inner) = around_axis(&shape, *axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in x {
                    let block = p.shape[*axis] * inner;
                    data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
                }
            }
            Ok(t(shape, data))
        }
        Op::Sigmoid => Ok(x[0].map(sigmoid)),
        Op::Tanh => Ok(x[0].map(f64::tanh)),
        Op::Relu => Ok(x[0].map(|v| v.max(0.0))),
        Op::Exp => Ok(x[0].map(f64::exp)),
        Op::Log => {
            if x[0].data.iter().any(|&v| v <= 0.0) {
                return Err(TensorError::InvalidArgument { op: "log", reason: "input must be positive".into() });
            }
            Ok(x[0].map(f64::ln))
        }
        Op::Softmax { axis } => {
            let a = x[0];
            check_axis("softmax", *axis, a.rank())?;
            let (outer, len, inner) = around_axis(a.shape(), *axis);
            let mut data = vec![0.0; a.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let m = (0..len).map(|j| a.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for j in 0..len {
                        let e = (a.data[idx(j)] - m).exp();
                        data[idx(j)] = e;
                        s += e;
                    }
                    for j in 0..len {
                        data[idx(j)] /= s;
                    }
                }
            }
            Ok(t(a.shape.clone(), data))
        }
        Op::L2Normalize { axis } => {
            let a = x[0];
            check_axis("l2_normalize", *axis, a.rank())?;
            let (outer, len, inner) = around_axis(a.shape(), *axis);
            let mut data = vec![0.0; a.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let norm = (0..len).map(|j| a.data[idx(j)].powi(2)).sum::<f64>().sqrt().max(L2_EPS);
                    for j in 0..len {
                        data[idx(j)] = a.data[idx(j)] / norm;
                    }
                }
            }
            Ok(t(a.shape.clone(), data))
        }
        Op::Mean { axis } | Op::Sum { axis } | Op::Max { axis } => {
            let a = x[0];
            check_axis(op.name(), *axis, a.rank())?;
            let (outer, len, inner) = around_axis(a.shape(), *axis);
            let mut shape = a.shape.clone();
            shape.remove(*axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let vals = (0..len).map(|j| a.data[(o * len + j) * inner + i]);
                    data[o * inner + i] = match op {
                        Op::Max { .. } => vals.fold(f64::NEG_INFINITY, f64::max),
                        Op::Mean { .. } => vals.sum::<f64>() / len as f64,
                        _ => vals.sum(),
                    };
                }
            }
            Ok(t(shape, data))
        }
        Op::SumAll => Ok(Tensor::scalar(x[0].data.iter().sum())),
        Op::Slice { axis, start, end } => {
            let a = x[0];
            check_axis("slice", *axis, a.rank())?;
            if start >= end || *end > a.shape[*axis] {
                return Err(TensorError::InvalidArgument {
                    op: "slice",
                    reason: format!("range {start}..{end} invalid for extent {}", a.shape[*axis]),
                });
            }
            let (outer, len, inner) = around_axis(a.shape(), *axis);
            let mut shape = a.shape.clone();
            shape[*axis] = end - start;
            let mut data = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                data.extend_from_slice(&a.data[(o * len + start) * inner..(o * len + end) * inner]);
            }
            Ok(t(shape, data))
        }
        Op::Reshape { shape } => {
            let a = x[0];
            if shape.iter().product::<usize>() != a.len() || shape.iter().any(|&d| d == 0) {
                return Err(TensorError::ShapeMismatch { op: "reshape", lhs: a.shape.clone(), rhs: shape.clone() });
            }
            Ok(t(shape.clone(), a.data.clone()))
        }
        Op::Transpose => {
            let a = x[0];
            if a.rank() < 2 {
                return Err(TensorError::InvalidArgument { op: "transpose", reason: "rank must be >= 2".into() });
            }
            let r = a.rank();
            let (m, n) = (a.shape[r - 2], a.shape[r - 1]);
            let batch = a.len() / (m * n);
            let mut data = vec![0.0; a.len()];
            for b in 0..batch {
                let off = b * m * n;
                for i in 0..m {
                    for j in 0..n {
                        data[off + j * m + i] = a.data[off + i * n + j];
                    }
                }
            }
            let mut shape = a.shape.clone();
            shape.swap(r - 2, r - 1);
            Ok(t(shape, data))
        }
        Op::Embedding { indices } => {
            let a = x[0];
            if a.rank() != 2 || indices.is_empty() {
                return Err(TensorError::InvalidArgument {
                    op: "embedding",
                    reason: "expects a rank-2 table and at least one index".into(),
                });
            }
            let (vocab, dim) = (a.shape[0], a.shape[1]);
            let mut data = Vec::with_capacity(indices.len() * dim);
            for &ix in indices {
                if ix >= vocab {
                    return Err(TensorError::InvalidArgument {
                        op: "embedding",
                        reason: format!("index {ix} out of range for vocabulary {vocab}"),
                    });
                }
                data.extend_from_slice(&a.data[ix * dim..(ix + 1) * dim]);
            }
            Ok(t(vec![indices.len(), dim], data))
        }
        Op::Clip { lo, hi } => {
            if lo > hi {
                return Err(TensorError::InvalidArgument { op: "clip", reason: format!("lo {lo} > hi {hi}") });
            }
            Ok(x[0].map(|v| v.clamp(*lo, *hi)))
        }
        Op::Scale { factor } => Ok(x[0].map(|v| v * factor)),
        Op::CrossEntropyWithLogits | Op::BinaryCrossEntropy => {
            let (a, b) = (x[0], x[1]);
            if a.shape != b.shape {
                return Err(mismatch(op, a, b));
            }
            let data = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(&z, &y)| match op {
                    Op::CrossEntropyWithLogits => z.max(0.0) - z * y + (-z.abs()).exp().ln_1p(),
                    _ => {
                        let p = z.clamp(CE_EPS, 1.0 - CE_EPS);
                        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                    }
                })
                .collect();
            Ok(t(a.shape.clone(), data))
        }
    }
}

fn matmul_forward(op: &Op, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || (b.rank() != 2 && b.rank() != 3) {
        return Err(mismatch(op, a, b));
    }
    let k = a.shape[a.rank() - 1];
    if b.rank() == 2 {
        if b.shape[0] != k {
            return Err(mismatch(op, a, b));
        }
        let n = b.shape[1];
        let p = a.len() / k;
        let mut out = vec![0.0; p * n];
        gemm(p, k, n, &a.data, false, &b.data, false, &mut out, false);
        let mut shape = a.shape.clone();
        *shape.last_mut().unwrap() = n;
        return Ok(t(shape, out));
    }
    if a.rank() != 3 || a.shape[0] != b.shape[0] || b.shape[1] != k {
        return Err(mismatch(op, a, b));
    }
    let (batch, m, n) = (a.shape[0], a.shape[1], b.shape[2]);
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.data[i * m * k..(i + 1) * m * k],
            false,
            &b.data[i * k * n..(i + 1) * k * n],
            false,
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    Ok(t(vec![batch, m, n], out))
}

fn backward(op: &Op, x: &[&Tensor], y: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    let unary = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> { vec![Some((0..g.len()).map(f).collect())] };
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul => {
            let (a, b) = (x[0], x[1]);
            let k = a.shape[a.rank() - 1];
            let mut ga = None;
            let mut gb = None;
            if b.rank() == 2 {
                let n = b.shape[1];
                let p = a.len() / k;
                if need(0) {
                    let mut buf = vec![0.0; a.len()];
                    gemm(p, n, k, g, false, &b.data, true, &mut buf, false);
                    ga = Some(buf);
                }
                if need(1) {
                    let mut buf = vec![0.0; b.len()];
                    gemm(k, p, n, &a.data, true, g, false, &mut buf, false);
                    gb = Some(buf);
                }
            } else {
                let (batch, m, n) = (a.shape[0], a.shape[1], b.shape[2]);
                if need(0) {
                    let mut buf = vec![0.0; a.len()];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &b.data[i * k * n..(i + 1) * k * n],
                            true,
                            &mut buf[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    ga = Some(buf);
                }
                if need(1) {
                    let mut buf = vec![0.0; b.len()];
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &a.data[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut buf[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    gb = Some(buf);
                }
            }
            vec![ga, gb]
        }
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (x[0], x[1]);
            let ma = IndexMap::new(a.shape(), y.shape());
            let mb = IndexMap::new(b.shape(), y.shape());
            let ga = need(0).then(|| match op {
                Op::Mul => reduce_into(&ma, g, a.len(), |i| g[i] * b.data[mb.get(i)]),
                _ => reduce_into(&ma, g, a.len(), |i| g[i]),
            });
            let gb = need(1).then(|| match op {
                Op::Add => reduce_into(&mb, g, b.len(), |i| g[i]),
                Op::Sub => reduce_into(&mb, g, b.len(), |i| -g[i]),
                _ => reduce_into(&mb, g, b.len(), |i| g[i] * a.data[ma.get(i)]),
            });
            vec![ga, gb]
        }
        Op::AddBias => {
            let n = x[1].len();
            let gb = need(1).then(|| {
                let mut acc = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    acc[i % n] += v;
                }
                acc
            });
            vec![need(0).then(|| g.to_vec()), gb]
        }
        Op::Concat { axis } => {
            let (outer, total, inner) = around_axis(y.shape(), *axis);
            let mut offset = 0;
            x.iter()
                .enumerate()
                .map(|(idx, p)| {
                    let len = p.shape[*axis];
                    let res = need(idx).then(|| {
                        let mut buf = Vec::with_capacity(p.len());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            buf.extend_from_slice(&g[start..start + len * inner]);
                        }
                        buf
                    });
                    offset += len;
                    res
                })
                .collect()
        }
        Op::Sigmoid => unary(&|i| g[i] * y.data[i] * (1.0 - y.data[i])),
        Op::Tanh => unary(&|i| g[i] * (1.0 - y.data[i] * y.data[i])),
        Op::Relu => unary(&|i| if x[0].data[i] > 0.0 { g[i] } else { 0.0 }),
        Op::Exp => unary(&|i| g[i] * y.data[i]),
        Op::Log => unary(&|i| g[i] / x[0].data[i]),
        Op::Softmax { axis } => {
            let (outer, len, inner) = around_axis(y.shape(), *axis);
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| g[idx(j)] * y.data[idx(j)]).sum();
                    for j in 0..len {
                        dx[idx(j)] = y.data[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::L2Normalize { axis } => {
            let a = x[0];
            let (outer, len, inner) = around_axis(y.shape(), *axis);
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let norm = (0..len).map(|j| a.data[idx(j)].powi(2)).sum::<f64>().sqrt();
                    if norm > L2_EPS {
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y.data[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = (g[idx(j)] - y.data[idx(j)] * dot) / norm;
                        }
                    } else {
                        for j in 0..len {
                            dx[idx(j)] = g[idx(j)] / L2_EPS;
                        }
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::Mean { axis } | Op::Sum { axis } | Op::Max { axis } => {
            let a = x[0];
            let (outer, len, inner) = around_axis(a.shape(), *axis);
            let mut dx = vec![0.0; a.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let go = g[o * inner + i];
                    let idx = |j: usize| (o * len + j) * inner + i;
                    match op {
                        Op::Max { .. } => {
                            let mut best = 0;
                            for j in 1..len {
                                if a.data[idx(j)] > a.data[idx(best)] {
                                    best = j;
                                }
                            }
                            dx[idx(best)] = go;
                        }
                        Op::Mean { .. } => (0..len).for_each(|j| dx[idx(j)] = go / len as f64),
                        _ => (0..len).for_each(|j| dx[idx(j)] = go),
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::SumAll => vec![Some(vec![g[0]; x[0].len()])],
        Op::Slice { axis, start, end } => {
            let a = x[0];
            let (outer, len, inner) = around_axis(a.shape(), *axis);
            let width = (end - start) * inner;
            let mut dx = vec![0.0; a.len()];
            for o in 0..outer {
                let dst = (o * len + start) * inner;
                dx[dst..dst + width].copy_from_slice(&g[o * width..(o + 1) * width]);
            }
            vec![Some(dx)]
        }
        Op::Reshape { .. } => vec![Some(g.to_vec())],
        Op::Transpose => {
            let r = y.rank();
            let (m, n) = (y.shape[r - 2], y.shape[r - 1]);
            let batch = y.len() / (m * n);
            let mut dx = vec![0.0; y.len()];
            for b in 0..batch {
                let off = b * m * n;
                for i in 0..m {
                    for j in 0..n {
                        dx[off + j * m + i] = g[off + i * n + j];
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::Embedding { indices } => {
            let a = x[0];
            let dim = a.shape[1];
            let mut dx = vec![0.0; a.len()];
            for (row, &ix) in indices.iter().enumerate() {
                for d in 0..dim {
                    dx[ix * dim + d] += g[row * dim + d];
                }
            }
            vec![Some(dx)]
        }
        Op::Clip { lo, hi } => unary(&|i| {
            let v = x[0].data[i];
            if v >= *lo && v <= *hi {
                g[i]
            } else {
                0.0
            }
        }),
        Op::Scale { factor } => unary(&|i| g[i] * factor),
        Op::CrossEntropyWithLogits => {
            let (z, t) = (x[0], x[1]);
            let gz = need(0).then(|| (0..g.len()).map(|i| g[i] * (sigmoid(z.data[i]) - t.data[i])).collect());
            let gt = need(1).then(|| (0..g.len()).map(|i| -g[i] * z.data[i]).collect());
            vec![gz, gt]
        }
        Op::BinaryCrossEntropy => {
            let (p, t) = (x[0], x[1]);
            let gp = need(0).then(|| {
                (0..g.len())
                    .map(|i| {
                        let v = p.data[i];
                        if (CE_EPS..=1.0 - CE_EPS).contains(&v) {
                            g[i] * (v - t.data[i]) / (v * (1.0 - v))
                        } else {
                            0.0
                        }
                    })
                    .collect()
            });
            let gt = need(1).then(|| {
                (0..g.len())
                    .map(|i| {
                        let v = p.data[i].clamp(CE_EPS, 1.0 - CE_EPS);
                        g[i] * ((1.0 - v).ln() - v.ln())
                    })
                    .collect()
            });
            vec![gp, gt]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0]));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn softmax_uniform_and_l2_normalize() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![2.5, 2.5, 2.5]));
        let s = g.softmax(x, 0).unwrap();
        assert!(close(g.value(s).data(), &[1.0 / 3.0; 3], 1e-15));
        let v = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let n = g.l2_normalize(v, 0).unwrap();
        assert!(close(g.value(n).data(), &[0.6, 0.8], 1e-15));
        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let nz = g.l2_normalize(z, 0).unwrap();
        assert_eq!(g.value(nz).data(), &[0.0, 0.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0]));
        let loss = g.sum_all(c).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[0.0, 0.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err, TensorError::ShapeMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] });
        assert!(err.to_string().contains("matmul"));
        let c = g.constant(Tensor::zeros(&[2]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn matmul_batched_and_shared() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::new(vec![2, 1], vec![10.0, 1.0]).unwrap());
        let y = g.matmul(a, w).unwrap();
        assert_eq!(g.shape(y), &[2, 1, 1]);
        assert_eq!(g.value(y).data(), &[12.0, 34.0]);
        let b = g.constant(Tensor::new(vec![2, 2, 1], vec![1.0, 1.0, 2.0, 0.0]).unwrap());
        let z = g.matmul(a, b).unwrap();
        assert_eq!(g.value(z).data(), &[3.0, 6.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = g.slice(c, 1, 1, 3).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn bce_is_clamped() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let t = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let l = g.bce(p, t).unwrap();
        let expected = -(CE_EPS.ln());
        assert!(close(g.value(l).data(), &[expected, expected], 1e-9));
    }

    #[test]
    fn inputs_precede_outputs() {
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(vec![1.0]));
        let b = g.sigmoid(a).unwrap();
        let c = g.mul(a, b).unwrap();
        for v in [b, c] {
            assert!(g.inputs(v).iter().all(|i| i.index() < v.index()));
        }
    }
}
