//! Dense `f64` tensors and a reverse-mode differentiation graph.
//!
//! The graph is a flat tape: every operation appends a node whose inputs
//! always have smaller indices, so walking the tape backwards is a valid
//! reverse topological order. Values are computed eagerly when a node is
//! built; gradients are filled in by [`Graph::backward`].
//!
//! Everything is 64-bit. The attack optimizer and the CTC recurrences are
//! precision-sensitive and the tensors involved are small, so there is no
//! reason to trade precision for speed here.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported shape {shape:?}")]
    BadShape { op: &'static str, shape: Vec<usize> },
    #[error("tensor data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: non-finite value rejected")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of bounds ({bound})")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
    #[error("transform changed sample count from {expected} to {got}")]
    TransformLength { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array of 64-bit floats.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.data.len())
        }
    }
}

impl Tensor {
    /// Build a tensor, validating the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::BadShape {
                op: "Tensor::new",
                shape,
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (1 for vectors).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Number of columns when viewed as a matrix (the last axis).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn row_slice(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }
}

/// Shape-preserving sample transform used by the straight-through operator.
///
/// Forward applies `apply`; backward treats the transform as the identity.
pub trait SampleTransform: Send + Sync {
    fn name(&self) -> &str;
    fn apply(&self, samples: &[f64]) -> Vec<f64>;
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddN(Vec<NodeId>),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Abs(NodeId),
    MaxScalar(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    MaxReduce(NodeId),
    LogSumExp(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Row(NodeId, usize),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    GatherCols(NodeId, Vec<usize>),
    At(NodeId, usize, usize),
    LseScalars(Vec<NodeId>),
    /// out[k] = in[indices[k]] * scale[k]; the framing/windowing primitive.
    GatherScale {
        input: NodeId,
        indices: Arc<Vec<usize>>,
        scale: Arc<Vec<f64>>,
    },
    StraightThrough(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only computation tape. One graph per forward/backward pass; a
/// graph and its tensors are confined to whoever built them.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (a leaf whose gradient will be computed).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root w.r.t. this node, if computed.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data,
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), t, ng))
    }

    /// n-ary elementwise sum of same-shaped tensors.
    pub fn add_n(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let Some((&first, rest)) = items.split_first() else {
            return Err(TensorError::EmptyInput { op: "add_n" });
        };
        let mut acc = self.value(first).clone();
        let mut ng = self.needs(first);
        for &id in rest {
            self.same_shape("add_n", first, id)?;
            for (o, v) in acc.data.iter_mut().zip(self.value(id).data()) {
                *o += v;
            }
            ng |= self.needs(id);
        }
        Ok(self.push(Op::AddN(items.to_vec()), acc, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data,
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), t, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data,
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), t, ng))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.map_unary(a, |x| x + c);
        let ng = self.needs(a);
        self.push(Op::AddScalar(a), t, ng)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.map_unary(a, |x| x * c);
        let ng = self.needs(a);
        self.push(Op::MulScalar(a, c), t, ng)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.mul_scalar(a, -1.0)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let t = self.map_unary(a, f64::tanh);
        let ng = self.needs(a);
        self.push(Op::Tanh(a), t, ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.map_unary(a, sigmoid);
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), t, ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let t = self.map_unary(a, f64::exp);
        let ng = self.needs(a);
        self.push(Op::Exp(a), t, ng)
    }

    /// Natural log. The caller is responsible for keeping inputs positive
    /// (the featurizer adds its floor before taking the log).
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(TensorError::NonFinite { op: "log" });
        }
        let t = self.map_unary(a, f64::ln);
        let ng = self.needs(a);
        Ok(self.push(Op::Log(a), t, ng))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let t = self.map_unary(a, |x| x * x);
        let ng = self.needs(a);
        self.push(Op::Square(a), t, ng)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let t = self.map_unary(a, f64::abs);
        let ng = self.needs(a);
        self.push(Op::Abs(a), t, ng)
    }

    /// Elementwise max(x, c). Gradient flows to x only where x > c.
    pub fn max_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.map_unary(a, |x| x.max(c));
        let ng = self.needs(a);
        self.push(Op::MaxScalar(a, c), t, ng)
    }

    /// max(x, 0), the hinge building block.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.max_scalar(a, 0.0)
    }

    fn map_unary(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| f(x)).collect(),
        }
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data.iter().sum();
        let ng = self.needs(a);
        self.push(Op::Sum(a), Tensor::scalar_unchecked(s), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s: f64 = v.data.iter().sum::<f64>() / v.data.len() as f64;
        let ng = self.needs(a);
        self.push(Op::Mean(a), Tensor::scalar_unchecked(s), ng)
    }

    /// Max over all elements. Ties route the gradient to the first maximal
    /// element, keeping backward deterministic.
    pub fn max(&mut self, a: NodeId) -> NodeId {
        let m = self
            .value(a)
            .data
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let ng = self.needs(a);
        self.push(Op::MaxReduce(a), Tensor::scalar_unchecked(m), ng)
    }

    /// log(sum(exp(x))) over all elements, max-subtracted for stability.
    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        let v = log_sum_exp_slice(self.value(a).data());
        let ng = self.needs(a);
        self.push(Op::LogSumExp(a), Tensor::scalar_unchecked(v), ng)
    }

    /// log-sum-exp over a list of scalar nodes, the DP recombination step.
    pub fn lse_scalars(&mut self, items: &[NodeId]) -> Result<NodeId> {
        if items.is_empty() {
            return Err(TensorError::EmptyInput { op: "lse_scalars" });
        }
        let mut vals = Vec::with_capacity(items.len());
        let mut ng = false;
        for &id in items {
            let v = self.value(id);
            if v.len() != 1 {
                return Err(TensorError::BadShape {
                    op: "lse_scalars",
                    shape: v.shape.clone(),
                });
            }
            vals.push(v.item());
            ng |= self.needs(id);
        }
        let out = log_sum_exp_slice(&vals);
        Ok(self.push(Op::LseScalars(items.to_vec()), Tensor::scalar_unchecked(out), ng))
    }

    // ---- softmax family (row-wise over the last axis) ----

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.rowwise(a, "softmax", |row, out| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - m).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        })?;
        let ng = self.needs(a);
        Ok(self.push(Op::Softmax(a), t, ng))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.rowwise(a, "log_softmax", |row, out| {
            let lse = log_sum_exp_slice(row);
            for (o, &x) in out.iter_mut().zip(row) {
                *o = x - lse;
            }
        })?;
        let ng = self.needs(a);
        Ok(self.push(Op::LogSoftmax(a), t, ng))
    }

    fn rowwise(
        &self,
        a: NodeId,
        op: &'static str,
        f: impl Fn(&[f64], &mut [f64]),
    ) -> Result<Tensor> {
        let v = self.value(a);
        if v.shape.len() > 2 {
            return Err(TensorError::BadShape {
                op,
                shape: v.shape.clone(),
            });
        }
        let cols = v.cols();
        let mut data = vec![0.0; v.len()];
        for (dst, src) in data.chunks_mut(cols).zip(v.data.chunks(cols)) {
            f(src, dst);
        }
        Ok(Tensor {
            shape: v.shape.clone(),
            data,
        })
    }

    // ---- structure ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let t = matmul_nn(va, vb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), t, ng))
    }

    /// One row of a matrix as a 1×cols matrix.
    pub fn row(&mut self, a: NodeId, r: usize) -> Result<NodeId> {
        let v = self.value(a);
        if v.shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "row",
                shape: v.shape.clone(),
            });
        }
        if r >= v.shape[0] {
            return Err(TensorError::IndexOutOfBounds {
                op: "row",
                index: r,
                bound: v.shape[0],
            });
        }
        let t = Tensor {
            shape: vec![1, v.cols()],
            data: v.row_slice(r).to_vec(),
        };
        let ng = self.needs(a);
        Ok(self.push(Op::Row(a, r), t, ng))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a);
        if v.shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "slice_cols",
                shape: v.shape.clone(),
            });
        }
        let cols = v.cols();
        if start + len > cols || len == 0 {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_cols",
                index: start + len,
                bound: cols,
            });
        }
        let rows = v.shape[0];
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.row_slice(r)[start..start + len]);
        }
        let t = Tensor {
            shape: vec![rows, len],
            data,
        };
        let ng = self.needs(a);
        Ok(self.push(Op::SliceCols(a, start, len), t, ng))
    }

    /// Stack matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let Some((&first, _)) = items.split_first() else {
            return Err(TensorError::EmptyInput { op: "concat_rows" });
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut ng = false;
        for &id in items {
            let v = self.value(id);
            if v.shape.len() != 2 || v.cols() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: v.shape.clone(),
                });
            }
            rows += v.shape[0];
            data.extend_from_slice(&v.data);
            ng |= self.needs(id);
        }
        let t = Tensor {
            shape: vec![rows, cols],
            data,
        };
        Ok(self.push(Op::ConcatRows(items.to_vec()), t, ng))
    }

    /// Select a subset of columns (in the given order) from every row.
    pub fn gather_cols(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(a);
        if v.shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "gather_cols",
                shape: v.shape.clone(),
            });
        }
        if indices.is_empty() {
            return Err(TensorError::EmptyInput { op: "gather_cols" });
        }
        let cols = v.cols();
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(TensorError::IndexOutOfBounds {
                op: "gather_cols",
                index: bad,
                bound: cols,
            });
        }
        let rows = v.shape[0];
        let mut data = Vec::with_capacity(rows * indices.len());
        for r in 0..rows {
            let row = v.row_slice(r);
            data.extend(indices.iter().map(|&i| row[i]));
        }
        let t = Tensor {
            shape: vec![rows, indices.len()],
            data,
        };
        let ng = self.needs(a);
        Ok(self.push(Op::GatherCols(a, indices.to_vec()), t, ng))
    }

    /// Single matrix entry as a scalar node.
    pub fn at(&mut self, a: NodeId, r: usize, c: usize) -> Result<NodeId> {
        let v = self.value(a);
        if v.shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "at",
                shape: v.shape.clone(),
            });
        }
        if r >= v.shape[0] || c >= v.shape[1] {
            return Err(TensorError::IndexOutOfBounds {
                op: "at",
                index: r * v.shape[1] + c,
                bound: v.len(),
            });
        }
        let t = Tensor::scalar_unchecked(v.at(r, c));
        let ng = self.needs(a);
        Ok(self.push(Op::At(a, r, c), t, ng))
    }

    /// out[k] = input[indices[k]] * scale[k], on a 1-D input. Used for
    /// framing (gather with reflect indices, Hann scale folded in).
    pub fn gather_scale(
        &mut self,
        input: NodeId,
        indices: Arc<Vec<usize>>,
        scale: Arc<Vec<f64>>,
        out_shape: Vec<usize>,
    ) -> Result<NodeId> {
        let v = self.value(input);
        if v.shape.len() != 1 {
            return Err(TensorError::BadShape {
                op: "gather_scale",
                shape: v.shape.clone(),
            });
        }
        let expected: usize = out_shape.iter().product();
        if indices.len() != expected || scale.len() != expected {
            return Err(TensorError::DataLength {
                shape: out_shape,
                expected,
                got: indices.len(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
            return Err(TensorError::IndexOutOfBounds {
                op: "gather_scale",
                index: bad,
                bound: v.len(),
            });
        }
        let data: Vec<f64> = indices
            .iter()
            .zip(scale.iter())
            .map(|(&i, &s)| v.data[i] * s)
            .collect();
        let t = Tensor {
            shape: out_shape,
            data,
        };
        let ng = self.needs(input);
        Ok(self.push(
            Op::GatherScale {
                input,
                indices,
                scale,
            },
            t,
            ng,
        ))
    }

    /// Apply a sample transform on the forward pass while treating it as the
    /// identity on the backward pass (straight-through estimator).
    pub fn straight_through(
        &mut self,
        a: NodeId,
        transform: Arc<dyn SampleTransform>,
    ) -> Result<NodeId> {
        let v = self.value(a);
        let out = transform.apply(v.data());
        if out.len() != v.len() {
            return Err(TensorError::TransformLength {
                expected: v.len(),
                got: out.len(),
            });
        }
        if !out.iter().all(|x| x.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "straight_through",
            });
        }
        let t = Tensor {
            shape: v.shape.clone(),
            data: out,
        };
        let ng = self.needs(a);
        Ok(self.push(Op::StraightThrough(a), t, ng))
    }

    // ---- backward ----

    /// Populate gradients of every reachable differentiable node w.r.t. a
    /// scalar root. Re-running on the same graph recomputes from scratch,
    /// so results are bit-identical between calls.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: self.value(root).shape.clone(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(Tensor::scalar_unchecked(1.0));

        for i in (0..=root.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.grads[i].take().expect("checked above");
            self.step_backward(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contribution: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (o, v) in existing.data.iter_mut().zip(contribution.data) {
                    *o += v;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn zeros_like(&self, id: NodeId) -> Tensor {
        Tensor::zeros(self.value(id).shape.clone())
    }

    fn step_backward(&mut self, i: usize, g: &Tensor) {
        match self.nodes[i].op.clone() {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::AddN(items) => {
                for id in items {
                    self.accumulate(id, g.clone());
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                let neg = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|v| -v).collect(),
                };
                self.accumulate(b, neg);
            }
            Op::Mul(a, b) => {
                let ga = Tensor {
                    shape: g.shape.clone(),
                    data: zip_map(g, self.value(b), |gv, bv| gv * bv),
                };
                let gb = Tensor {
                    shape: g.shape.clone(),
                    data: zip_map(g, self.value(a), |gv, av| gv * av),
                };
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::AddScalar(a) => self.accumulate(a, g.clone()),
            Op::MulScalar(a, c) => {
                let ga = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|v| v * c).collect(),
                };
                self.accumulate(a, ga);
            }
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    let ga = matmul_nt(g, self.value(b));
                    self.accumulate(a, ga);
                }
                if self.needs(b) {
                    let gb = matmul_tn(self.value(a), g);
                    self.accumulate(b, gb);
                }
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let ga = Tensor {
                    shape: g.shape.clone(),
                    data: zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv)),
                };
                self.accumulate(a, ga);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let ga = Tensor {
                    shape: g.shape.clone(),
                    data: zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv)),
                };
                self.accumulate(a, ga);
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                let ga = Tensor {
                    shape: g.shape.clone(),
                    data: zip_map(g, y, |gv, yv| gv * yv),
                };
                self.accumulate(a, ga);
            }
            Op::Log(a) => {
                let ga = Tensor {
                    shape: g.shape.clone(),
                    data: zip_map(g, self.value(a), |gv, xv| gv / xv),
                };
                self.accumulate(a, ga);
            }
            Op::Square(a) => {
                let ga = Tensor {
                    shape: g.shape.clone(),
                    data: zip_map(g, self.value(a), |gv, xv| gv * 2.0 * xv),
                };
                self.accumulate(a, ga);
            }
            Op::Abs(a) => {
                let ga = Tensor {
                    shape: g.shape.clone(),
                    data: zip_map(g, self.value(a), |gv, xv| {
                        if xv > 0.0 {
                            gv
                        } else if xv < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    }),
                };
                self.accumulate(a, ga);
            }
            Op::MaxScalar(a, c) => {
                let ga = Tensor {
                    shape: g.shape.clone(),
                    data: zip_map(g, self.value(a), |gv, xv| if xv > c { gv } else { 0.0 }),
                };
                self.accumulate(a, ga);
            }
            Op::Sum(a) => {
                let mut ga = self.zeros_like(a);
                ga.data.fill(g.item());
                self.accumulate(a, ga);
            }
            Op::Mean(a) => {
                let mut ga = self.zeros_like(a);
                let v = g.item() / ga.data.len() as f64;
                ga.data.fill(v);
                self.accumulate(a, ga);
            }
            Op::MaxReduce(a) => {
                let mut ga = self.zeros_like(a);
                let v = self.value(a);
                let mut best = 0;
                for (k, &x) in v.data.iter().enumerate() {
                    if x > v.data[best] {
                        best = k;
                    }
                }
                ga.data[best] = g.item();
                self.accumulate(a, ga);
            }
            Op::LogSumExp(a) => {
                let out = self.nodes[i].value.item();
                let v = self.value(a);
                let gv = g.item();
                let ga = Tensor {
                    shape: v.shape.clone(),
                    data: v.data.iter().map(|&x| gv * (x - out).exp()).collect(),
                };
                self.accumulate(a, ga);
            }
            Op::LseScalars(items) => {
                let out = self.nodes[i].value.item();
                let gv = g.item();
                for id in items {
                    let x = self.value(id).item();
                    let c = Tensor::scalar_unchecked(gv * (x - out).exp());
                    self.accumulate(id, c);
                }
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.clone();
                let cols = y.cols();
                let mut data = vec![0.0; y.len()];
                for ((dst, yr), gr) in data
                    .chunks_mut(cols)
                    .zip(y.data.chunks(cols))
                    .zip(g.data.chunks(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(
                    a,
                    Tensor {
                        shape: y.shape.clone(),
                        data,
                    },
                );
            }
            Op::LogSoftmax(a) => {
                let y = self.nodes[i].value.clone();
                let cols = y.cols();
                let mut data = vec![0.0; y.len()];
                for ((dst, yr), gr) in data
                    .chunks_mut(cols)
                    .zip(y.data.chunks(cols))
                    .zip(g.data.chunks(cols))
                {
                    let gsum: f64 = gr.iter().sum();
                    for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *d = gv - yv.exp() * gsum;
                    }
                }
                self.accumulate(
                    a,
                    Tensor {
                        shape: y.shape.clone(),
                        data,
                    },
                );
            }
            Op::Row(a, r) => {
                let mut ga = self.zeros_like(a);
                let cols = ga.cols();
                ga.data[r * cols..(r + 1) * cols].copy_from_slice(&g.data);
                self.accumulate(a, ga);
            }
            Op::SliceCols(a, start, len) => {
                let mut ga = self.zeros_like(a);
                let cols = ga.cols();
                for (r, gr) in g.data.chunks(len).enumerate() {
                    ga.data[r * cols + start..r * cols + start + len].copy_from_slice(gr);
                }
                self.accumulate(a, ga);
            }
            Op::ConcatRows(items) => {
                let cols = self.nodes[i].value.cols();
                let mut offset = 0;
                for id in items {
                    let rows = self.value(id).rows();
                    let chunk = Tensor {
                        shape: self.value(id).shape.clone(),
                        data: g.data[offset..offset + rows * cols].to_vec(),
                    };
                    offset += rows * cols;
                    self.accumulate(id, chunk);
                }
            }
            Op::GatherCols(a, indices) => {
                let mut ga = self.zeros_like(a);
                let cols = ga.cols();
                let m = indices.len();
                for (r, gr) in g.data.chunks(m).enumerate() {
                    for (&idx, &gv) in indices.iter().zip(gr) {
                        ga.data[r * cols + idx] += gv;
                    }
                }
                self.accumulate(a, ga);
            }
            Op::At(a, r, c) => {
                let mut ga = self.zeros_like(a);
                let cols = ga.cols();
                ga.data[r * cols + c] = g.item();
                self.accumulate(a, ga);
            }
            Op::GatherScale {
                input,
                indices,
                scale,
            } => {
                let mut ga = self.zeros_like(input);
                for ((&idx, &s), &gv) in indices.iter().zip(scale.iter()).zip(&g.data) {
                    ga.data[idx] += s * gv;
                }
                self.accumulate(input, ga);
            }
            Op::StraightThrough(a) => self.accumulate(a, g.clone()),
        }
    }
}

impl Tensor {
    fn scalar_unchecked(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted log-sum-exp of a slice.
pub fn log_sum_exp_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// g (m×n) @ bᵀ where b is (k×n) → (m×k).
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (g.shape[0], g.shape[1]);
    let k = b.shape[0];
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g.data[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (o, p) in orow.iter_mut().zip(0..k) {
            let brow = &b.data[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            *o += acc;
        }
    }
    Tensor {
        shape: vec![m, k],
        data: out,
    }
}

/// aᵀ @ g where a is (m×k), g is (m×n) → (k×n).
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = g.shape[1];
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let grow = &g.data[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    Tensor {
        shape: vec![k, n],
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_rejects_shape_data_mismatch() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0, 2.0]),
            Err(TensorError::DataLength { .. })
        ));
    }

    #[test]
    fn tensor_rejects_non_finite() {
        assert!(matches!(
            Tensor::vector(vec![1.0, f64::NAN]),
            Err(TensorError::NonFinite { .. })
        ));
        assert!(matches!(
            Tensor::vector(vec![f64::INFINITY]),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn log_sum_exp_is_stable_for_large_negatives() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[-1000.0, -1000.0]));
        let y = g.log_sum_exp(x);
        let expected = -1000.0 + 2.0_f64.ln();
        assert!((g.value(y).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = g.input(t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let y = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(y).data(), g.value(a).data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 3], &[0.0; 6]));
        let b = g.input(t(&[2, 3], &[0.0; 6]));
        match g.matmul(a, b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn backward_of_x_times_x() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[3.0]));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn gradient_of_softmax_sum_is_zero() {
        let mut g = Graph::new();
        let x = g.input(t(&[4], &[0.3, -1.2, 2.0, 0.5]));
        let s = g.softmax(x).unwrap();
        let y = g.sum(s);
        g.backward(y).unwrap();
        for &v in g.grad(x).unwrap().data() {
            assert!(v.abs() < 1e-12, "softmax rows sum to one, grad {v}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let y = g.add(x, x).unwrap();
        assert!(matches!(
            g.backward(y),
            Err(TensorError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut g = Graph::new();
        let x = g.input(t(&[3, 4], &data));
        let s = g.log_softmax(x).unwrap();
        let sq = g.square(s);
        let y = g.sum(sq);
        g.backward(y).unwrap();
        let g1 = g.grad(x).unwrap().data().to_vec();
        g.backward(y).unwrap();
        let g2 = g.grad(x).unwrap().data().to_vec();
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[2.0]));
        let c = g.constant(t(&[1], &[5.0]));
        let y = g.mul(x, c).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().item(), 5.0);
    }

    #[test]
    fn max_reduce_ties_go_to_first_element() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[2.0, 2.0, 1.0]));
        let y = g.max(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        struct Halve;
        impl SampleTransform for Halve {
            fn name(&self) -> &str {
                "halve"
            }
            fn apply(&self, samples: &[f64]) -> Vec<f64> {
                samples.iter().map(|x| x * 0.5).collect()
            }
        }
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[2.0, 4.0, 6.0]));
        let h = g.straight_through(x, Arc::new(Halve)).unwrap();
        assert_eq!(g.value(h).data(), &[1.0, 2.0, 3.0]);
        let y = g.sum(h);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    /// Evaluate a scalar-valued graph function for finite differencing.
    fn eval_with(build: &dyn Fn(&mut Graph, NodeId) -> NodeId, shape: &[usize], x: &[f64]) -> f64 {
        let mut g = Graph::new();
        let inp = g.input(t(shape, x));
        let root = build(&mut g, inp);
        g.value(root).item()
    }

    fn check_op(name: &str, shape: &[usize], build: impl Fn(&mut Graph, NodeId) -> NodeId) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n: usize = shape.iter().product();
        for trial in 0..4 {
            // Keep away from |x| < 1e-6 so kinked ops (abs, max) stay smooth
            // at the probe points.
            let x: Vec<f64> = (0..n)
                .map(|_| loop {
                    let v: f64 = rng.gen_range(-2.0..2.0);
                    if v.abs() > 1e-3 {
                        break v;
                    }
                })
                .collect();
            let mut g = Graph::new();
            let inp = g.input(t(shape, &x));
            let root = build(&mut g, inp);
            g.backward(root).unwrap();
            let analytic = g.grad(inp).unwrap().data().to_vec();
            let numeric =
                gradcheck::central_difference(|v| eval_with(&build, shape, v), &x, 1e-5);
            let err = gradcheck::max_rel_error(&analytic, &numeric, 1e-6);
            assert!(
                err < 1e-4,
                "op {name} trial {trial}: rel err {err} (analytic {analytic:?} vs numeric {numeric:?})"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_op("tanh+sum", &[5], |g, x| {
            let y = g.tanh(x);
            g.sum(y)
        });
        check_op("sigmoid+mean", &[5], |g, x| {
            let y = g.sigmoid(x);
            g.mean(y)
        });
        check_op("exp+sum", &[4], |g, x| {
            let y = g.exp(x);
            g.sum(y)
        });
        check_op("square+sum", &[6], |g, x| {
            let y = g.square(x);
            g.sum(y)
        });
        check_op("abs+sum", &[6], |g, x| {
            let y = g.abs(x);
            g.sum(y)
        });
        check_op("mul_self+sum", &[4], |g, x| {
            let y = g.mul(x, x).unwrap();
            g.sum(y)
        });
        check_op("max_scalar+sum", &[6], |g, x| {
            let y = g.max_scalar(x, 0.25);
            g.sum(y)
        });
        check_op("softmax+square+sum", &[2, 3], |g, x| {
            let s = g.softmax(x).unwrap();
            let q = g.square(s);
            g.sum(q)
        });
        check_op("log_softmax+square+sum", &[2, 4], |g, x| {
            let s = g.log_softmax(x).unwrap();
            let q = g.square(s);
            g.sum(q)
        });
        check_op("log_sum_exp", &[5], |g, x| g.log_sum_exp(x));
        check_op("max_reduce", &[5], |g, x| g.max(x));
        check_op("matmul_chain", &[2, 3], |g, x| {
            let w = g.constant(t(&[3, 2], &[0.5, -1.0, 2.0, 0.25, -0.75, 1.5]));
            let y = g.matmul(x, w).unwrap();
            let z = g.tanh(y);
            g.sum(z)
        });
        check_op("rows+slices", &[3, 4], |g, x| {
            let r = g.row(x, 1).unwrap();
            let s = g.slice_cols(r, 1, 2).unwrap();
            let c = g.concat_rows(&[s, s]).unwrap();
            let a = g.at(c, 1, 0).unwrap();
            let sm = g.sum(c);
            g.add(a, sm).unwrap()
        });
        check_op("lse_scalars", &[3, 3], |g, x| {
            let a = g.at(x, 0, 0).unwrap();
            let b = g.at(x, 1, 1).unwrap();
            let c = g.at(x, 2, 2).unwrap();
            g.lse_scalars(&[a, b, c]).unwrap()
        });
        check_op("log_shifted", &[5], |g, x| {
            let sq = g.square(x);
            let sh = g.add_scalar(sq, 1.0);
            let l = g.log(sh).unwrap();
            g.sum(l)
        });
        check_op("gather_scale", &[6], |g, x| {
            let idx = Arc::new(vec![0usize, 2, 4, 4, 1, 5, 0, 3]);
            let scale = Arc::new(vec![0.5, 1.0, -1.5, 2.0, 0.25, 1.0, -0.5, 3.0]);
            let w = g.gather_scale(x, idx, scale, vec![2, 4]).unwrap();
            let sq = g.square(w);
            g.sum(sq)
        });
    }
}
