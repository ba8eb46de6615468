use std::collections::HashMap;

use super::tensor::{
    axis_extents, broadcast_shape, expand_to, gemm, reduce_to, sum_axis, zip_broadcast, Lu,
};
use super::{GraphError, Tensor};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Leaf overrides for one forward pass.
pub type Bindings = HashMap<NodeId, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Cos,
    Sin,
    Relu,
    Elu,
    Sqrt,
    Abs,
    Square,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Cos => "cos",
            Unary::Sin => "sin",
            Unary::Relu => "relu",
            Unary::Elu => "elu",
            Unary::Sqrt => "sqrt",
            Unary::Abs => "abs",
            Unary::Square => "square",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Cos => x.cos(),
            Unary::Sin => x.sin(),
            Unary::Relu => x.max(0.0),
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Sqrt => x.sqrt(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
        }
    }

    /// d out / d x given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Cos => -x.sin(),
            Unary::Sin => x.cos(),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::Sqrt => 0.5 / y,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { value: Tensor, trainable: bool },
    Unary(Unary, NodeId),
    Binary(Binary, NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Transpose(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    MeanAxis(NodeId, usize),
    Reshape(NodeId, Vec<usize>),
    BroadcastTo(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Solve(NodeId, NodeId),
    Detach(NodeId),
    Conv2d(NodeId, NodeId),
    MaxPool2(NodeId),
    PairwiseL1(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Unary(u, _) => u.name(),
            Op::Binary(b, _, _) => b.name(),
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Clamp(..) => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Reshape(..) => "reshape",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Solve(..) => "solve",
            Op::Detach(_) => "detach",
            Op::Conv2d(..) => "conv2d",
            Op::MaxPool2(_) => "max_pool2",
            Op::PairwiseL1(..) => "pairwise_l1",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::Unary(_, a)
            | Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::Reshape(a, _)
            | Op::BroadcastTo(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Detach(a)
            | Op::MaxPool2(a) => vec![*a],
            Op::Slice { input, .. } => vec![*input],
            Op::Binary(_, a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Solve(a, b) | Op::Conv2d(a, b) | Op::PairwiseL1(a, b) => {
                vec![*a, *b]
            }
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

struct Node {
    op: Op,
    requires_grad: bool,
}

/// A recorded computation over tensors.
///
/// Nodes are appended in topological order; every input of a node refers to
/// an earlier node. Values are cached by [`Graph::forward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    // `None` for leaves evaluated at their default value.
    values: Vec<Option<Tensor>>,
    evaluated: bool,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.grads.iter()
    }
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

    fn push(&mut self, op: Op) -> NodeId {
        let id = self.nodes.len();
        let mut requires_grad = false;
        for input in op.inputs() {
            assert!(input.0 < id, "node input {} is not an earlier node", input.0);
            requires_grad |= self.nodes[input.0].requires_grad;
        }
        match &op {
            Op::Leaf { trainable, .. } => requires_grad = *trainable,
            Op::Detach(_) => requires_grad = false,
            _ => {}
        }
        self.nodes.push(Node { op, requires_grad });
        self.values.push(None);
        self.evaluated = false;
        NodeId(id)
    }

    /// A leaf with a default value. Trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.push(Op::Leaf { value, trainable })
    }

    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Ids of all trainable leaves, in insertion order.
    pub fn parameters(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf { trainable: true, .. }))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Default value of a leaf node.
    pub fn leaf_value(&self, id: NodeId) -> Option<&Tensor> {
        match &self.nodes.get(id.0)?.op {
            Op::Leaf { value, .. } => Some(value),
            _ => None,
        }
    }

    /// Replaces the default value of a leaf. Invalidates cached values.
    pub fn set_leaf_value(&mut self, id: NodeId, value: Tensor) -> Result<(), GraphError> {
        match self.nodes.get_mut(id.0).map(|n| &mut n.op) {
            Some(Op::Leaf { value: v, .. }) => {
                *v = value;
                self.evaluated = false;
                Ok(())
            }
            Some(_) => Err(GraphError::BindingToNonLeaf(id.0)),
            None => Err(GraphError::UnknownNode(id.0)),
        }
    }

    fn unary(&mut self, u: Unary, a: NodeId) -> NodeId {
        self.push(Op::Unary(u, a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Neg, a)
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Log, a)
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Tanh, a)
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Cos, a)
    }
    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sin, a)
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Relu, a)
    }
    pub fn elu(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Elu, a)
    }
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sqrt, a)
    }
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Abs, a)
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Square, a)
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Binary(Binary::Add, a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Binary(Binary::Sub, a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Binary(Binary::Mul, a, b))
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Binary(Binary::Div, a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    /// `a bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMulNt(a, b))
    }
    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }
    /// `a * k` for a constant `k`.
    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.push(Op::Scale(a, k))
    }
    /// `a + k` for a constant `k`.
    pub fn offset(&mut self, a: NodeId, k: f64) -> NodeId {
        self.push(Op::Offset(a, k))
    }
    /// Elementwise clamp to `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Op::Clamp(a, lo, hi))
    }
    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }
    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::SumAxis(a, axis))
    }
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::MeanAxis(a, axis))
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(a, shape.to_vec()))
    }
    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::BroadcastTo(a, shape.to_vec()))
    }
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat(inputs.to_vec(), axis))
    }
    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        self.push(Op::Slice {
            input,
            axis,
            start,
            end,
        })
    }
    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }
    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }
    /// `X` with `A X = B`, differentiated with the adjoint rule.
    pub fn solve(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Solve(a, b))
    }
    /// Identity in the forward pass, blocks gradients in the backward pass.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Detach(a))
    }
    /// Same-padded stride-1 convolution. Input `[n, h, w, c_in]`, kernel
    /// `[kh, kw, c_in, c_out]` with odd `kh`, `kw`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> NodeId {
        self.push(Op::Conv2d(input, kernel))
    }
    /// 2×2 stride-2 max pooling with same padding: `[n, h, w, c]` to
    /// `[n, ceil(h/2), ceil(w/2), c]`.
    pub fn max_pool2(&mut self, input: NodeId) -> NodeId {
        self.push(Op::MaxPool2(input))
    }

    /// `out[i][j] = Σ_k |a[i][k] - b[j][k]|` for matrices with equal widths.
    pub fn pairwise_l1(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::PairwiseL1(a, b))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        match &self.values[id.0] {
            Some(t) => t,
            None => match &self.nodes[id.0].op {
                Op::Leaf { value, .. } => value,
                _ => unreachable!("value requested before evaluation"),
            },
        }
    }

    /// Cached value of a node from the last forward pass.
    pub fn value(&self, id: NodeId) -> Result<&Tensor, GraphError> {
        if id.0 >= self.nodes.len() {
            return Err(GraphError::UnknownNode(id.0));
        }
        if !self.evaluated {
            return Err(GraphError::NotEvaluated);
        }
        Ok(self.val(id))
    }

    /// Forward pass with leaf defaults.
    pub fn eval(&mut self) -> Result<(), GraphError> {
        self.forward(&Bindings::new())
    }

    /// Evaluates every node in order, caching values. Bound leaves take the
    /// supplied tensors for this pass only.
    pub fn forward(&mut self, bindings: &Bindings) -> Result<(), GraphError> {
        self.evaluated = false;
        for (id, _) in bindings.iter() {
            match self.nodes.get(id.0) {
                None => return Err(GraphError::UnknownNode(id.0)),
                Some(n) if !matches!(n.op, Op::Leaf { .. }) => {
                    return Err(GraphError::BindingToNonLeaf(id.0))
                }
                _ => {}
            }
        }
        for i in 0..self.nodes.len() {
            let v = if let Op::Leaf { .. } = self.nodes[i].op {
                bindings.get(&NodeId(i)).cloned()
            } else {
                Some(self.compute(i)?)
            };
            self.values[i] = v;
        }
        self.evaluated = true;
        Ok(())
    }

    fn mismatch(&self, i: usize, expected: impl Into<String>, actual: impl Into<String>) -> GraphError {
        GraphError::ShapeMismatch {
            node: i,
            op: self.nodes[i].op.name(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    fn compute(&self, i: usize) -> Result<Tensor, GraphError> {
        let op = &self.nodes[i].op;
        Ok(match op {
            Op::Leaf { .. } => unreachable!(),
            Op::Unary(u, a) => {
                let u = *u;
                self.val(*a).map(|x| u.apply(x))
            }
            Op::Binary(b, x, y) => {
                let (x, y) = (self.val(*x), self.val(*y));
                let shape = broadcast_shape(x.shape(), y.shape()).ok_or_else(|| {
                    self.mismatch(
                        i,
                        format!("shape broadcastable with {:?}", x.shape()),
                        format!("{:?}", y.shape()),
                    )
                })?;
                match b {
                    Binary::Add => zip_broadcast(x, y, &shape, |p, q| p + q),
                    Binary::Sub => zip_broadcast(x, y, &shape, |p, q| p - q),
                    Binary::Mul => zip_broadcast(x, y, &shape, |p, q| p * q),
                    Binary::Div => zip_broadcast(x, y, &shape, |p, q| p / q),
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                    return Err(self.mismatch(
                        i,
                        format!("[_, k] x [k, _] with lhs {:?}", a.shape()),
                        format!("rhs {:?}", b.shape()),
                    ));
                }
                a.matmul(b)
            }
            Op::MatMulNt(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
                    return Err(self.mismatch(
                        i,
                        format!("[_, k] x [_, k] with lhs {:?}", a.shape()),
                        format!("rhs {:?}", b.shape()),
                    ));
                }
                a.matmul_nt(b)
            }
            Op::Transpose(a) => {
                let a = self.val(*a);
                if a.rank() != 2 {
                    return Err(self.mismatch(i, "rank 2", format!("{:?}", a.shape())));
                }
                a.transpose()
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.val(*a).map(|x| x * k)
            }
            Op::Offset(a, k) => {
                let k = *k;
                self.val(*a).map(|x| x + k)
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.val(*a).map(|x| x.clamp(lo, hi))
            }
            Op::Sum(a) => Tensor::scalar(self.val(*a).sum()),
            Op::Mean(a) => {
                let a = self.val(*a);
                Tensor::scalar(a.sum() / a.numel() as f64)
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let a = self.val(*a);
                if *axis >= a.rank() {
                    return Err(self.mismatch(
                        i,
                        format!("rank > {axis}"),
                        format!("{:?}", a.shape()),
                    ));
                }
                let mut s = sum_axis(a, *axis);
                if let Op::MeanAxis(..) = op {
                    let n = a.shape()[*axis] as f64;
                    s.data_mut().iter_mut().for_each(|x| *x /= n);
                }
                s
            }
            Op::Reshape(a, shape) => {
                let a = self.val(*a);
                a.clone().reshape(shape).map_err(|_| {
                    self.mismatch(
                        i,
                        format!("{} elements for {:?}", shape.iter().product::<usize>(), shape),
                        format!("{:?}", a.shape()),
                    )
                })?
            }
            Op::BroadcastTo(a, shape) => {
                let a = self.val(*a);
                match broadcast_shape(a.shape(), shape) {
                    Some(s) if &s == shape => expand_to(a, shape),
                    _ => {
                        return Err(self.mismatch(
                            i,
                            format!("shape broadcastable to {shape:?}"),
                            format!("{:?}", a.shape()),
                        ))
                    }
                }
            }
            Op::Concat(xs, axis) => self.concat_values(i, xs, *axis)?,
            Op::Slice {
                input,
                axis,
                start,
                end,
            } => {
                let a = self.val(*input);
                if *axis >= a.rank() || start > end || *end > a.shape()[*axis] {
                    return Err(self.mismatch(
                        i,
                        format!("axis {axis} with at least {end} entries"),
                        format!("{:?}", a.shape()),
                    ));
                }
                slice_values(a, *axis, *start, *end)
            }
            Op::Softmax(a) | Op::LogSoftmax(a) => {
                let a = self.val(*a);
                if a.rank() == 0 {
                    return Err(self.mismatch(i, "rank >= 1", "rank 0"));
                }
                softmax_last(a, matches!(op, Op::LogSoftmax(_)))
            }
            Op::Solve(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.rank() != 2 || a.rows() != a.cols() {
                    return Err(self.mismatch(i, "square matrix", format!("{:?}", a.shape())));
                }
                if b.rank() != 2 || b.rows() != a.rows() {
                    return Err(self.mismatch(
                        i,
                        format!("[{}, _] right-hand side", a.rows()),
                        format!("{:?}", b.shape()),
                    ));
                }
                let lu = Lu::factor(a).ok_or(GraphError::SingularMatrix { node: i })?;
                lu.solve(b)
            }
            Op::Detach(a) => self.val(*a).clone(),
            Op::Conv2d(x, k) => {
                let (x, k) = (self.val(*x), self.val(*k));
                if x.rank() != 4
                    || k.rank() != 4
                    || k.shape()[2] != x.shape()[3]
                    || k.shape()[0] % 2 == 0
                    || k.shape()[1] % 2 == 0
                {
                    return Err(self.mismatch(
                        i,
                        format!("input [n,h,w,c] and odd kernel [kh,kw,c,o]; input {:?}", x.shape()),
                        format!("kernel {:?}", k.shape()),
                    ));
                }
                conv2d_forward(x, k)
            }
            Op::MaxPool2(x) => {
                let x = self.val(*x);
                if x.rank() != 4 {
                    return Err(self.mismatch(i, "rank 4 [n,h,w,c]", format!("{:?}", x.shape())));
                }
                max_pool2_forward(x)
            }
            Op::PairwiseL1(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
                    return Err(self.mismatch(
                        i,
                        format!("matrices of equal width; left {:?}", a.shape()),
                        format!("right {:?}", b.shape()),
                    ));
                }
                let mut out = Tensor::zeros(&[a.rows(), b.rows()]);
                for r in 0..a.rows() {
                    for c in 0..b.rows() {
                        let d = a.row_slice(r).iter().zip(b.row_slice(c)).map(|(x, y)| (x - y).abs()).sum();
                        out.set(r, c, d);
                    }
                }
                out
            }
        })
    }

    fn concat_values(&self, i: usize, xs: &[NodeId], axis: usize) -> Result<Tensor, GraphError> {
        let first = match xs.first() {
            Some(f) => self.val(*f),
            None => return Err(self.mismatch(i, "at least one input", "none")),
        };
        if axis >= first.rank() {
            return Err(self.mismatch(i, format!("rank > {axis}"), format!("{:?}", first.shape())));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for x in xs {
            let t = self.val(*x);
            let ok = t.rank() == first.rank()
                && (0..t.rank()).all(|d| d == axis || t.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(self.mismatch(
                    i,
                    format!("shapes matching {:?} off axis {axis}", first.shape()),
                    format!("{:?}", t.shape()),
                ));
            }
            shape[axis] += t.shape()[axis];
        }
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for x in xs {
                let t = self.val(*x);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::new(shape, data)
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    /// Leaves not on a path to the loss get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, GraphError> {
        if loss.0 >= self.nodes.len() {
            return Err(GraphError::UnknownNode(loss.0));
        }
        if !self.evaluated {
            return Err(GraphError::NotEvaluated);
        }
        let lv = self.val(loss);
        if lv.numel() != 1 {
            return Err(GraphError::NonScalarLoss {
                node: loss.0,
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf { .. } = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf {
                trainable: true, ..
            } = &node.op
            {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.val(NodeId(i)).shape()));
                debug_assert_eq!(g.shape(), self.val(NodeId(i)).shape());
                out.grads.insert(NodeId(i), g);
            }
        }
        Ok(out)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), GraphError> {
        let out = self.val(NodeId(i));
        match &self.nodes[i].op {
            Op::Leaf { .. } | Op::Detach(_) => {}
            Op::Unary(u, a) => {
                let x = self.val(*a);
                let mut d = g.clone();
                for ((d, &xv), &yv) in d.data_mut().iter_mut().zip(x.data()).zip(out.data()) {
                    *d *= u.derivative(xv, yv);
                }
                accumulate(grads, *a, d);
            }
            Op::Binary(b, x, y) => {
                let (xv, yv) = (self.val(*x), self.val(*y));
                let shape = out.shape();
                if self.wants(*x) {
                    let dx = match b {
                        Binary::Add | Binary::Sub => g.clone(),
                        Binary::Mul => zip_broadcast(g, yv, shape, |gi, q| gi * q),
                        Binary::Div => zip_broadcast(g, yv, shape, |gi, q| gi / q),
                    };
                    accumulate(grads, *x, reduce_to(&dx, xv.shape()));
                }
                if self.wants(*y) {
                    let dy = match b {
                        Binary::Add => g.clone(),
                        Binary::Sub => g.map(|v| -v),
                        Binary::Mul => zip_broadcast(g, xv, shape, |gi, p| gi * p),
                        Binary::Div => {
                            let t = zip_broadcast(g, out, shape, |gi, o| gi * o);
                            zip_broadcast(&t, yv, shape, |v, q| -v / q)
                        }
                    };
                    accumulate(grads, *y, reduce_to(&dy, yv.shape()));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut d, 0.0);
                    accumulate(grads, *a, Tensor::matrix(m, k, d));
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut d, 0.0);
                    accumulate(grads, *b, Tensor::matrix(k, n, d));
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.wants(*a) {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), false, &mut d, 0.0);
                    accumulate(grads, *a, Tensor::matrix(m, k, d));
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), true, av.data(), false, &mut d, 0.0);
                    accumulate(grads, *b, Tensor::matrix(n, k, d));
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Scale(a, k) => {
                let k = *k;
                accumulate(grads, *a, g.map(|v| v * k));
            }
            Op::Offset(a, _) => accumulate(grads, *a, g.clone()),
            Op::Clamp(a, lo, hi) => {
                let x = self.val(*a);
                let mut d = g.clone();
                for (d, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    if xv < *lo || xv > *hi {
                        *d = 0.0;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::Sum(a) | Op::Mean(a) => {
                let x = self.val(*a);
                let mut v = g.item();
                if let Op::Mean(_) = self.nodes[i].op {
                    v /= x.numel() as f64;
                }
                accumulate(grads, *a, Tensor::full(x.shape(), v));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let x = self.val(*a);
                let mut d = expand_to(g, x.shape());
                if let Op::MeanAxis(..) = self.nodes[i].op {
                    let n = x.shape()[*axis] as f64;
                    d.data_mut().iter_mut().for_each(|v| *v /= n);
                }
                accumulate(grads, *a, d);
            }
            Op::Reshape(a, _) => {
                let x = self.val(*a);
                accumulate(grads, *a, g.clone().reshape(x.shape())?);
            }
            Op::BroadcastTo(a, _) => {
                let x = self.val(*a);
                accumulate(grads, *a, reduce_to(g, x.shape()));
            }
            Op::Concat(xs, axis) => {
                let mut start = 0;
                for x in xs {
                    let len = self.val(*x).shape()[*axis];
                    if self.wants(*x) {
                        accumulate(grads, *x, slice_values(g, *axis, start, start + len));
                    }
                    start += len;
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                end,
            } => {
                let x = self.val(*input);
                let mut d = Tensor::zeros(x.shape());
                let (outer, len, inner) = axis_extents(x.shape(), *axis);
                let w = end - start;
                for o in 0..outer {
                    let src = &g.data()[o * w * inner..(o + 1) * w * inner];
                    let dst0 = (o * len + start) * inner;
                    d.data_mut()[dst0..dst0 + w * inner].copy_from_slice(src);
                }
                accumulate(grads, *input, d);
            }
            Op::Softmax(a) => {
                let n = *out.shape().last().unwrap();
                let mut d = vec![0.0; out.numel()];
                for (r, (gr, yr)) in g.data().chunks(n).zip(out.data().chunks(n)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        d[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::LogSoftmax(a) => {
                let n = *out.shape().last().unwrap();
                let mut d = vec![0.0; out.numel()];
                for (r, (gr, yr)) in g.data().chunks(n).zip(out.data().chunks(n)).enumerate() {
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        d[r * n + j] = gr[j] - yr[j].exp() * total;
                    }
                }
                accumulate(grads, *a, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::Solve(a, b) => {
                let av = self.val(*a);
                let lu_t = Lu::factor(&av.transpose()).ok_or(GraphError::SingularMatrix { node: i })?;
                let gb = lu_t.solve(g);
                if self.wants(*a) {
                    // dA = -A^{-T} G X^T
                    let (n, m) = (gb.rows(), gb.cols());
                    let mut d = vec![0.0; n * n];
                    gemm(n, m, n, gb.data(), false, out.data(), true, &mut d, 0.0);
                    d.iter_mut().for_each(|v| *v = -*v);
                    accumulate(grads, *a, Tensor::matrix(n, n, d));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::Conv2d(x, k) => {
                let (xv, kv) = (self.val(*x), self.val(*k));
                let (dx, dk) = conv2d_backward(xv, kv, g, self.wants(*x));
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if self.wants(*k) {
                    accumulate(grads, *k, dk);
                }
            }
            Op::MaxPool2(x) => {
                let xv = self.val(*x);
                accumulate(grads, *x, max_pool2_backward(xv, g));
            }
            Op::PairwiseL1(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let mut da = Tensor::zeros(av.shape());
                let mut db = Tensor::zeros(bv.shape());
                for r in 0..av.rows() {
                    for c in 0..bv.rows() {
                        let gij = g.at(r, c);
                        for k in 0..av.cols() {
                            let diff = av.at(r, k) - bv.at(c, k);
                            let sign = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            da.data_mut()[r * av.cols() + k] += gij * sign;
                            db.data_mut()[c * av.cols() + k] -= gij * sign;
                        }
                    }
                }
                if self.wants(*a) {
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, db);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn slice_values(a: &Tensor, axis: usize, start: usize, end: usize) -> Tensor {
    let (outer, len, inner) = axis_extents(a.shape(), axis);
    let w = end - start;
    let mut data = Vec::with_capacity(outer * w * inner);
    for o in 0..outer {
        let s = (o * len + start) * inner;
        data.extend_from_slice(&a.data()[s..s + w * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = w;
    Tensor::new(shape, data).expect("slice shape")
}

fn softmax_last(a: &Tensor, log: bool) -> Tensor {
    let n = *a.shape().last().unwrap();
    let mut out = a.clone();
    if n == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v -= max;
            total += v.exp();
        }
        if log {
            let lt = total.ln();
            row.iter_mut().for_each(|v| *v -= lt);
        } else {
            row.iter_mut().for_each(|v| *v = v.exp() / total);
        }
    }
    out
}

/// Patch matrix `[n*h*w, kh*kw*c]` of a same-padded stride-1 convolution.
fn im2col(x: &Tensor, kh: usize, kw: usize) -> Vec<f64> {
    let [n, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (ph, pw) = (kh / 2, kw / 2);
    let cols = kh * kw * c;
    let mut out = vec![0.0; n * h * w * cols];
    let xd = x.data();
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let row = ((b * h + i) * w + j) * cols;
                for di in 0..kh {
                    let si = i as isize + di as isize - ph as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for dj in 0..kw {
                        let sj = j as isize + dj as isize - pw as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let src = ((b * h + si as usize) * w + sj as usize) * c;
                        let dst = row + (di * kw + dj) * c;
                        out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

fn conv2d_forward(x: &Tensor, k: &Tensor) -> Tensor {
    let [n, h, w, _] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [kh, kw, c, o] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
    let cols = im2col(x, kh, kw);
    let rows = n * h * w;
    let mut out = vec![0.0; rows * o];
    gemm(rows, kh * kw * c, o, &cols, false, k.data(), false, &mut out, 0.0);
    Tensor::new(vec![n, h, w, o], out).expect("conv shape")
}

fn conv2d_backward(x: &Tensor, k: &Tensor, g: &Tensor, want_x: bool) -> (Option<Tensor>, Tensor) {
    let [n, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [kh, kw, _, o] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
    let rows = n * h * w;
    let width = kh * kw * c;
    let cols = im2col(x, kh, kw);
    let mut dk = vec![0.0; width * o];
    gemm(width, rows, o, &cols, true, g.data(), false, &mut dk, 0.0);
    let dk = Tensor::new(k.shape().to_vec(), dk).expect("kernel grad shape");
    if !want_x {
        return (None, dk);
    }
    let mut dcols = vec![0.0; rows * width];
    gemm(rows, o, width, g.data(), false, k.data(), true, &mut dcols, 0.0);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dx = vec![0.0; x.numel()];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let row = ((b * h + i) * w + j) * width;
                for di in 0..kh {
                    let si = i as isize + di as isize - ph as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for dj in 0..kw {
                        let sj = j as isize + dj as isize - pw as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + si as usize) * w + sj as usize) * c;
                        let src = row + (di * kw + dj) * c;
                        for ch in 0..c {
                            dx[dst + ch] += dcols[src + ch];
                        }
                    }
                }
            }
        }
    }
    (Some(Tensor::new(x.shape().to_vec(), dx).expect("input grad shape")), dk)
}

/// Index into `x` of the maximum in each pooling window, row-major over the
/// output.
fn max_pool2_argmax(x: &Tensor) -> (Vec<usize>, Vec<usize>) {
    let [n, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let xd = x.data();
    let mut idx = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for si in 2 * i..(2 * i + 2).min(h) {
                        for sj in 2 * j..(2 * j + 2).min(w) {
                            let at = ((b * h + si) * w + sj) * c + ch;
                            if best == usize::MAX || xd[at] > best_v {
                                best = at;
                                best_v = xd[at];
                            }
                        }
                    }
                    idx.push(best);
                }
            }
        }
    }
    (idx, vec![n, oh, ow, c])
}

fn max_pool2_forward(x: &Tensor) -> Tensor {
    let (idx, shape) = max_pool2_argmax(x);
    let data = idx.iter().map(|&i| x.data()[i]).collect();
    Tensor::new(shape, data).expect("pool shape")
}

fn max_pool2_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let (idx, _) = max_pool2_argmax(x);
    let mut d = Tensor::zeros(x.shape());
    for (&i, &gv) in idx.iter().zip(g.data()) {
        d.data_mut()[i] += gv;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        g.eval().unwrap();
        assert_eq!(g.value(y).unwrap().item(), 9.0);
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn cos_at_zero_is_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.cos(x);
        g.eval().unwrap();
        assert_eq!(g.value(y).unwrap().item(), 1.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x);
        g.eval().unwrap();
        for v in g.value(y).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_sum_gradient_is_broadcast_of_v() {
        // loss = sum(W v), W: 2x3, v: 3x1 fixed -> dW[i][j] = v[j]
        let mut g = Graph::new();
        let w = g.parameter(Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let v = g.constant(Tensor::column(vec![1.0, -2.0, 3.0]));
        let wv = g.matmul(w, v);
        let loss = g.sum(wv);
        g.eval().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, -2.0, 3.0, 1.0, -2.0, 3.0]);
    }

    #[test]
    fn fused_transpose_product_matches_explicit_transpose() {
        let a = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.5]);
        let b = Tensor::matrix(4, 3, (0..12).map(|v| v as f64 * 0.3 - 1.0).collect());
        let mut g = Graph::new();
        let (x, y) = (g.parameter(a.clone()), g.parameter(b.clone()));
        let fused = g.matmul_nt(x, y);
        let yt = g.transpose(y);
        let plain = g.matmul(x, yt);
        let fs = g.sum(fused);
        let ps = g.sum(plain);
        g.eval().unwrap();
        assert_eq!(g.value(fused).unwrap(), g.value(plain).unwrap());
        let gf = g.backward(fs).unwrap();
        let gp = g.backward(ps).unwrap();
        assert_eq!(gf.get(x), gp.get(x));
        assert_eq!(gf.get(y), gp.get(y));
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::scalar(1.0));
        let y = g.square(x);
        assert_eq!(g.backward(y).unwrap_err(), GraphError::NotEvaluated);
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::row(vec![1.0, 2.0]));
        let y = g.exp(x);
        g.eval().unwrap();
        assert!(matches!(g.backward(y), Err(GraphError::NonScalarLoss { .. })));
    }

    #[test]
    fn shape_error_names_node() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let c = g.matmul(a, b);
        match g.eval().unwrap_err() {
            GraphError::ShapeMismatch { node, op, .. } => {
                assert_eq!(node, c.index());
                assert_eq!(op, "matmul");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::scalar(2.0));
        let unused = g.parameter(Tensor::row(vec![1.0, 2.0]));
        let y = g.square(x);
        g.eval().unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::scalar(2.0));
        let d = g.detach(x);
        let y = g.mul(x, d);
        g.eval().unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn bindings_override_defaults_for_one_pass() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::scalar(2.0));
        let y = g.square(x);
        let mut b = Bindings::new();
        b.insert(x, Tensor::scalar(5.0));
        g.forward(&b).unwrap();
        assert_eq!(g.value(y).unwrap().item(), 25.0);
        g.eval().unwrap();
        assert_eq!(g.value(y).unwrap().item(), 4.0);
        b.insert(y, Tensor::scalar(0.0));
        assert_eq!(g.forward(&b).unwrap_err(), GraphError::BindingToNonLeaf(y.index()));
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]));
        let b = g.constant(Tensor::matrix(2, 1, vec![5., 6.]));
        let c = g.concat(&[a, b], 1);
        let s = g.slice(c, 1, 2, 3);
        g.eval().unwrap();
        assert_eq!(g.value(c).unwrap().data(), &[1., 2., 5., 3., 4., 6.]);
        assert_eq!(g.value(s).unwrap().data(), &[5., 6.]);
    }

    #[test]
    fn max_pool_same_padding_sizes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 7, 7, 2]));
        let p = g.max_pool2(x);
        g.eval().unwrap();
        assert_eq!(g.value(p).unwrap().shape(), &[1, 4, 4, 2]);
    }

    #[test]
    fn singular_solve_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[2, 1]));
        let x = g.solve(a, b);
        assert_eq!(g.eval().unwrap_err(), GraphError::SingularMatrix { node: x.index() });
    }

    #[test]
    fn pairwise_l1_values_and_gradients() {
        let mut g = Graph::new();
        let a = g.parameter(Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.25]]));
        let b = g.parameter(Tensor::from_rows(&[vec![1.0, 1.5], vec![-0.5, 0.3]]));
        let d = g.pairwise_l1(a, b);
        g.eval().unwrap();
        assert_eq!(g.value(d).unwrap().at(1, 0), 1.0 + 2.5);
        let w = g.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.0, 0.7]]));
        let wd = g.mul(d, w);
        let loss = g.sum(wd);
        assert!(crate::autodiff::grad_check(&mut g, loss, 1e-6).unwrap() < 1e-6);
    }
}
