//! Expression graphs over a closed set of differentiable primitives.
//!
//! A [`Graph`] is built once with static shapes, then evaluated any number of
//! times against different leaf bindings (see [`crate::autodiff`]). Nodes are
//! appended in topological order, so every node's inputs precede it.

use std::collections::HashMap;

use crate::error::GraphError;
use crate::tensor::{broadcast_shape, numel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf(String),
    /// Fixed data baked into the graph (masks, one-hot labels).
    Constant(Vec<f64>),
    Add,
    Sub,
    Mul,
    /// Matrix product of the (optionally transposed) operands.
    MatMul { transpose_a: bool, transpose_b: bool },
    Conv2d { stride: usize, padding: usize },
    Relu,
    /// Inputs: x, scale, shift, running mean, running variance.
    BatchNorm { eps: f64 },
    /// `None` reduces to a scalar, `Some(axis)` keeps the axis with length 1.
    Mean(Option<usize>),
    Sum(Option<usize>),
    Max(Option<usize>),
    Exp,
    Log,
    Sqrt,
    Neg,
    Reshape,
    Concat(usize),
    Slice { axis: usize, start: usize, end: usize },
    /// Divide by the Euclidean norm of the last axis.
    L2Normalize,
    AddScalar(f64),
    MulScalar(f64),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Constant(_) => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::Max(_) => "max",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Neg => "negate",
            Op::Reshape => "reshape",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::L2Normalize => "l2_normalize",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
    outputs: Vec<(String, NodeId)>,
}

type Built = Result<NodeId, GraphError>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a named output for [`crate::autodiff::forward_outputs`].
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    fn check(&self, ids: &[NodeId]) -> Result<(), GraphError> {
        match ids.iter().find(|id| id.0 >= self.nodes.len()) {
            Some(id) => Err(GraphError::BadNode(id.0)),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, inputs, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, ids: &[NodeId]) -> GraphError {
        GraphError::Shape { op, shapes: ids.iter().map(|id| self.shape(*id).to_vec()).collect() }
    }

    pub fn leaf(&mut self, name: &str, shape: &[usize]) -> Built {
        if self.leaves.contains_key(name) {
            return Err(GraphError::DuplicateLeaf(name.to_string()));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(GraphError::Shape { op: "leaf", shapes: vec![shape.to_vec()] });
        }
        let id = self.push(Op::Leaf(name.to_string()), vec![], shape.to_vec());
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Built {
        if numel(shape) != data.len() || data.iter().any(|v| !v.is_finite()) {
            return Err(GraphError::Shape { op: "constant", shapes: vec![shape.to_vec()] });
        }
        Ok(self.push(Op::Constant(data), vec![], shape.to_vec()))
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId) -> Built {
        self.check(&[a, b])?;
        let name = op.name();
        let shape = broadcast_shape(self.shape(a), self.shape(b)).ok_or_else(|| self.shape_err(name, &[a, b]))?;
        Ok(self.push(op, vec![a, b], shape))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Built {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Built {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Built {
        self.binary(Op::Mul, a, b)
    }

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Built {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with either operand read transposed.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, transpose_a: bool, transpose_b: bool) -> Built {
        self.check(&[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let (m, ka) = if transpose_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if transpose_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        Ok(self.push(Op::MatMul { transpose_a, transpose_b }, vec![a, b], vec![m, n]))
    }

    /// `x: [n, c, h, w]`, `kernel: [o, c, kh, kw]`.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Built {
        self.check(&[x, kernel])?;
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] || stride == 0 {
            return Err(self.shape_err("conv2d", &[x, kernel]));
        }
        let (h, w) = (sx[2] + 2 * padding, sx[3] + 2 * padding);
        if sk[2] > h || sk[3] > w {
            return Err(self.shape_err("conv2d", &[x, kernel]));
        }
        let shape = vec![sx[0], sk[0], (h - sk[2]) / stride + 1, (w - sk[3]) / stride + 1];
        Ok(self.push(Op::Conv2d { stride, padding }, vec![x, kernel], shape))
    }

    fn unary(&mut self, op: Op, x: NodeId) -> Built {
        self.check(&[x])?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(op, vec![x], shape))
    }

    pub fn relu(&mut self, x: NodeId) -> Built {
        self.unary(Op::Relu, x)
    }

    pub fn exp(&mut self, x: NodeId) -> Built {
        self.unary(Op::Exp, x)
    }

    pub fn log(&mut self, x: NodeId) -> Built {
        self.unary(Op::Log, x)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Built {
        self.unary(Op::Sqrt, x)
    }

    pub fn neg(&mut self, x: NodeId) -> Built {
        self.unary(Op::Neg, x)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Built {
        self.unary(Op::AddScalar(c), x)
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> Built {
        self.unary(Op::MulScalar(c), x)
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Built {
        self.check(&[x])?;
        if self.shape(x).is_empty() {
            return Err(self.shape_err("l2_normalize", &[x]));
        }
        self.unary(Op::L2Normalize, x)
    }

    /// Per-channel batch normalization over axis 1 of a rank-2 or rank-4 input.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        running_mean: NodeId,
        running_var: NodeId,
        eps: f64,
    ) -> Built {
        let ins = [x, scale, shift, running_mean, running_var];
        self.check(&ins)?;
        let sx = self.shape(x);
        if !(sx.len() == 2 || sx.len() == 4) {
            return Err(self.shape_err("batch_norm", &ins));
        }
        let c = sx[1];
        if ins[1..].iter().any(|id| self.shape(*id) != [c]) {
            return Err(self.shape_err("batch_norm", &ins));
        }
        let shape = sx.to_vec();
        Ok(self.push(Op::BatchNorm { eps }, ins.to_vec(), shape))
    }

    fn reduce(&mut self, op: Op, x: NodeId, axis: Option<usize>) -> Built {
        self.check(&[x])?;
        let sx = self.shape(x).to_vec();
        let shape = match axis {
            None => vec![],
            Some(a) if a < sx.len() => {
                let mut s = sx;
                s[a] = 1;
                s
            }
            Some(a) => return Err(GraphError::Axis { op: op.name(), axis: a, rank: sx.len() }),
        };
        Ok(self.push(op, vec![x], shape))
    }

    pub fn sum(&mut self, x: NodeId, axis: Option<usize>) -> Built {
        self.reduce(Op::Sum(axis), x, axis)
    }

    pub fn mean(&mut self, x: NodeId, axis: Option<usize>) -> Built {
        self.reduce(Op::Mean(axis), x, axis)
    }

    /// Maximum; ties send the gradient to the first maximal element.
    pub fn max(&mut self, x: NodeId, axis: Option<usize>) -> Built {
        self.reduce(Op::Max(axis), x, axis)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Built {
        self.check(&[x])?;
        if numel(shape) != numel(self.shape(x)) {
            return Err(GraphError::Shape { op: "reshape", shapes: vec![self.shape(x).to_vec(), shape.to_vec()] });
        }
        Ok(self.push(Op::Reshape, vec![x], shape.to_vec()))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Built {
        self.check(xs)?;
        let first = xs.first().ok_or(GraphError::Shape { op: "concat", shapes: vec![] })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(GraphError::Axis { op: "concat", axis, rank: base.len() });
        }
        let mut total = 0;
        for id in xs {
            let s = self.shape(*id);
            let same = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(self.shape_err("concat", xs));
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Op::Concat(axis), xs.to_vec(), shape))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Built {
        self.check(&[x])?;
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(GraphError::Axis { op: "slice", axis, rank: sx.len() });
        }
        if start >= end || end > sx[axis] {
            return Err(self.shape_err("slice", &[x]));
        }
        let mut shape = sx;
        shape[axis] = end - start;
        Ok(self.push(Op::Slice { axis, start, end }, vec![x], shape))
    }

    // Composite helpers built from the primitives above.

    /// `x @ w + b` for `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Built {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Numerically stable log-sum-exp along `axis` (kept with length 1).
    pub fn log_sum_exp(&mut self, x: NodeId, axis: usize) -> Built {
        let m = self.max(x, Some(axis))?;
        let shifted = self.sub(x, m)?;
        let e = self.exp(shifted)?;
        let s = self.sum(e, Some(axis))?;
        let l = self.log(s)?;
        self.add(l, m)
    }

    /// Row-wise log-softmax of `[m, c]` logits.
    pub fn log_softmax(&mut self, logits: NodeId) -> Built {
        let lse = self.log_sum_exp(logits, 1)?;
        self.sub(logits, lse)
    }

    /// 2x2 average pooling with stride 2 on `[n, c, h, w]`.
    pub fn avg_pool2(&mut self, x: NodeId) -> Built {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(self.shape_err("avg_pool2", &[x]));
        }
        let (n, c, h2, w2) = (s[0], s[1], s[2] / 2, s[3] / 2);
        let r = self.reshape(x, &[n, c, h2, 2, w2, 2])?;
        let a = self.mean(r, Some(5))?;
        let b = self.mean(a, Some(3))?;
        self.reshape(b, &[n, c, h2, w2])
    }

    /// 2x2 max pooling with stride 2 on `[n, c, h, w]`.
    pub fn max_pool2(&mut self, x: NodeId) -> Built {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(self.shape_err("max_pool2", &[x]));
        }
        let (n, c, h2, w2) = (s[0], s[1], s[2] / 2, s[3] / 2);
        let r = self.reshape(x, &[n, c, h2, 2, w2, 2])?;
        let a = self.max(r, Some(5))?;
        let b = self.max(a, Some(3))?;
        self.reshape(b, &[n, c, h2, w2])
    }

    /// Mean over the spatial axes of `[n, c, h, w]`, giving `[n, c]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Built {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(self.shape_err("global_avg_pool", &[x]));
        }
        let r = self.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let m = self.mean(r, Some(2))?;
        self.reshape(m, &[s[0], s[1]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_inference() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[2, 3, 8, 8]).unwrap();
        let k = g.leaf("k", &[4, 3, 3, 3]).unwrap();
        let c = g.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(g.shape(c), &[2, 4, 8, 8]);
        let p = g.avg_pool2(c).unwrap();
        assert_eq!(g.shape(p), &[2, 4, 4, 4]);
        let gp = g.global_avg_pool(p).unwrap();
        assert_eq!(g.shape(gp), &[2, 4]);
        let s = g.sum(gp, None).unwrap();
        assert!(g.shape(s).is_empty());
        let strided = g.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(g.shape(strided), &[2, 4, 4, 4]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut g = Graph::new();
        let a = g.leaf("a", &[2, 3]).unwrap();
        let b = g.leaf("b", &[2, 3]).unwrap();
        assert!(g.matmul(a, b).is_err());
        assert!(matches!(g.leaf("a", &[1]), Err(GraphError::DuplicateLeaf(_))));
        assert!(g.slice(a, 1, 2, 2).is_err());
        assert!(matches!(g.sum(a, Some(2)), Err(GraphError::Axis { .. })));
        let c = g.leaf("c", &[4]).unwrap();
        assert!(g.add(a, c).is_err());
    }
}
