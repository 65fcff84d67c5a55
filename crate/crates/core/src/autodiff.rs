//! Graph evaluation, reverse-mode gradients and the finite-difference oracle.

use std::collections::HashMap;

use crate::error::GraphError;
use crate::graph::{Graph, NodeId, Op};
use crate::tensor::{for_each_broadcast, gemm, numel, split_axis, Element, MatRef, Tensor};

/// Leaf name to bound tensor.
pub type Bindings<'a, T> = HashMap<&'a str, &'a Tensor<T>>;

/// Leaf name to gradient, holding exactly the requested leaves.
pub type GradientMap<T> = HashMap<String, Tensor<T>>;

/// Batch-norm behaviour for a whole evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Normalize with statistics of the current batch.
    Train,
    /// Normalize with the bound running statistics.
    Eval,
}

/// Per-channel statistics one batch-norm node observed in train mode.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub node: NodeId,
    /// Leaf names bound to the running mean and variance inputs.
    pub running_mean: Option<String>,
    pub running_var: Option<String>,
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Number of values each channel was reduced over.
    pub count: usize,
}

/// Every node value from one forward pass.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    values: Vec<Tensor<T>>,
    pub batch_stats: Vec<BatchStats<T>>,
}

impl<T: Element> Evaluation<T> {
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn take(mut self, id: NodeId) -> Tensor<T> {
        std::mem::replace(&mut self.values[id.0], Tensor::scalar(T::zero()))
    }
}

fn leaf_name(graph: &Graph, id: NodeId) -> Option<String> {
    match &graph.node(id).op {
        Op::Leaf(name) => Some(name.clone()),
        _ => None,
    }
}

/// Evaluate every node of `graph`.
pub fn forward<T: Element>(graph: &Graph, bindings: &Bindings<'_, T>, mode: Mode) -> Result<Evaluation<T>, GraphError> {
    let mut values: Vec<Tensor<T>> = Vec::with_capacity(graph.len());
    let mut batch_stats = Vec::new();
    for (i, node) in graph.nodes().iter().enumerate() {
        let arg = |k: usize| &values[node.inputs[k].0];
        let out = match &node.op {
            Op::Leaf(name) => {
                let t = *bindings.get(name.as_str()).ok_or_else(|| GraphError::Unbound(name.clone()))?;
                if t.shape() != node.shape.as_slice() {
                    return Err(GraphError::BindingShape {
                        name: name.clone(),
                        expected: node.shape.clone(),
                        found: t.shape().to_vec(),
                    });
                }
                t.clone()
            }
            Op::Constant(data) => Tensor::from_parts(node.shape.clone(), data.iter().map(|&v| T::of(v)).collect()),
            Op::Add => binary(arg(0), arg(1), &node.shape, |a, b| a + b),
            Op::Sub => binary(arg(0), arg(1), &node.shape, |a, b| a - b),
            Op::Mul => binary(arg(0), arg(1), &node.shape, |a, b| a * b),
            Op::MatMul { transpose_a, transpose_b } => {
                let (a, b) = (mat(arg(0), *transpose_a), mat(arg(1), *transpose_b));
                let mut out = vec![T::zero(); numel(&node.shape)];
                gemm(a, b, T::zero(), &mut out);
                Tensor::from_parts(node.shape.clone(), out)
            }
            Op::Conv2d { stride, padding } => conv2d_forward(arg(0), arg(1), *stride, *padding, &node.shape),
            Op::Relu => arg(0).map(|v| if v > T::zero() { v } else { T::zero() }),
            Op::BatchNorm { eps } => {
                let (x, scale, shift) = (arg(0), arg(1), arg(2));
                let (mean, var) = match mode {
                    Mode::Train => {
                        let (m, v, c) = channel_stats(x);
                        batch_stats.push(BatchStats {
                            node: NodeId(i),
                            running_mean: leaf_name(graph, node.inputs[3]),
                            running_var: leaf_name(graph, node.inputs[4]),
                            mean: m.clone(),
                            var: v.clone(),
                            count: c,
                        });
                        (m, v)
                    }
                    Mode::Eval => (arg(3).data().to_vec(), arg(4).data().to_vec()),
                };
                batch_norm_apply(x, scale.data(), shift.data(), &mean, &var, T::of(*eps))
            }
            Op::Sum(axis) => reduce_sum(arg(0), *axis, &node.shape),
            Op::Mean(axis) => {
                let x = arg(0);
                let n = axis.map_or(x.len(), |a| x.shape()[a]);
                let inv = T::one() / T::of(n as f64);
                reduce_sum(x, *axis, &node.shape).map(|v| v * inv)
            }
            Op::Max(axis) => {
                let (vals, _) = reduce_max(arg(0), *axis);
                Tensor::from_parts(node.shape.clone(), vals)
            }
            Op::Exp => arg(0).map(|v| v.exp()),
            Op::Log => arg(0).map(|v| v.ln()),
            Op::Sqrt => arg(0).map(|v| v.sqrt()),
            Op::Neg => arg(0).map(|v| -v),
            Op::AddScalar(c) => {
                let c = T::of(*c);
                arg(0).map(|v| v + c)
            }
            Op::MulScalar(c) => {
                let c = T::of(*c);
                arg(0).map(|v| v * c)
            }
            Op::Reshape => Tensor::from_parts(node.shape.clone(), arg(0).data().to_vec()),
            Op::Concat(axis) => {
                let parts: Vec<&Tensor<T>> = node.inputs.iter().map(|id| &values[id.0]).collect();
                concat(&parts, *axis, &node.shape)
            }
            Op::Slice { axis, start, end } => slice(arg(0), *axis, *start, *end, &node.shape),
            Op::L2Normalize => {
                let x = arg(0);
                let d = *x.shape().last().expect("rank >= 1");
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(d) {
                    let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                    for v in row.iter_mut() {
                        *v = *v / norm;
                    }
                }
                Tensor::from_parts(node.shape.clone(), out)
            }
        };
        if !out.is_finite() {
            return Err(GraphError::NonFinite { node: i, op: node.op.name() });
        }
        values.push(out);
    }
    Ok(Evaluation { values, batch_stats })
}

/// Evaluate and return the graph's marked outputs by name.
pub fn forward_outputs<T: Element>(
    graph: &Graph,
    bindings: &Bindings<'_, T>,
    mode: Mode,
) -> Result<HashMap<String, Tensor<T>>, GraphError> {
    let eval = forward(graph, bindings, mode)?;
    Ok(graph.outputs().iter().map(|(name, id)| (name.clone(), eval.value(*id).clone())).collect())
}

/// Reverse-mode gradient of a scalar node with respect to the named leaves.
pub fn grad<T: Element>(
    graph: &Graph,
    output: NodeId,
    wrt: &[&str],
    bindings: &Bindings<'_, T>,
    mode: Mode,
) -> Result<GradientMap<T>, GraphError> {
    value_and_grad(graph, output, wrt, bindings, mode).map(|(_, g)| g)
}

/// Forward pass plus gradients, so callers can read the loss and batch statistics.
pub fn value_and_grad<T: Element>(
    graph: &Graph,
    output: NodeId,
    wrt: &[&str],
    bindings: &Bindings<'_, T>,
    mode: Mode,
) -> Result<(Evaluation<T>, GradientMap<T>), GraphError> {
    if output.0 >= graph.len() {
        return Err(GraphError::BadNode(output.0));
    }
    if numel(graph.shape(output)) != 1 || graph.shape(output).len() > 1 {
        return Err(GraphError::NonScalarOutput(graph.shape(output).to_vec()));
    }
    let mut targets = Vec::with_capacity(wrt.len());
    for name in wrt {
        targets.push(graph.leaf_id(name).ok_or_else(|| GraphError::UnknownLeaf(name.to_string()))?);
    }
    let eval = forward(graph, bindings, mode)?;
    let grads = backward(graph, &eval, output, &targets, mode)?;
    let map = wrt
        .iter()
        .zip(&targets)
        .map(|(name, id)| {
            let g = grads[id.0].clone().unwrap_or_else(|| Tensor::zeros(graph.shape(*id)));
            (name.to_string(), g)
        })
        .collect();
    Ok((eval, map))
}

fn backward<T: Element>(
    graph: &Graph,
    eval: &Evaluation<T>,
    output: NodeId,
    targets: &[NodeId],
    mode: Mode,
) -> Result<Vec<Option<Tensor<T>>>, GraphError> {
    let n = graph.len();
    // Only nodes between the targets and the output take part.
    let mut needs = vec![false; n];
    for t in targets {
        needs[t.0] = true;
    }
    for (i, node) in graph.nodes().iter().enumerate() {
        if node.inputs.iter().any(|id| needs[id.0]) {
            needs[i] = true;
        }
    }
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
    grads[output.0] = Some(Tensor::full(graph.shape(output), T::one()));

    for i in (0..=output.0).rev() {
        if !needs[i] {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        let node = graph.node(NodeId(i));
        let val = |k: usize| eval.value(node.inputs[k]);
        let want = |k: usize| needs[node.inputs[k].0];
        let mut contrib: Vec<(usize, Tensor<T>)> = Vec::new();
        match &node.op {
            Op::Leaf(_) | Op::Constant(_) => {
                grads[i] = Some(g);
                continue;
            }
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (val(0), val(1));
                if want(0) {
                    let ga = match node.op {
                        Op::Mul => unbroadcast(&g, a.shape(), b, &node.shape, |gv, bv| gv * bv, true),
                        _ => unbroadcast(&g, a.shape(), b, &node.shape, |gv, _| gv, true),
                    };
                    contrib.push((0, ga));
                }
                if want(1) {
                    let gb = match node.op {
                        Op::Mul => unbroadcast(&g, b.shape(), a, &node.shape, |gv, av| gv * av, false),
                        Op::Sub => unbroadcast(&g, b.shape(), a, &node.shape, |gv, _| -gv, false),
                        _ => unbroadcast(&g, b.shape(), a, &node.shape, |gv, _| gv, false),
                    };
                    contrib.push((1, gb));
                }
            }
            Op::MatMul { transpose_a, transpose_b } => {
                // out = A' B' with A' = op(A), B' = op(B).
                let (a, b) = (val(0), val(1));
                let (ea, eb) = (mat(a, *transpose_a), mat(b, *transpose_b));
                let gm = MatRef::new(g.data(), node.shape[0], node.shape[1]);
                if want(0) {
                    let mut ga = vec![T::zero(); a.len()];
                    if *transpose_a {
                        gemm(eb, gm.t(), T::zero(), &mut ga);
                    } else {
                        gemm(gm, eb.t(), T::zero(), &mut ga);
                    }
                    contrib.push((0, Tensor::from_parts(a.shape().to_vec(), ga)));
                }
                if want(1) {
                    let mut gb = vec![T::zero(); b.len()];
                    if *transpose_b {
                        gemm(gm.t(), ea, T::zero(), &mut gb);
                    } else {
                        gemm(ea.t(), gm, T::zero(), &mut gb);
                    }
                    contrib.push((1, Tensor::from_parts(b.shape().to_vec(), gb)));
                }
            }
            Op::Conv2d { stride, padding } => {
                let (gx, gk) = conv2d_backward(val(0), val(1), &g, *stride, *padding, want(0), want(1));
                if let Some(gx) = gx {
                    contrib.push((0, gx));
                }
                if let Some(gk) = gk {
                    contrib.push((1, gk));
                }
            }
            Op::Relu => {
                let x = val(0);
                contrib.push((0, g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { T::zero() })));
            }
            Op::BatchNorm { eps } => {
                let grads_bn = batch_norm_backward(val(0), val(1), val(3), val(4), &g, T::of(*eps), mode);
                for (k, t) in grads_bn.into_iter().enumerate() {
                    if want(k) {
                        contrib.push((k, t));
                    }
                }
            }
            Op::Sum(axis) | Op::Mean(axis) => {
                let x = val(0);
                let mut gx = expand_reduced(&g, x.shape(), *axis);
                if matches!(node.op, Op::Mean(_)) {
                    let count = axis.map_or(x.len(), |a| x.shape()[a]);
                    let inv = T::one() / T::of(count as f64);
                    gx.data_mut().iter_mut().for_each(|v| *v *= inv);
                }
                contrib.push((0, gx));
            }
            Op::Max(axis) => {
                let x = val(0);
                let (_, arg) = reduce_max(x, *axis);
                let mut gx = vec![T::zero(); x.len()];
                for (slot, &pos) in arg.iter().enumerate() {
                    gx[pos] += g.data()[slot];
                }
                contrib.push((0, Tensor::from_parts(x.shape().to_vec(), gx)));
            }
            Op::Exp => contrib.push((0, g.zip_map(eval.value(NodeId(i)), |gv, y| gv * y))),
            Op::Log => contrib.push((0, g.zip_map(val(0), |gv, x| gv / x))),
            Op::Sqrt => {
                let two = T::of(2.0);
                contrib.push((0, g.zip_map(eval.value(NodeId(i)), |gv, y| gv / (two * y))));
            }
            Op::Neg => contrib.push((0, g.map(|v| -v))),
            Op::AddScalar(_) => contrib.push((0, g)),
            Op::MulScalar(c) => {
                let c = T::of(*c);
                contrib.push((0, g.map(|v| v * c)));
            }
            Op::Reshape => contrib.push((0, Tensor::from_parts(val(0).shape().to_vec(), g.into_data()))),
            Op::Concat(axis) => {
                let mut offset = 0;
                for k in 0..node.inputs.len() {
                    let s = val(k).shape().to_vec();
                    let len = s[*axis];
                    if want(k) {
                        contrib.push((k, slice(&g, *axis, offset, offset + len, &s)));
                    }
                    offset += len;
                }
            }
            Op::Slice { axis, start, end } => {
                let x = val(0);
                let (outer, full, inner) = split_axis(x.shape(), *axis);
                let width = end - start;
                let mut gx = vec![T::zero(); x.len()];
                for o in 0..outer {
                    let src = &g.data()[o * width * inner..(o + 1) * width * inner];
                    let dst = &mut gx[(o * full + start) * inner..(o * full + end) * inner];
                    dst.copy_from_slice(src);
                }
                contrib.push((0, Tensor::from_parts(x.shape().to_vec(), gx)));
            }
            Op::L2Normalize => {
                let x = val(0);
                let y = eval.value(NodeId(i));
                let d = *x.shape().last().expect("rank >= 1");
                let mut gx = vec![T::zero(); x.len()];
                for r in 0..x.len() / d {
                    let xs = &x.data()[r * d..(r + 1) * d];
                    let ys = &y.data()[r * d..(r + 1) * d];
                    let gs = &g.data()[r * d..(r + 1) * d];
                    let norm = xs.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = (gs[j] - ys[j] * dot) / norm;
                    }
                }
                contrib.push((0, Tensor::from_parts(x.shape().to_vec(), gx)));
            }
        }
        for (k, t) in contrib {
            let target = node.inputs[k].0;
            if !needs[target] {
                continue;
            }
            match &mut grads[target] {
                Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(t),
            }
        }
    }
    for t in targets {
        if let Some(g) = &grads[t.0] {
            if !g.is_finite() {
                return Err(GraphError::NonFinite { node: t.0, op: "gradient" });
            }
        }
    }
    Ok(grads)
}

/// Central-difference gradient estimate, `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference<T: Element>(
    graph: &Graph,
    output: NodeId,
    wrt: &[&str],
    bindings: &Bindings<'_, T>,
    mode: Mode,
    h: f64,
) -> Result<GradientMap<T>, GraphError> {
    assert!(h > 0.0, "finite difference step must be positive");
    if numel(graph.shape(output)) != 1 || graph.shape(output).len() > 1 {
        return Err(GraphError::NonScalarOutput(graph.shape(output).to_vec()));
    }
    let mut result = GradientMap::new();
    for &name in wrt {
        graph.leaf_id(name).ok_or_else(|| GraphError::UnknownLeaf(name.to_string()))?;
        let base = *bindings.get(name).ok_or_else(|| GraphError::Unbound(name.to_string()))?;
        let mut probe = base.clone();
        let mut out = vec![T::zero(); base.len()];
        for (idx, slot) in out.iter_mut().enumerate() {
            let orig = base.data()[idx];
            let eval_at = |probe: &mut Tensor<T>, v: T| -> Result<f64, GraphError> {
                probe.data_mut()[idx] = v;
                let mut b = bindings.clone();
                b.insert(name, &*probe);
                let e = forward(graph, &b, mode)?;
                Ok(e.value(output).item().as_f64())
            };
            let plus = eval_at(&mut probe, orig + T::of(h))?;
            let minus = eval_at(&mut probe, orig - T::of(h))?;
            probe.data_mut()[idx] = orig;
            *slot = T::of((plus - minus) / (2.0 * h));
        }
        result.insert(name.to_string(), Tensor::from_parts(base.shape().to_vec(), out));
    }
    Ok(result)
}

// ---- kernels ----

fn mat<T: Element>(t: &Tensor<T>, transposed: bool) -> MatRef<'_, T> {
    let m = MatRef::new(t.data(), t.shape()[0], t.shape()[1]);
    if transposed {
        m.t()
    } else {
        m
    }
}

fn binary<T: Element>(a: &Tensor<T>, b: &Tensor<T>, out_shape: &[usize], f: impl Fn(T, T) -> T) -> Tensor<T> {
    let mut out = vec![T::zero(); numel(out_shape)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(a.shape(), b.shape(), out_shape, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
    Tensor::from_parts(out_shape.to_vec(), out)
}

/// Sum `f(g, other)` over the broadcast axes back down to `target` shape.
fn unbroadcast<T: Element>(
    g: &Tensor<T>,
    target: &[usize],
    other: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
    target_is_lhs: bool,
) -> Tensor<T> {
    let mut acc = vec![T::zero(); numel(target)];
    let (gd, od) = (g.data(), other.data());
    if target_is_lhs {
        for_each_broadcast(target, other.shape(), out_shape, |o, it, io| acc[it] += f(gd[o], od[io]));
    } else {
        for_each_broadcast(other.shape(), target, out_shape, |o, io, it| acc[it] += f(gd[o], od[io]));
    }
    Tensor::from_parts(target.to_vec(), acc)
}

fn reduce_sum<T: Element>(x: &Tensor<T>, axis: Option<usize>, out_shape: &[usize]) -> Tensor<T> {
    match axis {
        None => Tensor::from_parts(vec![], vec![x.sum()]),
        Some(a) => {
            let (outer, n, inner) = split_axis(x.shape(), a);
            let d = x.data();
            if inner == 1 {
                let out = d.chunks_exact(n).map(|c| c.iter().copied().sum()).collect();
                return Tensor::from_parts(out_shape.to_vec(), out);
            }
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                let dst = &mut out[o * inner..(o + 1) * inner];
                for k in 0..n {
                    let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                }
            }
            Tensor::from_parts(out_shape.to_vec(), out)
        }
    }
}

/// Maximum values and the flat index of the first maximal element per group.
fn reduce_max<T: Element>(x: &Tensor<T>, axis: Option<usize>) -> (Vec<T>, Vec<usize>) {
    let d = x.data();
    match axis {
        None => {
            let mut best = 0;
            for (i, &v) in d.iter().enumerate() {
                if v > d[best] {
                    best = i;
                }
            }
            (vec![d[best]], vec![best])
        }
        Some(a) => {
            let (outer, n, inner) = split_axis(x.shape(), a);
            let mut vals = Vec::with_capacity(outer * inner);
            let mut args = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for j in 0..inner {
                    let mut best = o * n * inner + j;
                    for k in 1..n {
                        let idx = (o * n + k) * inner + j;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    vals.push(d[best]);
                    args.push(best);
                }
            }
            (vals, args)
        }
    }
}

fn expand_reduced<T: Element>(g: &Tensor<T>, shape: &[usize], axis: Option<usize>) -> Tensor<T> {
    match axis {
        None => Tensor::full(shape, g.item()),
        Some(a) => {
            let (outer, n, inner) = split_axis(shape, a);
            let gd = g.data();
            if inner == 1 {
                let mut out = Vec::with_capacity(gd.len() * n);
                for &v in gd {
                    out.resize(out.len() + n, v);
                }
                return Tensor::from_parts(shape.to_vec(), out);
            }
            let mut out = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                let src = &gd[o * inner..(o + 1) * inner];
                for k in 0..n {
                    out[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(src);
                }
            }
            Tensor::from_parts(shape.to_vec(), out)
        }
    }
}

fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize, out_shape: &[usize]) -> Tensor<T> {
    let outer = numel(&out_shape[..axis]);
    let inner = numel(&out_shape[axis + 1..]);
    let mut out = Vec::with_capacity(numel(out_shape));
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::from_parts(out_shape.to_vec(), out)
}

fn slice<T: Element>(x: &Tensor<T>, axis: usize, start: usize, end: usize, out_shape: &[usize]) -> Tensor<T> {
    let (outer, full, inner) = split_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(numel(out_shape));
    for o in 0..outer {
        out.extend_from_slice(&x.data()[(o * full + start) * inner..(o * full + end) * inner]);
    }
    Tensor::from_parts(out_shape.to_vec(), out)
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ks: &[usize], stride: usize, pad: usize) -> Self {
        let (h, w) = (xs[2], xs[3]);
        ConvGeom {
            n: xs[0],
            c: xs[1],
            h,
            w,
            o: ks[0],
            kh: ks[2],
            kw: ks[3],
            oh: (h + 2 * pad - ks[2]) / stride + 1,
            ow: (w + 2 * pad - ks[3]) / stride + 1,
            stride,
            pad,
        }
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Output positions along one axis whose tap `k` lands inside `[0, limit)`, and the first input coordinate.
#[inline]
fn valid_span(g: &ConvGeom, k: usize, out: usize, limit: usize) -> (usize, usize, usize) {
    let lo = g.pad.saturating_sub(k).div_ceil(g.stride);
    let hi = if limit + g.pad > k { ((limit + g.pad - k - 1) / g.stride + 1).min(out) } else { 0 };
    if lo >= hi {
        return (0, 0, 0);
    }
    (lo, hi, lo * g.stride + k - g.pad)
}

/// Unfold one `[c, h, w]` sample into `col: [c*kh*kw, oh*ow]`; entries reading padding are zeroed.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (i_lo, i_hi, _) = valid_span(g, ki, g.oh, g.h);
            for kj in 0..g.kw {
                let (j_lo, j_hi, jj0) = valid_span(g, kj, g.ow, g.w);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                if i_lo >= i_hi || j_lo >= j_hi {
                    dst.fill(T::zero());
                    continue;
                }
                dst[..i_lo * g.ow].fill(T::zero());
                dst[i_hi * g.ow..].fill(T::zero());
                for oi in i_lo..i_hi {
                    let ii = oi * g.stride + ki - g.pad;
                    let line = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    line[..j_lo].fill(T::zero());
                    line[j_hi..].fill(T::zero());
                    let d = &mut line[j_lo..j_hi];
                    if g.stride == 1 {
                        d.copy_from_slice(&src[ii * g.w + jj0..ii * g.w + jj0 + d.len()]);
                    } else {
                        for (t, v) in d.iter_mut().enumerate() {
                            *v = src[ii * g.w + jj0 + t * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add one sample's columns back into `x: [c, h, w]`.
fn col2im<T: Element>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        let dst = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (i_lo, i_hi, _) = valid_span(g, ki, g.oh, g.h);
            for kj in 0..g.kw {
                let (j_lo, j_hi, jj0) = valid_span(g, kj, g.ow, g.w);
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oi in i_lo..i_hi {
                    let ii = oi * g.stride + ki - g.pad;
                    let s = &src[oi * g.ow + j_lo..oi * g.ow + j_hi];
                    for (t, &v) in s.iter().enumerate() {
                        dst[ii * g.w + jj0 + t * g.stride] += v;
                    }
                }
            }
        }
    }
}

fn conv2d_forward<T: Element>(x: &Tensor<T>, k: &Tensor<T>, stride: usize, pad: usize, out_shape: &[usize]) -> Tensor<T> {
    let g = ConvGeom::new(x.shape(), k.shape(), stride, pad);
    let plane = g.oh * g.ow;
    let sample = g.c * g.h * g.w;
    let mut col = vec![T::zero(); g.k() * plane];
    let mut out = vec![T::zero(); g.n * g.o * plane];
    for n in 0..g.n {
        im2col(&x.data()[n * sample..(n + 1) * sample], &g, &mut col);
        gemm(MatRef::new(k.data(), g.o, g.k()), MatRef::new(&col, g.k(), plane), T::zero(), &mut out[n * g.o * plane..(n + 1) * g.o * plane]);
    }
    Tensor::from_parts(out_shape.to_vec(), out)
}

fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_x: bool,
    want_k: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let g = ConvGeom::new(x.shape(), k.shape(), stride, pad);
    let plane = g.oh * g.ow;
    let sample = g.c * g.h * g.w;
    let mut col = vec![T::zero(); g.k() * plane];
    let mut gk = want_k.then(|| vec![T::zero(); g.o * g.k()]);
    let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
    for n in 0..g.n {
        let gn = MatRef::new(&grad.data()[n * g.o * plane..(n + 1) * g.o * plane], g.o, plane);
        if let Some(gk) = gk.as_mut() {
            im2col(&x.data()[n * sample..(n + 1) * sample], &g, &mut col);
            gemm(gn, MatRef::new(&col, g.k(), plane).t(), T::one(), gk);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(MatRef::new(k.data(), g.o, g.k()).t(), gn, T::zero(), &mut col);
            col2im(&col, &g, &mut gx[n * sample..(n + 1) * sample]);
        }
    }
    (gx.map(|v| Tensor::from_parts(x.shape().to_vec(), v)), gk.map(|v| Tensor::from_parts(k.shape().to_vec(), v)))
}

/// (channels, values per channel group, spatial size) for a rank-2 or rank-4 input.
fn bn_layout(shape: &[usize]) -> (usize, usize, usize) {
    let c = shape[1];
    let spatial = if shape.len() == 4 { shape[2] * shape[3] } else { 1 };
    (shape[0], c, spatial)
}

fn channel_stats<T: Element>(x: &Tensor<T>) -> (Vec<T>, Vec<T>, usize) {
    let (n, c, sp) = bn_layout(x.shape());
    let count = n * sp;
    let d = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += d[(b * c + ch) * sp..(b * c + ch + 1) * sp].iter().copied().sum::<T>();
        }
        let m = s / T::of(count as f64);
        let mut v = T::zero();
        for b in 0..n {
            v += d[(b * c + ch) * sp..(b * c + ch + 1) * sp].iter().map(|&e| (e - m) * (e - m)).sum::<T>();
        }
        mean[ch] = m;
        var[ch] = v / T::of(count as f64);
    }
    (mean, var, count)
}

fn batch_norm_apply<T: Element>(x: &Tensor<T>, scale: &[T], shift: &[T], mean: &[T], var: &[T], eps: T) -> Tensor<T> {
    let (n, c, sp) = bn_layout(x.shape());
    let mut out = x.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let inv = scale[ch] / (var[ch] + eps).sqrt();
            let off = shift[ch] - mean[ch] * inv;
            for v in &mut out[(b * c + ch) * sp..(b * c + ch + 1) * sp] {
                *v = *v * inv + off;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Gradients for (x, scale, shift, running mean, running var); the running inputs get zeros.
fn batch_norm_backward<T: Element>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    g: &Tensor<T>,
    eps: T,
    mode: Mode,
) -> Vec<Tensor<T>> {
    let (n, c, sp) = bn_layout(x.shape());
    let (mean, var, count) = match mode {
        Mode::Train => channel_stats(x),
        Mode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec(), n * sp),
    };
    let (xd, gd) = (x.data(), g.data());
    let mut gx = vec![T::zero(); x.len()];
    let mut gscale = vec![T::zero(); c];
    let mut gshift = vec![T::zero(); c];
    // Running statistics only reach the output in eval mode.
    let mut gmean = vec![T::zero(); c];
    let mut gvar = vec![T::zero(); c];
    let cnt = T::of(count as f64);
    for ch in 0..c {
        let inv_std = T::one() / (var[ch] + eps).sqrt();
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for b in 0..n {
            let r = (b * c + ch) * sp..(b * c + ch + 1) * sp;
            for (&xv, &gv) in xd[r.clone()].iter().zip(&gd[r]) {
                sum_g += gv;
                sum_gx += gv * (xv - mean[ch]) * inv_std;
            }
        }
        gscale[ch] = sum_gx;
        gshift[ch] = sum_g;
        let s = scale.data()[ch] * inv_std;
        if mode == Mode::Eval {
            gmean[ch] = -s * sum_g;
            gvar[ch] = -T::of(0.5) * s * inv_std * sum_gx;
        }
        for b in 0..n {
            let r = (b * c + ch) * sp..(b * c + ch + 1) * sp;
            for idx in r {
                gx[idx] = match mode {
                    Mode::Train => {
                        let xhat = (xd[idx] - mean[ch]) * inv_std;
                        s * (gd[idx] - sum_g / cnt - xhat * sum_gx / cnt)
                    }
                    Mode::Eval => s * gd[idx],
                };
            }
        }
    }
    vec![
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(vec![c], gscale),
        Tensor::from_parts(vec![c], gshift),
        Tensor::from_parts(vec![c], gmean),
        Tensor::from_parts(vec![c], gvar),
    ]
}
