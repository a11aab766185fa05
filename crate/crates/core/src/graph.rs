//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is an append-only arena of primitive-op nodes. Leaves are
//! variable slots, either differentiable or constant; everything else is one
//! of a fixed set of primitive ops. Construction performs shape inference, so
//! shape errors surface when a node is created. Evaluation is memoized per
//! node and the backward pass walks nodes in exact reverse creation order,
//! accumulating adjoints by addition in that fixed order, so two backward
//! passes over the same graph and bindings are bit-identical.
//!
//! Rank support: elementwise ops accept any rank; `matmul` requires rank-2;
//! axis reductions, slicing and concatenation cover ranks 1 and 2. That is
//! enough for perceptrons, the refinement cell, and every objective in this
//! crate. The refinement loop is unrolled by callers; there is no in-graph
//! control flow.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Scale floor for relative gradient errors: coordinates where both the
/// analytic and numerical gradient are below this are compared on an
/// absolute scale, keeping central-difference roundoff (~1e-10 at h=1e-5)
/// from dominating near-zero gradients.
pub const GRAD_CHECK_SCALE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Differentiable,
    Constant,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(LeafKind),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    MeanAxis(NodeId, usize),
    Broadcast(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice(NodeId, usize, usize, usize), // input, axis, start, len
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Elu(NodeId),
    LayerNorm(NodeId),
    Clamp(NodeId, f64, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Broadcast(..) => "broadcast",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Elu(..) => "elu",
            Op::LayerNorm(..) => "layer_norm",
            Op::Clamp(..) => "clamp",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(parts, _) => parts.clone(),
            Op::Neg(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::Broadcast(a)
            | Op::Slice(a, _, _, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Elu(a)
            | Op::LayerNorm(a)
            | Op::Clamp(a, _, _) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Gradients of a scalar root with respect to differentiable leaves.
/// Constant leaves and unreached leaves report no gradient.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
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

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.values.push(None);
        NodeId(self.nodes.len() - 1)
    }

    // ---- leaves ------------------------------------------------------

    /// Unbound variable slot; bind a value before evaluation.
    pub fn leaf(&mut self, shape: &[usize], kind: LeafKind) -> NodeId {
        self.push(Op::Leaf(kind), shape.to_vec())
    }

    /// Constant leaf bound to `value`.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf(LeafKind::Constant), value.shape().to_vec());
        self.values[id.0] = Some(value);
        id
    }

    /// Differentiable leaf bound to `value`.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf(LeafKind::Differentiable), value.shape().to_vec());
        self.values[id.0] = Some(value);
        id
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf(_))
    }

    pub fn leaf_kind(&self, id: NodeId) -> Option<LeafKind> {
        match self.nodes[id.0].op {
            Op::Leaf(k) => Some(k),
            _ => None,
        }
    }

    /// Bind (or re-bind) a leaf value and drop every cached non-leaf value.
    pub fn bind(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        match self.nodes[id.0].op {
            Op::Leaf(_) => {}
            _ => return Err(Error::invalid(format!("bind target {} is not a leaf", id.0))),
        }
        if value.shape() != self.nodes[id.0].shape {
            return Err(Error::shape(format!(
                "leaf {} declared {:?}, bound {:?}",
                id.0,
                self.nodes[id.0].shape,
                value.shape()
            )));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("binding for leaf {}", id.0)));
        }
        self.values[id.0] = Some(value);
        self.invalidate();
        Ok(())
    }

    fn invalidate(&mut self) {
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf(_)) {
                self.values[i] = None;
            }
        }
    }

    // ---- primitive ops ------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {:?} x {:?}", sa, sb)));
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let s = self.shape_of(a).to_vec();
        self.push(Op::Neg(a), s)
    }

    /// `a - b`, composed as `a + (-b)`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), vec![])
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.reduced_shape("sum_axis", a, axis)?;
        Ok(self.push(Op::SumAxis(a, axis), s))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.reduced_shape("mean_axis", a, axis)?;
        Ok(self.push(Op::MeanAxis(a, axis), s))
    }

    /// Expand to `target`: a scalar broadcasts anywhere; otherwise the source
    /// shape must be a suffix of the target (tiling along leading axes).
    pub fn broadcast(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId> {
        let sa = self.shape_of(a);
        let ok = sa.is_empty()
            || (sa.len() <= target.len() && &target[target.len() - sa.len()..] == sa);
        if !ok {
            return Err(Error::shape(format!("broadcast {:?} -> {:?}", sa, target)));
        }
        Ok(self.push(Op::Broadcast(a), target.to_vec()))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero parts"));
        }
        let first = self.shape_of(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {} rank {}", axis, first.len())));
        }
        let mut out = first.clone();
        out[axis] = 0;
        for &p in parts {
            let sp = self.shape_of(p);
            if sp.len() != first.len() {
                return Err(Error::shape("concat rank mismatch"));
            }
            for (d, (&a, &b)) in sp.iter().zip(first.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::shape(format!("concat {:?} vs {:?}", sp, first)));
                }
            }
            out[axis] += sp[axis];
        }
        Ok(self.push(Op::Concat(parts.to_vec(), axis), out))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let sa = self.shape_of(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(Error::shape(format!(
                "slice axis {} [{}, {}) of {:?}",
                axis,
                start,
                start + len,
                sa
            )));
        }
        let mut out = sa;
        out[axis] = len;
        Ok(self.push(Op::Slice(a, axis, start, len), out))
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: NodeId, axis: usize, sizes: &[usize]) -> Result<Vec<NodeId>> {
        let total: usize = sizes.iter().sum();
        let sa = self.shape_of(a).to_vec();
        if axis >= sa.len() || total != sa[axis] {
            return Err(Error::shape(format!("split sizes {:?} of {:?}", sizes, sa)));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            out.push(self.slice(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let s = self.shape_of(a).to_vec();
        self.push(Op::Exp(a), s)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let s = self.shape_of(a).to_vec();
        self.push(Op::Log(a), s)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let s = self.shape_of(a).to_vec();
        self.push(Op::Square(a), s)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let s = self.shape_of(a).to_vec();
        self.push(Op::Tanh(a), s)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let s = self.shape_of(a).to_vec();
        self.push(Op::Sigmoid(a), s)
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        let s = self.shape_of(a).to_vec();
        self.push(Op::Elu(a), s)
    }

    /// Layer normalization over the last axis (rows of a matrix, the whole
    /// of a vector), with epsilon inside the square root.
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape_of(a).to_vec();
        if s.is_empty() {
            return Err(Error::shape("layer_norm of a scalar"));
        }
        Ok(self.push(Op::LayerNorm(a), s))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let s = self.shape_of(a).to_vec();
        self.push(Op::Clamp(a, lo, hi), s)
    }

    // ---- sugar (compositions of the primitives above) ------------------

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let s = self.shape_of(a).to_vec();
        let k = self.scalar(c);
        let k = self.broadcast(k, &s)?;
        self.mul(a, k)
    }

    /// Add a scalar constant.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let s = self.shape_of(a).to_vec();
        let k = self.scalar(c);
        let k = self.broadcast(k, &s)?;
        self.add(a, k)
    }

    /// `x W + b` for a rank-2 `x`, rank-2 `W`, rank-1 `b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        let shape = self.shape_of(xw).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.add(xw, bb)
    }

    fn same_shape(&self, what: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(Error::shape(format!("{} {:?} vs {:?}", what, sa, sb)));
        }
        Ok(sa.to_vec())
    }

    fn reduced_shape(&self, what: &str, a: NodeId, axis: usize) -> Result<Vec<usize>> {
        let sa = self.shape_of(a);
        if sa.len() != 2 || axis > 1 {
            return Err(Error::shape(format!("{} axis {} of {:?}", what, axis, sa)));
        }
        Ok(vec![sa[1 - axis]])
    }

    // ---- evaluation -----------------------------------------------------

    /// Memoized value of `id`, computing any missing dependencies. Errors on
    /// unbound leaves and on non-finite op outputs.
    pub fn eval(&mut self, id: NodeId) -> Result<&Tensor> {
        if self.values[id.0].is_none() {
            let needed = self.needed(id);
            for i in 0..=id.0 {
                if needed[i] && self.values[i].is_none() {
                    let v = self.compute(i)?;
                    if !v.all_finite() {
                        return Err(Error::NonFinite(format!(
                            "{} output at node {}",
                            self.nodes[i].op.name(),
                            i
                        )));
                    }
                    self.values[i] = Some(v);
                }
            }
        }
        Ok(self.values[id.0].as_ref().unwrap())
    }

    /// Bind the given leaves, then evaluate `root`.
    pub fn forward_eval(&mut self, bindings: &[(NodeId, Tensor)], root: NodeId) -> Result<Tensor> {
        for (id, t) in bindings {
            self.bind(*id, t.clone())?;
        }
        Ok(self.eval(root)?.clone())
    }

    fn needed(&self, root: NodeId) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack = vec![root.0];
        while let Some(i) = stack.pop() {
            if needed[i] {
                continue;
            }
            needed[i] = true;
            if self.values[i].is_some() {
                continue; // cached; dependencies not required
            }
            for dep in self.nodes[i].op.inputs() {
                stack.push(dep.0);
            }
        }
        needed
    }

    fn value(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref().expect("value computed")
    }

    fn compute(&self, i: usize) -> Result<Tensor> {
        let node = &self.nodes[i];
        let out = match &node.op {
            Op::Leaf(_) => {
                return Err(Error::invalid(format!("leaf {} not bound", i)));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let mut out = vec![0.0; m * n];
                for r in 0..m {
                    for kk in 0..k {
                        let av = ta.data()[r * k + kk];
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &tb.data()[kk * n..(kk + 1) * n];
                        let orow = &mut out[r * n..(r + 1) * n];
                        for c in 0..n {
                            orow[c] += av * brow[c];
                        }
                    }
                }
                Tensor::new(vec![m, n], out)?
            }
            Op::Add(a, b) => zip_map(self.value(*a), self.value(*b), |x, y| x + y),
            Op::Mul(a, b) => zip_map(self.value(*a), self.value(*b), |x, y| x * y),
            Op::Neg(a) => map(self.value(*a), |x| -x),
            Op::Sum(a) => Tensor::scalar(self.value(*a).data().iter().sum()),
            Op::Mean(a) => {
                let t = self.value(*a);
                Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
            }
            Op::SumAxis(a, axis) => axis_reduce(self.value(*a), *axis, false),
            Op::MeanAxis(a, axis) => axis_reduce(self.value(*a), *axis, true),
            Op::Broadcast(a) => {
                let t = self.value(*a);
                let reps = node.shape.iter().product::<usize>() / t.len().max(1);
                let mut out = Vec::with_capacity(reps * t.len());
                for _ in 0..reps {
                    out.extend_from_slice(t.data());
                }
                Tensor::new(node.shape.clone(), out)?
            }
            Op::Concat(parts, axis) => {
                let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
                concat_kernel(&tensors, *axis, &node.shape)?
            }
            Op::Slice(a, axis, start, len) => slice_kernel(self.value(*a), *axis, *start, *len),
            Op::Exp(a) => map(self.value(*a), f64::exp),
            Op::Log(a) => map(self.value(*a), f64::ln),
            Op::Square(a) => map(self.value(*a), |x| x * x),
            Op::Tanh(a) => map(self.value(*a), f64::tanh),
            Op::Sigmoid(a) => map(self.value(*a), sigmoid),
            Op::Elu(a) => map(self.value(*a), elu),
            Op::LayerNorm(a) => layer_norm_forward(self.value(*a)),
            Op::Clamp(a, lo, hi) => map(self.value(*a), |x| x.clamp(*lo, *hi)),
        };
        Ok(out)
    }

    // ---- backward -------------------------------------------------------

    /// Gradient of the scalar `root` with respect to every differentiable
    /// leaf, seeded with 1.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        self.backward_seeded(root, 1.0)
    }

    pub fn backward_seeded(&mut self, root: NodeId, seed: f64) -> Result<Gradients> {
        if !self.nodes[root.0].shape.is_empty() {
            return Err(Error::invalid(format!(
                "backward root must be scalar, node {} has shape {:?}",
                root.0, self.nodes[root.0].shape
            )));
        }
        self.eval(root)?;

        // A node needs a gradient iff some differentiable leaf feeds it.
        let mut needs_grad = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs_grad[i] = match &node.op {
                Op::Leaf(LeafKind::Differentiable) => true,
                Op::Leaf(LeafKind::Constant) => false,
                op => op.inputs().iter().any(|d| needs_grad[d.0]),
            };
        }

        let mut adjoint: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoint[root.0] = Some(Tensor::scalar(seed));

        for i in (0..=root.0).rev() {
            if !needs_grad[i] {
                continue;
            }
            let g = match adjoint[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &needs_grad, &mut adjoint)?;
            if matches!(self.nodes[i].op, Op::Leaf(LeafKind::Differentiable)) {
                adjoint[i] = Some(g);
            }
        }

        // Retain only differentiable-leaf gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf(LeafKind::Differentiable)) {
                adjoint[i] = None;
            }
        }
        Ok(Gradients { grads: adjoint })
    }

    fn accumulate(
        adjoint: &mut [Option<Tensor>],
        needs_grad: &[bool],
        target: NodeId,
        contrib: Tensor,
    ) {
        if !needs_grad[target.0] {
            return;
        }
        match &mut adjoint[target.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor,
        needs_grad: &[bool],
        adjoint: &mut [Option<Tensor>],
    ) -> Result<()> {
        let acc = Graph::accumulate;
        match &self.nodes[i].op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if needs_grad[a.0] {
                    // dA = g . B^T
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for c in 0..n {
                                s += g.data()[r * n + c] * tb.data()[kk * n + c];
                            }
                            da[r * k + kk] = s;
                        }
                    }
                    acc(adjoint, needs_grad, *a, Tensor::new(vec![m, k], da)?);
                }
                if needs_grad[b.0] {
                    // dB = A^T . g
                    let mut db = vec![0.0; k * n];
                    for kk in 0..k {
                        for r in 0..m {
                            let av = ta.data()[r * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            let grow = &g.data()[r * n..(r + 1) * n];
                            let drow = &mut db[kk * n..(kk + 1) * n];
                            for c in 0..n {
                                drow[c] += av * grow[c];
                            }
                        }
                    }
                    acc(adjoint, needs_grad, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                acc(adjoint, needs_grad, *a, g.clone());
                acc(adjoint, needs_grad, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if needs_grad[a.0] {
                    acc(adjoint, needs_grad, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if needs_grad[b.0] {
                    acc(adjoint, needs_grad, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Neg(a) => acc(adjoint, needs_grad, *a, map(g, |x| -x)),
            Op::Sum(a) => {
                let s = self.value(*a).shape().to_vec();
                acc(adjoint, needs_grad, *a, Tensor::full(&s, g.data()[0]));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let s = t.shape().to_vec();
                acc(
                    adjoint,
                    needs_grad,
                    *a,
                    Tensor::full(&s, g.data()[0] / t.len() as f64),
                );
            }
            Op::SumAxis(a, axis) => {
                acc(adjoint, needs_grad, *a, axis_expand(self.value(*a), *axis, g, 1.0));
            }
            Op::MeanAxis(a, axis) => {
                let denom = self.value(*a).shape()[*axis] as f64;
                acc(
                    adjoint,
                    needs_grad,
                    *a,
                    axis_expand(self.value(*a), *axis, g, 1.0 / denom),
                );
            }
            Op::Broadcast(a) => {
                let src = self.value(*a);
                let chunk = src.len().max(1);
                let mut out = vec![0.0; chunk];
                for block in g.data().chunks(chunk) {
                    for (o, v) in out.iter_mut().zip(block) {
                        *o += v;
                    }
                }
                acc(adjoint, needs_grad, *a, Tensor::new(src.shape().to_vec(), out)?);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    let piece = slice_kernel(g, *axis, start, len);
                    acc(adjoint, needs_grad, p, piece);
                    start += len;
                }
            }
            Op::Slice(a, axis, start, len) => {
                let src = self.value(*a);
                let mut out = Tensor::zeros(src.shape());
                scatter_slice(&mut out, g, *axis, *start, *len);
                acc(adjoint, needs_grad, *a, out);
            }
            Op::Exp(a) => {
                let y = self.value(NodeId(i));
                acc(adjoint, needs_grad, *a, zip_map(g, y, |gv, yv| gv * yv));
            }
            Op::Log(a) => {
                let x = self.value(*a);
                acc(adjoint, needs_grad, *a, zip_map(g, x, |gv, xv| gv / xv));
            }
            Op::Square(a) => {
                let x = self.value(*a);
                acc(adjoint, needs_grad, *a, zip_map(g, x, |gv, xv| gv * 2.0 * xv));
            }
            Op::Tanh(a) => {
                let y = self.value(NodeId(i));
                acc(adjoint, needs_grad, *a, zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv)));
            }
            Op::Sigmoid(a) => {
                let y = self.value(NodeId(i));
                acc(adjoint, needs_grad, *a, zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Elu(a) => {
                let x = self.value(*a);
                acc(
                    adjoint,
                    needs_grad,
                    *a,
                    zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { gv * xv.exp() }),
                );
            }
            Op::LayerNorm(a) => {
                let x = self.value(*a);
                acc(adjoint, needs_grad, *a, layer_norm_backward(x, g));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                acc(
                    adjoint,
                    needs_grad,
                    *a,
                    zip_map(g, x, |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 }),
                );
            }
        }
        Ok(())
    }
}

// ---- kernels -------------------------------------------------------------

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .unwrap()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn axis_reduce(t: &Tensor, axis: usize, mean: bool) -> Tensor {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    match axis {
        0 => {
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c] += t.data()[r * cols + c];
                }
            }
            if mean {
                for v in &mut out {
                    *v /= rows as f64;
                }
            }
            Tensor::vector(out)
        }
        _ => {
            let mut out = vec![0.0; rows];
            for r in 0..rows {
                out[r] = t.row(r).iter().sum();
                if mean {
                    out[r] /= cols as f64;
                }
            }
            Tensor::vector(out)
        }
    }
}

/// Spread a reduced gradient back across the reduced axis, scaled.
fn axis_expand(src: &Tensor, axis: usize, g: &Tensor, scale: f64) -> Tensor {
    let (rows, cols) = (src.shape()[0], src.shape()[1]);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let gv = if axis == 0 { g.data()[c] } else { g.data()[r] };
            out[r * cols + c] = gv * scale;
        }
    }
    Tensor::new(vec![rows, cols], out).unwrap()
}

fn concat_kernel(parts: &[&Tensor], axis: usize, out_shape: &[usize]) -> Result<Tensor> {
    if axis == 0 || out_shape.len() == 1 {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(p.data());
        }
        return Tensor::new(out_shape.to_vec(), data);
    }
    // axis 1 of rank-2: interleave rows
    let rows = out_shape[0];
    let cols = out_shape[1];
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(out_shape.to_vec(), data)
}

fn slice_kernel(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    if t.rank() == 1 || axis == 0 {
        let width: usize = t.shape()[1..].iter().product::<usize>().max(1);
        let data = t.data()[start * width..(start + len) * width].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        return Tensor::new(shape, data).unwrap();
    }
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
    }
    Tensor::new(vec![rows, len], data).unwrap()
}

fn scatter_slice(out: &mut Tensor, g: &Tensor, axis: usize, start: usize, len: usize) {
    if out.rank() == 1 || axis == 0 {
        let width: usize = out.shape()[1..].iter().product::<usize>().max(1);
        let dst = &mut out.data_mut()[start * width..(start + len) * width];
        for (d, s) in dst.iter_mut().zip(g.data()) {
            *d += s;
        }
        return;
    }
    let cols = out.shape()[1];
    let rows = out.shape()[0];
    for r in 0..rows {
        for c in 0..len {
            out.data_mut()[r * cols + start + c] += g.data()[r * len + c];
        }
    }
}

fn layer_norm_forward(x: &Tensor) -> Tensor {
    let width = *x.shape().last().unwrap();
    let mut out = vec![0.0; x.len()];
    for (row_in, row_out) in x.data().chunks(width).zip(out.chunks_mut(width)) {
        let mean = row_in.iter().sum::<f64>() / width as f64;
        let var = row_in.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let denom = (var + LAYER_NORM_EPS).sqrt();
        for (o, v) in row_out.iter_mut().zip(row_in) {
            *o = (v - mean) / denom;
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn layer_norm_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let width = *x.shape().last().unwrap();
    let n = width as f64;
    let mut out = vec![0.0; x.len()];
    for ((row_x, row_g), row_out) in x
        .data()
        .chunks(width)
        .zip(g.data().chunks(width))
        .zip(out.chunks_mut(width))
    {
        let mean = row_x.iter().sum::<f64>() / n;
        let var = row_x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let denom = (var + LAYER_NORM_EPS).sqrt();
        let xhat: Vec<f64> = row_x.iter().map(|v| (v - mean) / denom).collect();
        let g_mean = row_g.iter().sum::<f64>() / n;
        let gx_mean = row_g.iter().zip(&xhat).map(|(gv, xv)| gv * xv).sum::<f64>() / n;
        for ((o, gv), xv) in row_out.iter_mut().zip(row_g).zip(&xhat) {
            *o = (gv - g_mean - xv * gx_mean) / denom;
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

// ---- gradient checking -----------------------------------------------------

/// Per-leaf outcome of a finite-difference check. `None` means the leaf
/// received no gradient (constant or unreached).
#[derive(Debug)]
pub struct GradCheckReport {
    pub per_leaf: Vec<(NodeId, Option<f64>)>,
}

impl GradCheckReport {
    /// Largest relative error across leaves that have gradients.
    pub fn max_rel_error(&self) -> f64 {
        self.per_leaf
            .iter()
            .filter_map(|(_, e)| *e)
            .fold(0.0, f64::max)
    }

    pub fn leaf_error(&self, id: NodeId) -> Option<f64> {
        self.per_leaf.iter().find(|(l, _)| *l == id).and_then(|(_, e)| *e)
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_CHECK_SCALE_FLOOR)
}

/// Compare `backward` against central finite differences of step `h` for each
/// given leaf, using the graph's current bindings as the evaluation point.
pub fn gradient_check(
    graph: &mut Graph,
    root: NodeId,
    leaves: &[NodeId],
    h: f64,
) -> Result<GradCheckReport> {
    let grads = graph.backward(root)?;
    let mut per_leaf = Vec::with_capacity(leaves.len());
    for &leaf in leaves {
        let analytic = match grads.get(leaf) {
            Some(t) => t.clone(),
            None => {
                per_leaf.push((leaf, None));
                continue;
            }
        };
        let base = graph
            .values[leaf.0]
            .clone()
            .ok_or_else(|| Error::invalid(format!("leaf {} unbound in gradient_check", leaf.0)))?;
        let mut worst = 0.0_f64;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[i] += h;
            let f_plus = graph.forward_eval(&[(leaf, plus)], root)?.item()?;
            let mut minus = base.clone();
            minus.data_mut()[i] -= h;
            let f_minus = graph.forward_eval(&[(leaf, minus)], root)?.item()?;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            worst = worst.max(rel_error(analytic.data()[i], numeric));
        }
        graph.bind(leaf, base)?;
        per_leaf.push((leaf, Some(worst)));
    }
    Ok(GradCheckReport { per_leaf })
}
