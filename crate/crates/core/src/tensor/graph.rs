//! Reverse-mode automatic differentiation over an arena of nodes.
//!
//! Every backward rule is written in terms of graph operations, so a gradient
//! can itself be recorded as a node ([`Graph::grad_as_node`]) and
//! differentiated again. That is what lets a loss on an input-gradient be
//! back-propagated into model parameters.
//!
//! Nodes are appended in creation order, so node ids are already a
//! topological order. A graph lives on one thread; independent graphs are
//! independent values.

use std::sync::Arc;

use crate::error::{contract, Error, Result};

use super::{kernels, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag of a node.
#[derive(Clone, Debug)]
pub enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(T),
    AddScalar(T),
    Recip,
    Log,
    Exp,
    Relu,
    /// Active-set indicator of relu. Piecewise constant, so its derivative is
    /// zero everywhere (including at 0).
    ReluMask,
    MatMul,
    Transpose,
    Conv2d,
    Conv2dWeightGrad,
    FlipKernel,
    BiasBroadcast,
    BiasSum,
    AvgPool2,
    Unpool2,
    LogSoftmax,
    RowSum,
    RowBroadcast,
    Sum,
    Broadcast,
    Gather(Arc<[usize]>),
    Scatter(Arc<[usize]>),
    Reshape,
    /// Fused mean softmax cross-entropy. First-order only.
    SoftmaxCrossEntropy(Arc<[usize]>),
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Recip => "recip",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Relu => "relu",
            Op::ReluMask => "relu_mask",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d => "conv2d",
            Op::Conv2dWeightGrad => "conv2d_weight_grad",
            Op::FlipKernel => "flip_kernel",
            Op::BiasBroadcast => "bias_broadcast",
            Op::BiasSum => "bias_sum",
            Op::AvgPool2 => "avg_pool2",
            Op::Unpool2 => "unpool2",
            Op::LogSoftmax => "log_softmax",
            Op::RowSum => "row_sum",
            Op::RowBroadcast => "row_broadcast",
            Op::Sum => "sum",
            Op::Broadcast => "broadcast",
            Op::Gather(_) => "gather",
            Op::Scatter(_) => "scatter",
            Op::Reshape => "reshape",
            Op::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphNode<T> {
    pub op: Op<T>,
    pub parents: Vec<NodeId>,
    pub value: Tensor<T>,
    pub requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<GraphNode<T>>,
    /// When false, new nodes are recorded as constants (no parents).
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node. Ids handed out earlier become invalid.
    pub fn release(&mut self) {
        self.nodes.clear();
        self.record = true;
    }

    pub fn node(&self, id: NodeId) -> &GraphNode<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(GraphNode {
            op: Op::Leaf,
            parents: Vec::new(),
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op<T>, parents: &[NodeId], value: Tensor<T>) -> NodeId {
        if !self.record {
            return self.constant(value);
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(GraphNode {
            op,
            parents: parents.to_vec(),
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    // ---- forward primitives ------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add, &[a, b], v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub, &[a, b], v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul, &[a, b], v))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        self.push(Op::Neg, &[a], v)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(c), &[a], v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(c), &[a], v)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.recip());
        self.push(Op::Recip, &[a], v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.ln());
        self.push(Op::Log, &[a], v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.exp());
        self.push(Op::Exp, &[a], v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = kernels::relu(self.value(a));
        self.push(Op::Relu, &[a], v)
    }

    fn relu_mask(&mut self, a: NodeId) -> NodeId {
        let v = kernels::relu_mask(self.value(a));
        self.push(Op::ReluMask, &[a], v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul, &[a, b], v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = kernels::transpose2(self.value(a))?;
        Ok(self.push(Op::Transpose, &[a], v))
    }

    /// Same-padded stride-1 cross-correlation; see [`kernels::conv2d`].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let v = kernels::conv2d(self.value(x), self.value(w))?;
        Ok(self.push(Op::Conv2d, &[x, w], v))
    }

    fn conv2d_weight_grad(&mut self, x: NodeId, g: NodeId, k: usize) -> Result<NodeId> {
        let v = kernels::conv2d_weight_grad(self.value(x), self.value(g), k)?;
        Ok(self.push(Op::Conv2dWeightGrad, &[x, g], v))
    }

    fn flip_kernel(&mut self, w: NodeId) -> Result<NodeId> {
        let v = kernels::flip_kernel(self.value(w))?;
        Ok(self.push(Op::FlipKernel, &[w], v))
    }

    pub fn bias_broadcast(&mut self, b: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = kernels::bias_broadcast(self.value(b), shape)?;
        Ok(self.push(Op::BiasBroadcast, &[b], v))
    }

    pub fn bias_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = kernels::bias_sum(self.value(x))?;
        Ok(self.push(Op::BiasSum, &[x], v))
    }

    /// `x + b` with `b: [C]` broadcast along axis 1 of `x: [N, C, ...]`.
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let bb = self.bias_broadcast(b, &shape)?;
        self.add(x, bb)
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let v = kernels::avg_pool2(self.value(x))?;
        Ok(self.push(Op::AvgPool2, &[x], v))
    }

    fn unpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let v = kernels::unpool2(self.value(x))?;
        Ok(self.push(Op::Unpool2, &[x], v))
    }

    /// Log-softmax over the last (class) axis.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = kernels::log_softmax(self.value(x))?;
        Ok(self.push(Op::LogSoftmax, &[x], v))
    }

    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = kernels::row_sum(self.value(x))?;
        Ok(self.push(Op::RowSum, &[x], v))
    }

    pub fn row_broadcast(&mut self, x: NodeId, d: usize) -> Result<NodeId> {
        let v = kernels::row_broadcast(self.value(x), d)?;
        Ok(self.push(Op::RowBroadcast, &[x], v))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, &[x], v)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = T::from_usize(self.value(x).len()).unwrap_or_else(T::one);
        let s = self.sum(x);
        self.scale(s, n.recip())
    }

    pub fn broadcast(&mut self, s: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = kernels::broadcast_scalar(self.value(s), shape)?;
        Ok(self.push(Op::Broadcast, &[s], v))
    }

    /// `out[n] = x[n, idx[n]]` for `x: [N, K]`.
    pub fn gather(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = kernels::gather(self.value(x), idx)?;
        Ok(self.push(Op::Gather(idx.into()), &[x], v))
    }

    pub fn scatter(&mut self, g: NodeId, idx: &[usize], k: usize) -> Result<NodeId> {
        let v = kernels::scatter(self.value(g), idx, k)?;
        Ok(self.push(Op::Scatter(idx.into()), &[g], v))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape, &[x], v))
    }

    /// Elementwise inner product, as a rank-0 node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let m = self.mul(a, b)?;
        Ok(self.sum(m))
    }

    /// Mean squared error between two equally shaped nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Mean cross-entropy of `logits: [N, K]` against integer labels.
    ///
    /// Fused for training speed. It only supports first-order
    /// differentiation; asking for a differentiable gradient through it fails
    /// with [`Error::UnsupportedOp`].
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ls = kernels::log_softmax(self.value(logits))?;
        let picked = kernels::gather(&ls, labels)?;
        let n = T::from_usize(labels.len()).unwrap_or_else(T::one);
        let v = Tensor::scalar(-picked.sum() / n);
        Ok(self.push(Op::SoftmaxCrossEntropy(labels.into()), &[logits], v))
    }

    // ---- differentiation ---------------------------------------------------

    /// Gradients of the scalar `root` with respect to each of `wrt`, as plain
    /// tensors. Contributions over multiple paths are summed. A `wrt` node the
    /// root does not depend on gets a zero tensor.
    pub fn backward(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor<T>>> {
        let mark = self.nodes.len();
        let ids = self.grad_nodes(root, wrt, false)?;
        let out = ids.iter().map(|&id| self.value(id).clone()).collect();
        // gradient nodes were recorded as constants and are not needed again
        self.nodes.truncate(mark);
        Ok(out)
    }

    /// The gradient of `root` with respect to `wrt`, recorded as a node that
    /// can be differentiated further.
    pub fn grad_as_node(&mut self, root: NodeId, wrt: NodeId) -> Result<NodeId> {
        Ok(self.grad_nodes(root, &[wrt], true)?[0])
    }

    pub fn grads_as_nodes(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        self.grad_nodes(root, wrt, true)
    }

    fn grad_nodes(&mut self, root: NodeId, wrt: &[NodeId], create_graph: bool) -> Result<Vec<NodeId>> {
        if self.value(root).len() != 1 {
            return contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            ));
        }
        for &w in wrt {
            if !self.nodes[w.0].requires_grad {
                return contract(format!("node {} does not require grad", w.0));
            }
        }
        let n = root.0 + 1;
        // nodes downstream of some wrt node; only these carry gradient
        let mut dep = vec![false; n];
        for &w in wrt {
            if w.0 < n {
                dep[w.0] = true;
            }
        }
        for i in 0..n {
            if !dep[i] && self.nodes[i].parents.iter().any(|p| dep[p.0]) {
                dep[i] = true;
            }
        }

        let saved = self.record;
        self.record = create_graph;
        let result = self.propagate(root, wrt, &dep);
        self.record = saved;
        result
    }

    fn propagate(&mut self, root: NodeId, wrt: &[NodeId], dep: &[bool]) -> Result<Vec<NodeId>> {
        let n = root.0 + 1;
        let mut grads: Vec<Option<NodeId>> = vec![None; n];
        if dep[root.0] {
            let seed = Tensor::ones(self.value(root).shape());
            grads[root.0] = Some(self.constant(seed));
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            for (parent, pg) in self.vjp(i, g, dep)? {
                grads[parent.0] = Some(match grads[parent.0] {
                    None => pg,
                    Some(acc) => self.add(acc, pg)?,
                });
            }
        }
        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let id = match grads.get(w.0).copied().flatten() {
                Some(id) => id,
                None => {
                    let z = self.value(w).zeros_like();
                    self.constant(z)
                }
            };
            out.push(id);
        }
        Ok(out)
    }

    /// Vector-Jacobian products of node `i` for each parent that needs one.
    fn vjp(&mut self, i: usize, g: NodeId, dep: &[bool]) -> Result<Vec<(NodeId, NodeId)>> {
        let me = NodeId(i);
        let op = self.nodes[i].op.clone();
        let ps = self.nodes[i].parents.clone();
        let need = |k: usize| dep[ps[k].0];
        let mut out = Vec::with_capacity(ps.len());

        match op {
            Op::Leaf => {}
            Op::Add => {
                for k in 0..2 {
                    if need(k) {
                        out.push((ps[k], g));
                    }
                }
            }
            Op::Sub => {
                if need(0) {
                    out.push((ps[0], g));
                }
                if need(1) {
                    out.push((ps[1], self.neg(g)));
                }
            }
            Op::Mul => {
                if need(0) {
                    out.push((ps[0], self.mul(g, ps[1])?));
                }
                if need(1) {
                    out.push((ps[1], self.mul(g, ps[0])?));
                }
            }
            Op::Neg => out.push((ps[0], self.neg(g))),
            Op::Scale(c) => out.push((ps[0], self.scale(g, c))),
            Op::AddScalar(_) => out.push((ps[0], g)),
            Op::Recip => {
                // d(1/x) = -1/x^2
                let sq = self.mul(me, me)?;
                let t = self.mul(g, sq)?;
                out.push((ps[0], self.neg(t)));
            }
            Op::Log => {
                let r = self.recip(ps[0]);
                out.push((ps[0], self.mul(g, r)?));
            }
            Op::Exp => out.push((ps[0], self.mul(g, me)?)),
            Op::Relu => {
                let m = self.relu_mask(ps[0]);
                out.push((ps[0], self.mul(g, m)?));
            }
            Op::ReluMask => {}
            Op::MatMul => {
                if need(0) {
                    let bt = self.transpose(ps[1])?;
                    out.push((ps[0], self.matmul(g, bt)?));
                }
                if need(1) {
                    let at = self.transpose(ps[0])?;
                    out.push((ps[1], self.matmul(at, g)?));
                }
            }
            Op::Transpose => out.push((ps[0], self.transpose(g)?)),
            Op::Conv2d => {
                if need(0) {
                    let wf = self.flip_kernel(ps[1])?;
                    out.push((ps[0], self.conv2d(g, wf)?));
                }
                if need(1) {
                    let k = self.value(ps[1]).shape()[2];
                    out.push((ps[1], self.conv2d_weight_grad(ps[0], g, k)?));
                }
            }
            Op::Conv2dWeightGrad => {
                // bilinear in (x, g): see kernels::conv2d_weight_grad
                if need(0) {
                    let uf = self.flip_kernel(g)?;
                    out.push((ps[0], self.conv2d(ps[1], uf)?));
                }
                if need(1) {
                    out.push((ps[1], self.conv2d(ps[0], g)?));
                }
            }
            Op::FlipKernel => out.push((ps[0], self.flip_kernel(g)?)),
            Op::BiasBroadcast => out.push((ps[0], self.bias_sum(g)?)),
            Op::BiasSum => {
                let shape = self.value(ps[0]).shape().to_vec();
                out.push((ps[0], self.bias_broadcast(g, &shape)?));
            }
            Op::AvgPool2 => out.push((ps[0], self.unpool2(g)?)),
            Op::Unpool2 => out.push((ps[0], self.avg_pool2(g)?)),
            Op::LogSoftmax => {
                // g - softmax * rowsum(g), with softmax = exp(output)
                let k = *self.value(me).shape().last().unwrap_or(&1);
                let p = self.exp(me);
                let s = self.row_sum(g)?;
                let sb = self.row_broadcast(s, k)?;
                let t = self.mul(p, sb)?;
                out.push((ps[0], self.sub(g, t)?));
            }
            Op::RowSum => {
                let k = *self.value(ps[0]).shape().last().unwrap_or(&1);
                out.push((ps[0], self.row_broadcast(g, k)?));
            }
            Op::RowBroadcast => out.push((ps[0], self.row_sum(g)?)),
            Op::Sum => {
                let shape = self.value(ps[0]).shape().to_vec();
                out.push((ps[0], self.broadcast(g, &shape)?));
            }
            Op::Broadcast => out.push((ps[0], self.sum(g))),
            Op::Gather(idx) => {
                let k = self.value(ps[0]).shape()[1];
                out.push((ps[0], self.scatter(g, &idx, k)?));
            }
            Op::Scatter(idx) => out.push((ps[0], self.gather(g, &idx)?)),
            Op::Reshape => {
                let shape = self.value(ps[0]).shape().to_vec();
                out.push((ps[0], self.reshape(g, &shape)?));
            }
            Op::SoftmaxCrossEntropy(labels) => {
                if self.record {
                    return Err(Error::UnsupportedOp("softmax_cross_entropy"));
                }
                let logits = self.value(ps[0]);
                let k = logits.shape()[1];
                let n = T::from_usize(labels.len()).unwrap_or_else(T::one);
                let scale = self.value(g).item() / n;
                let mut d = kernels::log_softmax(logits)?.map(|v| v.exp());
                for (row, &y) in d.data_mut().chunks_mut(k).zip(labels.iter()) {
                    row[y] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                out.push((ps[0], self.constant(d)));
            }
        }
        Ok(out)
    }
}
