//! Eager reverse-mode automatic differentiation.
//!
//! Every op computes its value when it is recorded. [`Graph::grad`] records
//! the backward pass onto the same graph, so a gradient is itself a node and
//! can be differentiated again. [`Graph::backward`] is the first-order
//! convenience that returns plain tensors for every parameter and input leaf.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Parameter,
    Input,
    Constant,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(LeafKind),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Exp(NodeId),
    Powf(NodeId, f64),
    Relu(NodeId),
    Reshape(NodeId),
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Conv2d { x: NodeId, k: NodeId, stride: usize, pad: usize },
    ConvInputAdjoint { g: NodeId, k: NodeId, stride: usize, pad: usize },
    ConvKernelAdjoint { x: NodeId, g: NodeId, stride: usize, pad: usize },
    SumAll(NodeId),
    Expand(NodeId),
    SumKeep { x: NodeId, axis: usize },
    BroadcastAlong { x: NodeId, axis: usize },
    LogSoftmax(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match *self {
            Leaf(_) => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![a, b],
            Scale(a, _) | AddConst(a) | Exp(a) | Powf(a, _) | Relu(a) | Reshape(a) => vec![a],
            SumAll(a) | Expand(a) | LogSoftmax(a) => vec![a],
            SumKeep { x, .. } | BroadcastAlong { x, .. } => vec![x],
            MatMul { a, b, .. } => vec![a, b],
            Conv2d { x, k, .. } => vec![x, k],
            ConvInputAdjoint { g, k, .. } => vec![g, k],
            ConvKernelAdjoint { x, g, .. } => vec![x, g],
        }
    }
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every parameter and input leaf.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    table: BTreeMap<NodeId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor<T>> {
        self.table.get(&leaf)
    }

    pub fn take(&mut self, leaf: NodeId) -> Option<Tensor<T>> {
        self.table.remove(&leaf)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor<T>)> {
        self.table.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn leaf_kind(&self, id: NodeId) -> Option<LeafKind> {
        match self.nodes[id.0].op {
            Op::Leaf(kind) => Some(kind),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> NodeId {
        let requires_grad = match op {
            Op::Leaf(kind) => kind != LeafKind::Constant,
            ref other => other
                .inputs()
                .iter()
                .any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn parameter(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf(LeafKind::Parameter), value)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf(LeafKind::Input), value)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf(LeafKind::Constant), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b)).map_err(rename("add"))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b)).map_err(rename("sub"))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(rename("mul"))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(T::of(c));
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let c_t = T::of(c);
        let v = self.value(a).map(|x| x + c_t);
        self.push(Op::AddConst(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(T::exp);
        self.push(Op::Exp(a), v)
    }

    /// Elementwise `a^p`; intended for strictly positive inputs.
    pub fn powf(&mut self, a: NodeId, p: f64) -> NodeId {
        let p_t = T::of(p);
        let v = self.value(a).map(|x| x.powf(p_t));
        self.push(Op::Powf(a, p), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(Op::Relu(a), v)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let v = kernels::matmul(self.value(a), self.value(b), ta, tb)?;
        Ok(self.push(Op::MatMul { a, b, ta, tb }, v))
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let v = kernels::conv2d(self.value(x), self.value(k), stride, pad)?;
        Ok(self.push(Op::Conv2d { x, k, stride, pad }, v))
    }

    fn conv_input_adjoint(
        &mut self,
        g: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
        hw: (usize, usize),
    ) -> Result<NodeId> {
        let v = kernels::conv2d_input_adjoint(self.value(g), self.value(k), stride, pad, hw)?;
        Ok(self.push(Op::ConvInputAdjoint { g, k, stride, pad }, v))
    }

    fn conv_kernel_adjoint(
        &mut self,
        x: NodeId,
        g: NodeId,
        stride: usize,
        pad: usize,
        khw: (usize, usize),
    ) -> Result<NodeId> {
        let v = kernels::conv2d_kernel_adjoint(self.value(x), self.value(g), stride, pad, khw)?;
        Ok(self.push(Op::ConvKernelAdjoint { x, g, stride, pad }, v))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), v)
    }

    /// Spreads a single-element tensor over `shape`.
    pub fn expand(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = self.value(a).item().map_err(rename("expand"))?;
        Ok(self.push(Op::Expand(a), Tensor::full(shape, s)))
    }

    pub fn sum_keep(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = kernels::sum_keep(self.value(x), axis)?;
        Ok(self.push(Op::SumKeep { x, axis }, v))
    }

    pub fn broadcast_along(&mut self, x: NodeId, axis: usize, shape: &[usize]) -> Result<NodeId> {
        let v = kernels::broadcast_along(self.value(x), axis, shape)?;
        Ok(self.push(Op::BroadcastAlong { x, axis }, v))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = kernels::log_softmax_rows(self.value(x))?;
        Ok(self.push(Op::LogSoftmax(x), v))
    }

    /// Adds a per-channel bias `[F]` to `[B, F, ...]`.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("bias_add", format!("input {shape:?} has no channel axis")));
        }
        let spread = self.broadcast_along(bias, 1, &shape)?;
        self.add(x, spread)
    }

    /// `x · weightᵀ (+ bias)` for `x: [B, D]`, `weight: [O, D]`, `bias: [O]`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, weight, false, true)?;
        match bias {
            Some(b) => self.add_channel_bias(y, b),
            None => Ok(y),
        }
    }

    /// Mean over the batch of `−Σ_c target·log softmax(logits)`.
    ///
    /// `target` rows must be probability vectors (one-hot or soft).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let rows = self.shape(logits).first().copied().unwrap_or(0);
        self.cross_entropy_scaled(logits, target, 1.0 / rows.max(1) as f64)
    }

    /// Batch sum of per-example cross-entropies; its input gradient keeps
    /// every example's own gradient scale.
    pub fn cross_entropy_sum(&mut self, logits: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        self.cross_entropy_scaled(logits, target, 1.0)
    }

    fn cross_entropy_scaled(&mut self, logits: NodeId, target: &Tensor<T>, factor: f64) -> Result<NodeId> {
        validate_distribution(target)?;
        if self.shape(logits) != target.shape() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} vs target {:?}", self.shape(logits), target.shape()),
            ));
        }
        let ls = self.log_softmax(logits)?;
        let t = self.constant(target.clone());
        let weighted = self.mul(ls, t)?;
        let total = self.sum(weighted);
        Ok(self.scale(total, -factor))
    }

    /// Mean over the batch of `KL(softmax(p) ‖ softmax(q))`, in log space.
    pub fn kl_divergence(&mut self, p_logits: NodeId, q_logits: NodeId) -> Result<NodeId> {
        if self.shape(p_logits) != self.shape(q_logits) || self.shape(p_logits).len() != 2 {
            return Err(Error::shape(
                "kl_divergence",
                format!("{:?} vs {:?}", self.shape(p_logits), self.shape(q_logits)),
            ));
        }
        let rows = self.shape(p_logits)[0].max(1);
        let lp = self.log_softmax(p_logits)?;
        let lq = self.log_softmax(q_logits)?;
        let p = self.exp(lp);
        let diff = self.sub(lp, lq)?;
        let terms = self.mul(p, diff)?;
        let total = self.sum(terms);
        Ok(self.scale(total, 1.0 / rows as f64))
    }

    /// Per-row cosine similarity of two `[B, ...]` nodes as a `[B]` node,
    /// `a·b · (‖a‖² + τ²)^(-1/2) · (‖b‖² + τ²)^(-1/2)` with `τ = 1e-12`.
    /// Zero rows give 0; differentiable to any order.
    pub fn row_cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        const TAU_SQ: f64 = 1e-24;
        if self.shape(a) != self.shape(b) || self.shape(a).is_empty() {
            return Err(Error::shape(
                "row_cosine",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let rows = self.shape(a)[0];
        let width = self.shape(a)[1..].iter().product::<usize>();
        let a = self.reshape(a, &[rows, width])?;
        let b = self.reshape(b, &[rows, width])?;
        let ab = self.mul(a, b)?;
        let aa = self.mul(a, a)?;
        let bb = self.mul(b, b)?;
        let dot = self.sum_keep(ab, 0)?;
        let na = self.sum_keep(aa, 0)?;
        let nb = self.sum_keep(bb, 0)?;
        let na = self.add_const(na, TAU_SQ);
        let nb = self.add_const(nb, TAU_SQ);
        let ra = self.powf(na, -0.5);
        let rb = self.powf(nb, -0.5);
        let c = self.mul(dot, ra)?;
        self.mul(c, rb)
    }

    /// Records `∂loss/∂wrt` onto the graph and returns the gradient nodes.
    ///
    /// A `wrt` entry the loss does not depend on yields `None`.
    pub fn grad(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<Option<NodeId>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let end = loss.0 + 1;
        // Only propagate into nodes that lie on a path to a requested leaf.
        let mut wanted = vec![false; end];
        for &w in wrt {
            if w.0 < end {
                wanted[w.0] = true;
            }
        }
        for i in 0..end {
            if !wanted[i] && self.nodes[i].requires_grad {
                wanted[i] = self.nodes[i].op.inputs().iter().any(|j| wanted[j.0]);
            }
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; end];
        if wanted[loss.0] {
            let seed = Tensor::ones(self.shape(loss));
            grads[loss.0] = Some(self.constant(seed));
        }
        for i in (0..end).rev() {
            let Some(gy) = grads[i] else { continue };
            if !wanted[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.vjp(NodeId(i), &op, gy, &wanted)? {
                grads[input.0] = Some(match grads[input.0] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| grads.get(w.0).copied().flatten())
            .collect())
    }

    /// First-order gradients of a scalar loss for every parameter and input
    /// leaf recorded before it. Leaves the loss does not reach get zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        let leaves: Vec<NodeId> = (0..=loss.0.min(self.nodes.len().saturating_sub(1)))
            .map(NodeId)
            .filter(|&id| {
                matches!(
                    self.leaf_kind(id),
                    Some(LeafKind::Parameter) | Some(LeafKind::Input)
                )
            })
            .collect();
        let grads = self.grad(loss, &leaves)?;
        let table = leaves
            .iter()
            .zip(grads)
            .map(|(&leaf, g)| {
                let t = match g {
                    Some(g) => self.value(g).clone(),
                    None => Tensor::zeros(self.shape(leaf)),
                };
                (leaf, t)
            })
            .collect();
        Ok(Gradients { table })
    }

    /// Vector-Jacobian products of `node` for each input that needs a gradient.
    fn vjp(&mut self, node: NodeId, op: &Op, gy: NodeId, wanted: &[bool]) -> Result<Vec<(NodeId, NodeId)>> {
        let want = |id: NodeId| wanted[id.0];
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf(_) => {}
            Op::Add(a, b) => {
                if want(a) {
                    out.push((a, gy));
                }
                if want(b) {
                    out.push((b, gy));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    out.push((a, gy));
                }
                if want(b) {
                    out.push((b, self.scale(gy, -1.0)));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    out.push((a, self.mul(gy, b)?));
                }
                if want(b) {
                    out.push((b, self.mul(gy, a)?));
                }
            }
            Op::Scale(a, c) => out.push((a, self.scale(gy, c))),
            Op::AddConst(a) => out.push((a, gy)),
            Op::Exp(a) => out.push((a, self.mul(gy, node)?)),
            Op::Powf(a, p) => {
                let d = self.powf(a, p - 1.0);
                let d = self.scale(d, p);
                out.push((a, self.mul(gy, d)?));
            }
            Op::Relu(a) => {
                // Subgradient at 0 is 0; the mask is piecewise constant.
                let mask = self
                    .value(a)
                    .map(|x| if x > T::zero() { T::one() } else { T::zero() });
                let mask = self.constant(mask);
                out.push((a, self.mul(gy, mask)?));
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                out.push((a, self.reshape(gy, &shape)?));
            }
            Op::MatMul { a, b, ta, tb } => {
                if want(a) {
                    let ga = if ta {
                        self.matmul(b, gy, tb, true)?
                    } else {
                        self.matmul(gy, b, false, !tb)?
                    };
                    out.push((a, ga));
                }
                if want(b) {
                    let gb = if tb {
                        self.matmul(gy, a, true, ta)?
                    } else {
                        self.matmul(a, gy, !ta, false)?
                    };
                    out.push((b, gb));
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                if want(x) {
                    let s = self.shape(x);
                    let hw = (s[2], s[3]);
                    out.push((x, self.conv_input_adjoint(gy, k, stride, pad, hw)?));
                }
                if want(k) {
                    let s = self.shape(k);
                    let khw = (s[2], s[3]);
                    out.push((k, self.conv_kernel_adjoint(x, gy, stride, pad, khw)?));
                }
            }
            Op::ConvInputAdjoint { g, k, stride, pad } => {
                if want(g) {
                    out.push((g, self.conv2d(gy, k, stride, pad)?));
                }
                if want(k) {
                    let s = self.shape(k);
                    let khw = (s[2], s[3]);
                    out.push((k, self.conv_kernel_adjoint(gy, g, stride, pad, khw)?));
                }
            }
            Op::ConvKernelAdjoint { x, g, stride, pad } => {
                if want(x) {
                    let s = self.shape(x);
                    let hw = (s[2], s[3]);
                    out.push((x, self.conv_input_adjoint(g, gy, stride, pad, hw)?));
                }
                if want(g) {
                    out.push((g, self.conv2d(x, gy, stride, pad)?));
                }
            }
            Op::SumAll(a) => {
                let shape = self.shape(a).to_vec();
                out.push((a, self.expand(gy, &shape)?));
            }
            Op::Expand(a) => {
                let s = self.sum(gy);
                let shape = self.shape(a).to_vec();
                out.push((a, self.reshape(s, &shape)?));
            }
            Op::SumKeep { x, axis } => {
                let shape = self.shape(x).to_vec();
                out.push((x, self.broadcast_along(gy, axis, &shape)?));
            }
            Op::BroadcastAlong { x, axis } => out.push((x, self.sum_keep(gy, axis)?)),
            Op::LogSoftmax(a) => {
                // dx = gy − softmax(x)·rowsum(gy)
                let shape = self.shape(a).to_vec();
                let p = self.exp(node);
                let rs = self.sum_keep(gy, 0)?;
                let rs = self.broadcast_along(rs, 0, &shape)?;
                let t = self.mul(p, rs)?;
                out.push((a, self.sub(gy, t)?));
            }
        }
        Ok(out)
    }
}

fn rename(op: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Shape { detail, .. } => Error::Shape { op, detail },
        other => other,
    }
}

/// Each row non-negative and summing to 1 within 1e-6.
pub fn validate_distribution<T: Real>(target: &Tensor<T>) -> Result<()> {
    if target.ndim() != 2 {
        return Err(Error::contract(format!(
            "target must be [B, C] probability rows, got {:?}",
            target.shape()
        )));
    }
    for r in 0..target.dim0() {
        let row = target.row(r);
        if row.iter().any(|&v| v < T::zero() || !v.is_finite()) {
            return Err(Error::contract(format!("target row {r} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("target row {r} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// Central-difference gradient `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h`, one coordinate at a time.
pub fn finite_diff_grad<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    point: &Tensor<T>,
    h: f64,
) -> Result<Tensor<T>> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = point.clone();
    let mut grad = Tensor::zeros(point.shape());
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::of(h);
        let up = f(&probe).as_f64();
        probe.data_mut()[i] = orig - T::of(h);
        let down = f(&probe).as_f64();
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = T::of((up - down) / (2.0 * h));
    }
    Ok(grad)
}
