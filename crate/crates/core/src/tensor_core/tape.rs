//! Reverse-mode automatic differentiation over whole tensors.
//!
//! Every operation appends a node holding its output value, so the tape is
//! topologically ordered by construction. [`Tape::backward`] walks it in
//! reverse and only visits nodes that depend on something requiring a
//! gradient; frozen parameters therefore cost nothing beyond the input
//! gradients that flow through them.
//!
//! Broadcasting is limited to leading dimensions: in a binary op one operand
//! may have a shape that is a suffix of the other's, and is then repeated.
//! In row-major layout that is plain modulo indexing.

use std::collections::BTreeMap;

use super::gemm;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Constant leaf.
    Input,
    /// Unnamed leaf that receives a gradient.
    Var,
    /// Named parameter leaf.
    Param(String),
    /// `[.., k] × [k, n] → [.., n]`.
    MatMul(NodeId, NodeId),
    /// `[.., m, k] × [.., k, n]`, or `× [.., n, k]ᵀ` when `trans_b`.
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    LeakyRelu(NodeId, f64),
    /// Tanh approximation.
    Gelu(NodeId),
    /// Softmax over the last dimension.
    Softmax(NodeId),
    /// Layer normalization over the last dimension.
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    /// `x[..., start..start + len]`.
    SliceLast {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SumAll(NodeId),
    /// Sum over the last dimension.
    SumLast(NodeId),
    MeanAll(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match *self {
            Input | Var | Param(_) => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![a, b],
            BatchMatMul { a, b, .. } => vec![a, b],
            Scale(a, _) | LeakyRelu(a, _) | Gelu(a) | Softmax(a) | Reshape(a) => vec![a],
            Permute(a, _) | SumAll(a) | SumLast(a) | MeanAll(a) => vec![a],
            SliceLast { x, .. } => vec![x],
            LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
        }
    }

    /// Short name used in diagnostics.
    pub fn kind(&self) -> &'static str {
        use Op::*;
        match self {
            Input => "input",
            Var => "var",
            Param(_) => "param",
            MatMul(..) => "matmul",
            BatchMatMul { .. } => "batch_matmul",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale(..) => "scale",
            LeakyRelu(..) => "leaky_relu",
            Gelu(_) => "gelu",
            Softmax(_) => "softmax",
            LayerNorm { .. } => "layer_norm",
            Reshape(_) => "reshape",
            Permute(..) => "permute",
            SliceLast { .. } => "slice_last",
            SumAll(_) => "sum",
            SumLast(_) => "sum_last",
            MeanAll(_) => "mean",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded computation. Nodes are appended in evaluation order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    track_frozen: bool,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a named trainable parameter.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// Gradient with respect to any node that required one.
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which frozen parameters also receive gradients.
    pub fn tracking_frozen() -> Self {
        Self {
            track_frozen: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.push_leaf(op, value, requires_grad)
    }

    fn push_leaf(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Input, value, false)
    }

    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Var, value, true)
    }

    /// Places a named parameter on the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        let requires_grad = p.trainable || self.track_frozen;
        let id = self.push_leaf(Op::Param(name.to_string()), p.value.clone(), requires_grad);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    fn record(&mut self, op: Op) -> Result<NodeId> {
        let value = {
            let inputs: Vec<&Tensor> = op.inputs().iter().map(|i| &self.nodes[i.0].value).collect();
            eval(&op, &inputs)?
        };
        Ok(self.push(op, value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul(a, b))
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        self.record(Op::BatchMatMul { a, b, trans_b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::Scale(a, c))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.record(Op::LeakyRelu(a, slope))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Gelu(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        self.record(Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        self.record(Op::Permute(a, perm.to_vec()))
    }

    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.record(Op::SliceLast { x, start, len })
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::SumAll(a))
    }

    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::SumLast(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::MeanAll(a))
    }

    /// `x·W + b` with `W: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Re-evaluates every node from its recorded inputs.
    ///
    /// Leaves keep their stored values; the returned tensors can be compared
    /// with [`Tape::value`] to confirm that recording is reproducible.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut out: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Input | Op::Var | Op::Param(_) => node.value.clone(),
                Op::Reshape(a) => out[a.0].clone().reshape(node.value.shape())?,
                ref op => {
                    let inputs: Vec<&Tensor> = op.inputs().iter().map(|i| &out[i.0]).collect();
                    eval(op, &inputs)?
                }
            };
            out.push(value);
        }
        Ok(out)
    }

    /// Gradients of a scalar `loss` with respect to every leaf that requires one.
    ///
    /// Registered trainable parameters that `loss` does not depend on get
    /// zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(loss_value.shape()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.op.inputs().is_empty() {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (name, &id) in &self.params {
            if !self.nodes[id.0].requires_grad {
                continue;
            }
            let g = grads[id.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape()));
            params.insert(name.clone(), g);
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let gd = g.data();
        match node.op {
            Op::Input | Op::Var | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let k = bv.shape()[0];
                let n = bv.shape()[1];
                let m = av.len() / k;
                if self.wants(a) {
                    // dA += G·Bᵀ
                    let buf = grad_buf(grads, a, av.shape());
                    gemm(m, n, k, 1.0, gd, (n, 1), bv.data(), (1, n), 1.0, buf, (k, 1));
                }
                if self.wants(b) {
                    // dB += Aᵀ·G
                    let buf = grad_buf(grads, b, bv.shape());
                    gemm(k, m, n, 1.0, av.data(), (1, k), gd, (n, 1), 1.0, buf, (n, 1));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(a), val(b));
                let r = av.rank();
                let (m, k) = (av.shape()[r - 2], av.shape()[r - 1]);
                let n = if trans_b { bv.shape()[r - 2] } else { bv.shape()[r - 1] };
                let batches = av.len() / (m * k);
                if self.wants(a) {
                    let buf = grad_buf(grads, a, av.shape());
                    for i in 0..batches {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                        let di = &mut buf[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            // C = A·Bᵀ, B is n×k: dA += G·B
                            gemm(m, n, k, 1.0, gi, (n, 1), bi, (k, 1), 1.0, di, (k, 1));
                        } else {
                            // dA += G·Bᵀ, B is k×n
                            gemm(m, n, k, 1.0, gi, (n, 1), bi, (1, n), 1.0, di, (k, 1));
                        }
                    }
                }
                if self.wants(b) {
                    let buf = grad_buf(grads, b, bv.shape());
                    for i in 0..batches {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let di = &mut buf[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // dB (n×k) += Gᵀ·A
                            gemm(n, m, k, 1.0, gi, (1, n), ai, (k, 1), 1.0, di, (k, 1));
                        } else {
                            // dB (k×n) += Aᵀ·G
                            gemm(k, m, n, 1.0, ai, (1, k), gi, (n, 1), 1.0, di, (n, 1));
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(a) {
                    let buf = grad_buf(grads, a, val(a).shape());
                    accumulate_broadcast(buf, gd, |_, gi| gi);
                }
                if self.wants(b) {
                    let buf = grad_buf(grads, b, val(b).shape());
                    accumulate_broadcast(buf, gd, |_, gi| sign * gi);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                let (na, nb) = (av.len(), bv.len());
                if self.wants(a) {
                    let buf = grad_buf(grads, a, val(a).shape());
                    accumulate_broadcast(buf, gd, |i, gi| gi * bv[i % nb]);
                }
                if self.wants(b) {
                    let buf = grad_buf(grads, b, val(b).shape());
                    accumulate_broadcast(buf, gd, |i, gi| gi * av[i % na]);
                }
            }
            Op::Scale(a, c) => {
                let buf = grad_buf(grads, a, val(a).shape());
                buf.iter_mut().zip(gd).for_each(|(d, gi)| *d += c * gi);
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(a).data();
                let buf = grad_buf(grads, a, val(a).shape());
                for ((d, gi), xi) in buf.iter_mut().zip(gd).zip(x) {
                    *d += if *xi > 0.0 { *gi } else { slope * gi };
                }
            }
            Op::Gelu(a) => {
                let x = val(a).data();
                let buf = grad_buf(grads, a, val(a).shape());
                for ((d, gi), xi) in buf.iter_mut().zip(gd).zip(x) {
                    *d += gi * gelu_grad(*xi);
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let width = last_dim(node.value.shape());
                let buf = grad_buf(grads, a, val(a).shape());
                for ((drow, grow), yrow) in buf.chunks_mut(width).zip(gd.chunks(width)).zip(y.chunks(width)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (g - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                self.layer_norm_backward(x, gain, bias, eps, gd, grads);
            }
            Op::Reshape(a) => {
                let buf = grad_buf(grads, a, val(a).shape());
                buf.iter_mut().zip(gd).for_each(|(d, gi)| *d += gi);
            }
            Op::Permute(a, ref perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute(g, &inverse)?;
                let buf = grad_buf(grads, a, val(a).shape());
                buf.iter_mut().zip(back.data()).for_each(|(d, gi)| *d += gi);
            }
            Op::SliceLast { x, start, len } => {
                let width = last_dim(val(x).shape());
                let buf = grad_buf(grads, x, val(x).shape());
                for (drow, grow) in buf.chunks_mut(width).zip(gd.chunks(len)) {
                    drow[start..start + len]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(d, gi)| *d += gi);
                }
            }
            Op::SumAll(a) => {
                let g0 = gd[0];
                let buf = grad_buf(grads, a, val(a).shape());
                buf.iter_mut().for_each(|d| *d += g0);
            }
            Op::MeanAll(a) => {
                let n = val(a).len() as f64;
                let g0 = gd[0] / n;
                let buf = grad_buf(grads, a, val(a).shape());
                buf.iter_mut().for_each(|d| *d += g0);
            }
            Op::SumLast(a) => {
                let width = last_dim(val(a).shape());
                let buf = grad_buf(grads, a, val(a).shape());
                for (drow, gi) in buf.chunks_mut(width).zip(gd) {
                    drow.iter_mut().for_each(|d| *d += gi);
                }
            }
        }
        Ok(())
    }

    fn layer_norm_backward(
        &self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let xv = &self.nodes[x.0].value;
        let gv = self.nodes[gain.0].value.data();
        let width = last_dim(xv.shape());
        let rows = xv.len() / width;
        let mut dgain = vec![0.0; width];
        let mut dbias = vec![0.0; width];
        let mut dx = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; width];
        let mut dxhat = vec![0.0; width];
        for r in 0..rows {
            let xr = &xv.data()[r * width..(r + 1) * width];
            let gr = &gd[r * width..(r + 1) * width];
            let (mean, rstd) = row_stats(xr, eps);
            for j in 0..width {
                xhat[j] = (xr[j] - mean) * rstd;
                dgain[j] += gr[j] * xhat[j];
                dbias[j] += gr[j];
                dxhat[j] = gr[j] * gv[j];
            }
            let w = width as f64;
            let m1 = dxhat.iter().sum::<f64>() / w;
            let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / w;
            let out = &mut dx[r * width..(r + 1) * width];
            for j in 0..width {
                out[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
            }
        }
        if self.wants(x) {
            let buf = grad_buf(grads, x, xv.shape());
            buf.iter_mut().zip(&dx).for_each(|(d, v)| *d += v);
        }
        if self.wants(gain) {
            let buf = grad_buf(grads, gain, &[width]);
            buf.iter_mut().zip(&dgain).for_each(|(d, v)| *d += v);
        }
        if self.wants(bias) {
            let buf = grad_buf(grads, bias, &[width]);
            buf.iter_mut().zip(&dbias).for_each(|(d, v)| *d += v);
        }
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> &'a mut [f64] {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

/// Adds `f(i, g[i])` into `buf[i % buf.len()]`.
fn accumulate_broadcast(buf: &mut [f64], g: &[f64], f: impl Fn(usize, f64) -> f64) {
    let n = buf.len();
    if n == g.len() {
        for (i, (d, gi)) in buf.iter_mut().zip(g).enumerate() {
            *d += f(i, *gi);
        }
    } else {
        for (i, gi) in g.iter().enumerate() {
            buf[i % n] += f(i, *gi);
        }
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let w = row.len() as f64;
    let mean = row.iter().sum::<f64>() / w;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w;
    (mean, 1.0 / (var + eps).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Output shape of a suffix-broadcast binary op, or a dimension error.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b || a.ends_with(b) {
        Ok(a.to_vec())
    } else if b.ends_with(a) {
        Ok(b.to_vec())
    } else {
        Err(Error::dim(op, a, b))
    }
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let n: usize = shape.iter().product();
    let data = if ad.len() == n && bd.len() == n {
        ad.iter().zip(bd).map(|(x, y)| f(*x, *y)).collect()
    } else {
        (0..n).map(|i| f(ad[i % ad.len()], bd[i % bd.len()])).collect()
    };
    Tensor::new(&shape, data)
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = a.data().iter().map(|v| f(*v)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

pub(crate) fn permute(a: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = a.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Contract(format!("invalid permutation {perm:?} for rank {rank}")));
    }
    let in_shape = a.shape();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = a.data();
    let mut data = Vec::with_capacity(a.len());
    if rank == 0 || a.is_empty() {
        return Tensor::new(&out_shape, src.to_vec());
    }
    // Walk the output in row-major order; the innermost axis is copied in a tight loop.
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data.extend((0..inner).map(|j| src[base + j * inner_stride]));
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, data)
}

/// Forward kernel of every non-leaf op. Shared by recording and replay.
fn eval(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match *op {
        Op::Input | Op::Var | Op::Param(_) => Err(Error::Contract("leaf has no kernel".into())),
        Op::MatMul(..) => {
            let (a, b) = (inputs[0], inputs[1]);
            if b.rank() != 2 || a.rank() < 1 || a.shape()[a.rank() - 1] != b.shape()[0] {
                return Err(Error::dim("matmul", a.shape(), b.shape()));
            }
            let (k, n) = (b.shape()[0], b.shape()[1]);
            let m = a.len() / k.max(1);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, 1.0, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out, (n, 1));
            Tensor::new(&shape, out)
        }
        Op::BatchMatMul { trans_b, .. } => {
            let (a, b) = (inputs[0], inputs[1]);
            let r = a.rank();
            if r < 2 || b.rank() != r || a.shape()[..r - 2] != b.shape()[..r - 2] {
                return Err(Error::dim("batch_matmul", a.shape(), b.shape()));
            }
            let (m, k) = (a.shape()[r - 2], a.shape()[r - 1]);
            let (bk, n) = if trans_b {
                (b.shape()[r - 1], b.shape()[r - 2])
            } else {
                (b.shape()[r - 2], b.shape()[r - 1])
            };
            if bk != k {
                return Err(Error::dim("batch_matmul", a.shape(), b.shape()));
            }
            let batches: usize = a.shape()[..r - 2].iter().product();
            let mut out = vec![0.0; batches * m * n];
            for i in 0..batches {
                let ai = &a.data()[i * m * k..(i + 1) * m * k];
                let bi = &b.data()[i * k * n..(i + 1) * k * n];
                let ci = &mut out[i * m * n..(i + 1) * m * n];
                let bs = if trans_b { (1, k) } else { (n, 1) };
                gemm(m, k, n, 1.0, ai, (k, 1), bi, bs, 0.0, ci, (n, 1));
            }
            let mut shape = a.shape().to_vec();
            shape[r - 1] = n;
            Tensor::new(&shape, out)
        }
        Op::Add(..) => binary("add", inputs[0], inputs[1], |x, y| x + y),
        Op::Sub(..) => binary("sub", inputs[0], inputs[1], |x, y| x - y),
        Op::Mul(..) => binary("mul", inputs[0], inputs[1], |x, y| x * y),
        Op::Scale(_, c) => Ok(map(inputs[0], |v| c * v)),
        Op::LeakyRelu(_, s) => Ok(map(inputs[0], |v| if v > 0.0 { v } else { s * v })),
        Op::Gelu(_) => Ok(map(inputs[0], gelu)),
        Op::Softmax(_) => {
            let x = inputs[0];
            let width = last_dim(x.shape());
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(width) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
            Tensor::new(x.shape(), out)
        }
        Op::LayerNorm { eps, .. } => {
            let (x, gain, bias) = (inputs[0], inputs[1], inputs[2]);
            let width = last_dim(x.shape());
            if gain.shape() != [width] || bias.shape() != [width] {
                return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
            }
            let (g, b) = (gain.data(), bias.data());
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(width) {
                let (mean, rstd) = row_stats(row, eps);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = g[j] * ((*v - mean) * rstd) + b[j];
                }
            }
            Tensor::new(x.shape(), out)
        }
        Op::Reshape(_) => Err(Error::Contract("reshape is recorded directly".into())),
        Op::Permute(_, ref perm) => permute(inputs[0], perm),
        Op::SliceLast { start, len, .. } => {
            let x = inputs[0];
            let width = last_dim(x.shape());
            if x.rank() == 0 || start + len > width || len == 0 {
                return Err(Error::Contract(format!(
                    "slice {start}..{} out of range for width {width}",
                    start + len
                )));
            }
            let data = x
                .data()
                .chunks(width)
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect();
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::new(&shape, data)
        }
        Op::SumAll(_) => Ok(Tensor::scalar(inputs[0].sum())),
        Op::MeanAll(_) => {
            let x = inputs[0];
            if x.is_empty() {
                return Err(Error::Contract("mean of empty tensor".into()));
            }
            Ok(Tensor::scalar(x.sum() / x.len() as f64))
        }
        Op::SumLast(_) => {
            let x = inputs[0];
            if x.rank() == 0 {
                return Err(Error::Contract("sum_last of a scalar".into()));
            }
            let width = last_dim(x.shape());
            let data = x.data().chunks(width).map(|r| r.iter().sum()).collect();
            Tensor::new(&x.shape()[..x.rank() - 1], data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i3 = tape.input(Tensor::identity(3));
        let b = tape.input(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(i3, b).unwrap();
        assert!(tape.value(y).bit_eq(tape.value(b)));

        let a = tape.input(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.input(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, c).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_is_ones_times_b_transposed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng);
        let b0 = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let a = tape.var(a0);
        let b = tape.input(b0.clone());
        let y = tape.matmul(a, b).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        let ga = g.node(a).unwrap();
        // ones(5,3)·bᵀ: every row equals the row sums of b.
        for r in 0..5 {
            for c in 0..4 {
                let expect: f64 = (0..3).map(|j| b0.at2(c, j)).sum();
                assert!((ga.at2(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_anchor_cases() {
        let mut tape = Tape::new();
        let z = tape.input(t(&[2], &[0.0, 0.0]));
        let s = tape.softmax(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let x = tape.input(t(&[2], &[-1.0, 2.0]));
        let l = tape.leaky_relu(x, 0.01).unwrap();
        assert_eq!(tape.value(l).data(), &[-0.01, 2.0]);

        let c = tape.input(t(&[4], &[3.0; 4]));
        let g = tape.input(t(&[4], &[2.0, -1.0, 0.5, 7.0]));
        let b = tape.input(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn broadcasting_is_suffix_only() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::ones(&[2, 3, 4]));
        let row = tape.input(Tensor::full(&[4], 2.0));
        let plane = tape.input(Tensor::full(&[3, 4], 3.0));
        let bad = tape.input(Tensor::ones(&[2, 1]));
        let y = tape.add(x, row).unwrap();
        assert_eq!(tape.value(y).data()[5], 3.0);
        let y = tape.mul(plane, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 4]);
        assert!(matches!(tape.add(x, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sum_and_square_norm_gradients() {
        let x0 = t(&[3], &[0.5, -2.0, 1.5]);
        let mut tape = Tape::new();
        let x = tape.var(x0.clone());
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.backward(s).unwrap().node(x).unwrap().data(), &[1.0; 3]);

        let mut tape = Tape::new();
        let x = tape.var(x0.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.node(x).unwrap().data(), &[1.0, -4.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::ones(&[3]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_trainable_param_gets_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::ones(&[2]), true).unwrap();
        store.insert("unused", Tensor::ones(&[3]), true).unwrap();
        store.insert("frozen", Tensor::ones(&[2]), false).unwrap();
        let mut tape = Tape::new();
        let u = tape.param(&store, "used").unwrap();
        let _ = tape.param(&store, "unused").unwrap();
        let f = tape.param(&store, "frozen").unwrap();
        let y = tape.mul(u, f).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param("used").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.param("unused").unwrap().data(), &[0.0; 3]);
        assert!(g.param("frozen").is_none());
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::new(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let y = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        // y[k, i, j] = x[i, j, k] at (k, i, j) = (1, 1, 2)
        let (k, i, j) = (1, 1, 2);
        assert_eq!(y.data()[k * 6 + i * 3 + j], x.data()[i * 12 + j * 4 + k]);
        let back = permute(&y, &[1, 2, 0]).unwrap();
        assert!(back.bit_eq(&x));
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.var(Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng));
        let w = tape.input(Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng));
        let g = tape.input(Tensor::ones(&[4]));
        let b = tape.input(Tensor::zeros(&[4]));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.layer_norm(h, g, b, 1e-5).unwrap();
        let h = tape.gelu(h).unwrap();
        let p = tape.permute(h, &[0, 2, 1]).unwrap();
        let s = tape.batch_matmul(p, p, true).unwrap();
        let s = tape.softmax(s).unwrap();
        let r = tape.reshape(s, &[2, 16]).unwrap();
        let q = tape.slice_last(r, 3, 5).unwrap();
        let q = tape.sum_last(q).unwrap();
        let _ = tape.mean(q).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert!(v.bit_eq(tape.value(NodeId(i))), "node {i} differs");
        }
    }
}
