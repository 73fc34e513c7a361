//! The autodiff graph: eager forward execution, reverse-mode backward.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{Conv1dGeo, Conv2dGeo, Deconv2dGeo};
use super::params::ParamId;
use super::{fmt_shape, Real, Tensor, TensorError};

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

pub(crate) enum Storage<T> {
    Owned(Vec<T>),
    Shared(Arc<Vec<T>>),
}

impl<T> Storage<T> {
    pub(crate) fn as_slice(&self) -> &[T] {
        match self {
            Storage::Owned(v) => v,
            Storage::Shared(v) => v,
        }
    }
}

/// Recorded operation plus whatever state its backward pass needs.
pub(crate) enum Op<T> {
    Leaf,
    Reshape,
    /// Concatenation along the last axis; `parts` holds each input's last-dim width.
    Concat { parts: Vec<usize> },
    /// 1-D slice `[start, start+len)` of a vector.
    Slice { start: usize, len: usize },
    Add,
    Sub,
    Mul,
    Scale { c: T },
    /// `x [.., C] + b [C]`.
    AddBias,
    /// `x [.., C] * g [C]`.
    MulChannels,
    /// Per-channel `(x - mean) * inv_std` with constant statistics.
    NormChannels { inv_std: Vec<T> },
    Relu,
    Sigmoid,
    Tanh,
    SumAll,
    /// `[R, C] -> [R]`, mean over each row.
    RowMean,
    MatMul { m: usize, k: usize, n: usize },
    Transpose,
    /// Softmax along the last axis, applied row by row.
    SoftmaxRows,
    /// Inverted dropout; mask is stored for backward.
    Dropout { keep_inv: T, mask: Vec<bool> },
    Conv1d { geo: Conv1dGeo, relu: bool },
    Conv2d { geo: Conv2dGeo, relu: bool },
    Deconv2d { geo: Deconv2dGeo, relu: bool },
    /// 2x2 max pool, stride 2, floor division; saved flat argmax per output cell.
    MaxPool2 { idx: Vec<u32> },
    /// `[B, W, C] -> [B, C]`, max over the W axis; saved flat argmax.
    MaxOverWidth { idx: Vec<u32> },
    /// Summed binary cross-entropy of a probability vector against fixed labels.
    BceSum { labels: Vec<T> },
}

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Storage<T>,
    pub(crate) op: Op<T>,
    pub(crate) parents: Vec<usize>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) param: Option<ParamId>,
}

/// Used by the gradient checker to nudge one coordinate of one leaf while
/// replaying an otherwise identical graph construction.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LeafOverride<T> {
    pub leaf_index: usize,
    pub coord: usize,
    pub delta: T,
}

pub struct Graph<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    training: bool,
    rng: Option<ChaCha8Rng>,
    pub(crate) stochastic: bool,
    leaf_count: usize,
    pub(crate) leaf_override: Option<LeafOverride<T>>,
}

impl<T: Real> Graph<T> {
    /// Evaluation-mode graph: dropout is the identity, construction is
    /// deterministic.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            training: false,
            rng: None,
            stochastic: false,
            leaf_count: 0,
            leaf_override: None,
        }
    }

    /// Training-mode graph; `seed` drives dropout masks, so identical seeds
    /// reproduce identical masks.
    pub fn training(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            training: true,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            stochastic: false,
            leaf_count: 0,
            leaf_override: None,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    fn apply_override(&mut self, leaf_index: usize, data: &mut Vec<T>) {
        if let Some(ov) = self.leaf_override {
            if ov.leaf_index == leaf_index {
                data[ov.coord] += ov.delta;
            }
        }
    }

    /// Differentiable leaf. Leaves are numbered in creation order; the
    /// gradient checker relies on that numbering being reproducible.
    pub fn var(&mut self, t: Tensor<T>) -> NodeId {
        let leaf_index = self.leaf_count;
        self.leaf_count += 1;
        let Tensor { shape, mut data } = t;
        self.apply_override(leaf_index, &mut data);
        self.push(Node {
            shape,
            data: Storage::Owned(data),
            op: Op::Leaf,
            parents: vec![],
            requires_grad: true,
            grad: None,
            param: None,
        })
    }

    /// Non-differentiable input; backward never propagates into it.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        let Tensor { shape, data } = t;
        self.push(Node {
            shape,
            data: Storage::Owned(data),
            op: Op::Leaf,
            parents: vec![],
            requires_grad: false,
            grad: None,
            param: None,
        })
    }

    /// Non-differentiable input sharing its storage (no copy); useful for
    /// cached per-window features fed into many graphs.
    pub fn constant_shared(&mut self, shape: Vec<usize>, data: Arc<Vec<T>>) -> NodeId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shared constant shape/data disagree"
        );
        self.push(Node {
            shape,
            data: Storage::Shared(data),
            op: Op::Leaf,
            parents: vec![],
            requires_grad: false,
            grad: None,
            param: None,
        })
    }

    /// Parameter leaf sharing storage with the store entry (no copy). The
    /// node remembers its [`ParamId`] so gradients can be handed back.
    pub fn param(&mut self, store: &super::ParamStore<T>, id: ParamId) -> NodeId {
        let leaf_index = self.leaf_count;
        self.leaf_count += 1;
        let entry = store.entry(id);
        let (shape, data) = if self.leaf_override.map(|o| o.leaf_index) == Some(leaf_index) {
            let mut data = entry.value().to_vec();
            self.apply_override(leaf_index, &mut data);
            (entry.shape().to_vec(), Storage::Owned(data))
        } else {
            (entry.shape().to_vec(), Storage::Shared(entry.shared_value()))
        };
        self.push(Node {
            shape,
            data,
            op: Op::Leaf,
            parents: vec![],
            requires_grad: true,
            grad: None,
            param: Some(id),
        })
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[T] {
        self.nodes[id.0].data.as_slice()
    }

    pub fn value(&self, id: NodeId) -> Tensor<T> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.data(id).to_vec())
            .expect("node shape/data consistent")
    }

    /// Gradient of the last backward pass. Retained for leaves only;
    /// interior node gradients are dropped as soon as they are consumed.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn check_finite(&self, id: NodeId, context: &str) -> Result<(), TensorError> {
        if self.data(id).iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite(context.to_string()))
        }
    }

    pub(crate) fn out(
        &mut self,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        parents: &[NodeId],
    ) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Node {
            shape,
            data: Storage::Owned(data),
            op,
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            grad: None,
            param: None,
        })
    }

    /// Inverted dropout. Identity in evaluation mode; in training mode draws
    /// a keep mask and marks the graph stochastic.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Geometry {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        self.stochastic = true;
        let keep = 1.0 - rate;
        let rng = self.rng.as_mut().expect("training graph has an rng");
        let mask: Vec<bool> = (0..self.nodes[x.0].data.as_slice().len())
            .map(|_| rng.gen::<f64>() < keep)
            .collect();
        let keep_inv = T::from_f64(1.0 / keep);
        let data: Vec<T> = self.nodes[x.0]
            .data
            .as_slice()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v * keep_inv } else { T::zero() })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.out(shape, data, Op::Dropout { keep_inv, mask }, &[x]))
    }

    /// Reverse pass from a scalar node, seeding with 1.
    pub fn backward(&mut self, from: NodeId) -> Result<(), TensorError> {
        if self.nodes[from.0].data.as_slice().len() != 1 {
            return Err(TensorError::Geometry {
                op: "backward",
                msg: format!(
                    "expected scalar root, got shape {}",
                    fmt_shape(&self.nodes[from.0].shape)
                ),
            });
        }
        self.backward_seeded(from, vec![T::one()])
    }

    /// Reverse pass seeding an arbitrary node with an externally supplied
    /// gradient (used to chain separately built graphs).
    pub fn backward_seeded(&mut self, from: NodeId, seed: Vec<T>) -> Result<(), TensorError> {
        if seed.len() != self.nodes[from.0].data.as_slice().len() {
            return Err(TensorError::DimMismatch {
                op: "backward",
                left: fmt_shape(&self.nodes[from.0].shape),
                right: format!("seed of {} elements", seed.len()),
            });
        }
        self.accumulate(from.0, seed);
        for idx in (0..=from.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            let parents = self.nodes[idx].parents.clone();
            let contribs = self.backprop(idx, &op, &parents, &gout)?;
            for (p, c) in contribs {
                self.accumulate(p, c);
            }
        }
        Ok(())
    }

    /// Adds a gradient contribution; the first contribution becomes the
    /// buffer without a copy.
    fn accumulate(&mut self, idx: usize, contrib: Vec<T>) {
        match &mut self.nodes[idx].grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Collects `(param, gradient)` pairs from parameter leaves, leaving the
    /// graph ready to be dropped.
    pub fn take_param_grads(&mut self) -> Vec<(ParamId, Vec<T>)> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            if let (Some(id), Some(g)) = (node.param, node.grad.take()) {
                out.push((id, g));
            }
        }
        out
    }

    /// Dispatch table: returns gradient contributions per parent. Parent
    /// values are read immutably here; accumulation happens in the caller.
    fn backprop(
        &self,
        idx: usize,
        op: &Op<T>,
        parents: &[usize],
        gout: &[T],
    ) -> Result<Vec<(usize, Vec<T>)>, TensorError> {
        let value = self.nodes[idx].data.as_slice();
        let pdata = |i: usize| self.nodes[parents[i]].data.as_slice();
        let pshape = |i: usize| self.nodes[parents[i]].shape.as_slice();
        let needs = |i: usize| self.nodes[parents[i]].requires_grad;
        let mut contribs: Vec<(usize, Vec<T>)> = Vec::with_capacity(parents.len());
        let mut emit = |slot: usize, g: Vec<T>| contribs.push((parents[slot], g));

        match op {
            Op::Leaf => {}
            Op::Reshape => {
                if needs(0) {
                    emit(0, gout.to_vec());
                }
            }
            Op::Concat { parts } => {
                let total: usize = parts.iter().sum();
                let rows = gout.len() / total;
                let mut offset = 0;
                for (i, &w) in parts.iter().enumerate() {
                    if needs(i) {
                        let mut g = vec![T::zero(); rows * w];
                        for r in 0..rows {
                            let src = &gout[r * total + offset..r * total + offset + w];
                            g[r * w..(r + 1) * w].copy_from_slice(src);
                        }
                        emit(i, g);
                    }
                    offset += w;
                }
            }
            Op::Slice { start, len } => {
                if needs(0) {
                    let mut g = vec![T::zero(); pdata(0).len()];
                    g[*start..start + len].copy_from_slice(gout);
                    emit(0, g);
                }
            }
            Op::Add => {
                if needs(0) {
                    emit(0, gout.to_vec());
                }
                if needs(1) {
                    emit(1, gout.to_vec());
                }
            }
            Op::Sub => {
                if needs(0) {
                    emit(0, gout.to_vec());
                }
                if needs(1) {
                    emit(1, gout.iter().map(|&g| -g).collect());
                }
            }
            Op::Mul => {
                if needs(0) {
                    emit(0, gout.iter().zip(pdata(1)).map(|(&g, &b)| g * b).collect());
                }
                if needs(1) {
                    emit(1, gout.iter().zip(pdata(0)).map(|(&g, &a)| g * a).collect());
                }
            }
            Op::Scale { c } => {
                if needs(0) {
                    emit(0, gout.iter().map(|&g| g * *c).collect());
                }
            }
            Op::AddBias => {
                if needs(0) {
                    emit(0, gout.to_vec());
                }
                if needs(1) {
                    let c = pdata(1).len();
                    let mut g = vec![T::zero(); c];
                    for chunk in gout.chunks_exact(c) {
                        for (a, &b) in g.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    emit(1, g);
                }
            }
            Op::MulChannels => {
                let c = pdata(1).len();
                if needs(0) {
                    let gch = pdata(1);
                    let mut g = vec![T::zero(); gout.len()];
                    for (gr, or) in g.chunks_exact_mut(c).zip(gout.chunks_exact(c)) {
                        for ((a, &b), &w) in gr.iter_mut().zip(or).zip(gch) {
                            *a = b * w;
                        }
                    }
                    emit(0, g);
                }
                if needs(1) {
                    let x = pdata(0);
                    let mut g = vec![T::zero(); c];
                    for (or, xr) in gout.chunks_exact(c).zip(x.chunks_exact(c)) {
                        for ((a, &b), &xv) in g.iter_mut().zip(or).zip(xr) {
                            *a += b * xv;
                        }
                    }
                    emit(1, g);
                }
            }
            Op::NormChannels { inv_std } => {
                if needs(0) {
                    let c = inv_std.len();
                    let mut g = vec![T::zero(); gout.len()];
                    for (gr, or) in g.chunks_exact_mut(c).zip(gout.chunks_exact(c)) {
                        for ((a, &b), &s) in gr.iter_mut().zip(or).zip(inv_std.iter()) {
                            *a = b * s;
                        }
                    }
                    emit(0, g);
                }
            }
            Op::Relu => {
                if needs(0) {
                    emit(
                        0,
                        gout.iter()
                            .zip(value)
                            .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                            .collect(),
                    );
                }
            }
            Op::Sigmoid => {
                if needs(0) {
                    emit(
                        0,
                        gout.iter()
                            .zip(value)
                            .map(|(&g, &y)| g * y * (T::one() - y))
                            .collect(),
                    );
                }
            }
            Op::Tanh => {
                if needs(0) {
                    emit(
                        0,
                        gout.iter()
                            .zip(value)
                            .map(|(&g, &y)| g * (T::one() - y * y))
                            .collect(),
                    );
                }
            }
            Op::SumAll => {
                if needs(0) {
                    emit(0, vec![gout[0]; pdata(0).len()]);
                }
            }
            Op::RowMean => {
                if needs(0) {
                    let cols = pshape(0)[1];
                    let inv = T::from_f64(1.0 / cols as f64);
                    let mut g = vec![T::zero(); pdata(0).len()];
                    for (r, row) in g.chunks_exact_mut(cols).enumerate() {
                        let gv = gout[r] * inv;
                        for a in row {
                            *a = gv;
                        }
                    }
                    emit(0, g);
                }
            }
            Op::MatMul { m, k, n } => {
                super::ops::matmul_backward(
                    (*m, *k, *n),
                    pdata(0),
                    pdata(1),
                    gout,
                    needs(0),
                    needs(1),
                    &mut emit,
                );
            }
            Op::Transpose => {
                if needs(0) {
                    let (r, c) = (pshape(0)[0], pshape(0)[1]);
                    let mut g = vec![T::zero(); r * c];
                    // gout is [c, r]
                    for i in 0..c {
                        for j in 0..r {
                            g[j * c + i] = gout[i * r + j];
                        }
                    }
                    emit(0, g);
                }
            }
            Op::SoftmaxRows => {
                if needs(0) {
                    let cols = *pshape(0).last().expect("softmax input has an axis");
                    let mut g = vec![T::zero(); gout.len()];
                    for ((gr, or), yr) in g
                        .chunks_exact_mut(cols)
                        .zip(gout.chunks_exact(cols))
                        .zip(value.chunks_exact(cols))
                    {
                        let dot: T = or.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((a, &go), &y) in gr.iter_mut().zip(or).zip(yr) {
                            *a = (go - dot) * y;
                        }
                    }
                    emit(0, g);
                }
            }
            Op::Dropout { keep_inv, mask } => {
                if needs(0) {
                    emit(
                        0,
                        gout.iter()
                            .zip(mask)
                            .map(|(&g, &m)| if m { g * *keep_inv } else { T::zero() })
                            .collect(),
                    );
                }
            }
            Op::Conv1d { geo, relu } => {
                super::conv::conv1d_backward(
                    geo,
                    *relu,
                    value,
                    pdata(0),
                    pdata(1),
                    gout,
                    [needs(0), needs(1), parents.len() > 2 && needs(2)],
                    &mut emit,
                );
            }
            Op::Conv2d { geo, relu } => {
                super::conv::conv2d_backward(
                    geo,
                    *relu,
                    value,
                    pdata(0),
                    pdata(1),
                    gout,
                    [needs(0), needs(1), parents.len() > 2 && needs(2)],
                    &mut emit,
                );
            }
            Op::Deconv2d { geo, relu } => {
                super::conv::deconv2d_backward(
                    geo,
                    *relu,
                    value,
                    pdata(0),
                    pdata(1),
                    gout,
                    [needs(0), needs(1), parents.len() > 2 && needs(2)],
                    &mut emit,
                );
            }
            Op::MaxPool2 { idx: argmax } => {
                if needs(0) {
                    let mut g = vec![T::zero(); pdata(0).len()];
                    for (&src, &go) in argmax.iter().zip(gout) {
                        g[src as usize] += go;
                    }
                    emit(0, g);
                }
            }
            Op::MaxOverWidth { idx: argmax } => {
                if needs(0) {
                    let mut g = vec![T::zero(); pdata(0).len()];
                    for (&src, &go) in argmax.iter().zip(gout) {
                        g[src as usize] += go;
                    }
                    emit(0, g);
                }
            }
            Op::BceSum { labels } => {
                if needs(0) {
                    let eps = T::from_f64(super::ops::BCE_EPS);
                    let one = T::one();
                    let g: Vec<T> = pdata(0)
                        .iter()
                        .zip(labels)
                        .map(|(&p, &y)| {
                            if p < eps || p > one - eps {
                                T::zero()
                            } else {
                                gout[0] * -(y / p - (one - y) / (one - p))
                            }
                        })
                        .collect();
                    emit(0, g);
                }
            }
        }
        let _ = idx;
        Ok(contribs)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}
