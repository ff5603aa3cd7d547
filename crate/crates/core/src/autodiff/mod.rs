//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly: each call computes its value
//! immediately and remembers enough to run the adjoint later. Values that
//! enter through [`Graph::input`] are constants; those that enter through
//! [`Graph::param`] receive gradients. Anything computed by reading a node's
//! value and feeding it back through `input` is, by construction, outside
//! the gradient path.

mod kernels;

pub use kernels::ConvSpec;

use crate::error::{Error, Result};
use crate::losses::{masked_nll, masked_nll_grad};
use crate::tensor::Tensor;
use kernels::ConvShape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Normalization statistics source for [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current mini-batch.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics observed by a batch-statistics normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Concat(Vec<NodeId>),
    GlobalAvgPool(NodeId),
    Resize(NodeId),
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Softmax(NodeId),
    MaskedNll {
        prob: NodeId,
        targets: Vec<u8>,
        keep: Vec<bool>,
    },
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
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

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// A constant: no gradient flows into or through it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let (b, c, h, wd) = self.value(x).dims4()?;
        let (o, ci, kh, kw) = self.value(w).dims4()?;
        if ci != c || kh != kw {
            return Err(shape_err(format!(
                "conv weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if let Some(bias) = bias {
            if self.value(bias).shape() != [o] {
                return Err(shape_err(format!(
                    "conv bias {:?} for {o} output channels",
                    self.value(bias).shape()
                )));
            }
        }
        let (ho, wo) = match (spec.output_len(h, kh), spec.output_len(wd, kw)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(shape_err(format!(
                    "input {h}x{wd} too small for kernel {kh} with {spec:?}"
                )))
            }
        };
        let shape = ConvShape {
            c,
            h,
            w: wd,
            k: kh,
            ho,
            wo,
            spec,
        };
        let mut out = Tensor::zeros(&[b, o, ho, wo]);
        kernels::conv2d_forward(
            self.value(x).data(),
            b,
            self.value(w).data(),
            o,
            bias.map(|id| self.value(id).data()),
            &shape,
            out.data_mut(),
        );
        let mut deps = vec![x, w];
        deps.extend(bias);
        let needs = self.needs(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, bias, spec }, needs))
    }

    /// Per-channel normalization of an NCHW tensor followed by an affine map.
    /// Returns the observed statistics when normalizing with batch statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(format!(
                "batch norm affine parameters do not match {c} channels"
            )));
        }
        let hw = h * w;
        let n = (b * hw) as f64;
        let xs = self.value(x).data();
        let (mean, var, observed) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (ch, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                    let mut sum = 0.0;
                    for bi in 0..b {
                        sum += xs[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                            .iter()
                            .sum::<f64>();
                    }
                    *m = sum / n;
                    let mut sq = 0.0;
                    for bi in 0..b {
                        for &val in &xs[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                            sq += (val - *m) * (val - *m);
                        }
                    }
                    *v = sq / n;
                }
                let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let observed = BatchStats {
                    mean: mean.clone(),
                    var: var.iter().map(|v| v * correction).collect(),
                };
                (mean, var, Some(observed))
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err(format!(
                        "running statistics do not match {c} channels"
                    )));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = Tensor::zeros(&[b, c, h, w]);
        let od = out.data_mut();
        for bi in 0..b {
            for ch in 0..c {
                let range = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                for i in range {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    od[i] = g[ch] * xh + be[ch];
                }
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        let batch_stats = observed.is_some();
        let id = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        );
        Ok((id, observed))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(&[x]);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "cannot add {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat of zero tensors".into()))?;
        let (b, _, h, w) = self.value(*first).dims4()?;
        let mut channels = 0;
        for id in inputs {
            let (bi, ci, hi, wi) = self.value(*id).dims4()?;
            if (bi, hi, wi) != (b, h, w) {
                return Err(shape_err(format!(
                    "concat of {:?} with {:?}",
                    self.value(*first).shape(),
                    self.value(*id).shape()
                )));
            }
            channels += ci;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * channels * hw);
        for bi in 0..b {
            for id in inputs {
                let t = self.value(*id);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let out = Tensor::from_vec(&[b, channels, h, w], data)?;
        let needs = self.needs(inputs);
        Ok(self.push(out, Op::Concat(inputs.to_vec()), needs))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::from_vec(&[b, c, 1, 1], data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), needs))
    }

    /// Bilinear resize (half-pixel centers, edge clamped) to `(h, w)`.
    pub fn resize_bilinear(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let (b, c, hi, wi) = self.value(x).dims4()?;
        if h == 0 || w == 0 {
            return Err(shape_err("resize to an empty extent".into()));
        }
        let mut out = Tensor::zeros(&[b, c, h, w]);
        kernels::resize_forward(
            self.value(x).data(),
            b * c,
            (hi, wi),
            (h, w),
            out.data_mut(),
        );
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Resize(x), needs))
    }

    /// Max pooling with a square window; padded taps never win.
    pub fn max_pool(&mut self, x: NodeId, kernel: usize, spec: ConvSpec) -> Result<NodeId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = match (spec.output_len(h, kernel), spec.output_len(w, kernel)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(shape_err(format!("input {h}x{w} too small to pool"))),
        };
        let xs = self.value(x).data();
        let mut out = Tensor::zeros(&[b, c, ho, wo]);
        let mut argmax = vec![0usize; b * c * ho * wo];
        let od = out.data_mut();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = usize::MAX;
                    for i in 0..kernel {
                        let iy =
                            (oy * spec.stride + i * spec.dilation) as isize - spec.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..kernel {
                            let ix = (ox * spec.stride + j * spec.dilation) as isize
                                - spec.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xs[idx] > best || at == usize::MAX {
                                best = xs[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = plane * ho * wo + oy * wo + ox;
                    od[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::MaxPool { x, argmax }, needs))
    }

    /// Softmax over the channel axis of an NCHW tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, k, h, w) = self.value(x).dims4()?;
        let mut out = Tensor::zeros(&[b, k, h, w]);
        kernels::softmax_channels(self.value(x).data(), (b, k, h * w), out.data_mut());
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax(x), needs))
    }

    /// Batch mean of per-image masked cross-entropy against constant targets.
    ///
    /// `prob` is `(B, K, H, W)`; `targets` and `keep` are `(B, H, W)`. Each
    /// image contributes the mean negative log-probability over its kept
    /// pixels, or zero when none are kept.
    pub fn masked_nll(
        &mut self,
        prob: NodeId,
        targets: Vec<u8>,
        keep: Vec<bool>,
    ) -> Result<NodeId> {
        let (b, k, h, w) = self.value(prob).dims4()?;
        let hw = h * w;
        if targets.len() != b * hw || keep.len() != b * hw {
            return Err(shape_err(format!(
                "targets of {} pixels for probabilities {:?}",
                targets.len(),
                self.value(prob).shape()
            )));
        }
        if b == 0 {
            return Err(shape_err("empty batch".into()));
        }
        let p = self.value(prob).data();
        let total: f64 = (0..b)
            .map(|i| {
                masked_nll(
                    &p[i * k * hw..(i + 1) * k * hw],
                    k,
                    &targets[i * hw..(i + 1) * hw],
                    &keep[i * hw..(i + 1) * hw],
                )
            })
            .sum::<Result<f64>>()?;
        let needs = self.needs(&[prob]);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            Op::MaskedNll {
                prob,
                targets,
                keep,
            },
            needs,
        ))
    }

    /// `sum_i weight_i * term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = 0.0;
        for &(id, weight) in terms {
            if self.value(id).len() != 1 {
                return Err(shape_err("weighted sum of a non-scalar".into()));
            }
            total += weight * self.value(id).item();
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum(terms.to_vec()),
            needs,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward from a non-scalar node".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, bias, spec } => {
                let (b, c, h, wd) = self.value(*x).dims4()?;
                let (o, _, k, _) = self.value(*w).dims4()?;
                let (_, _, ho, wo) = node.value.dims4()?;
                let shape = ConvShape {
                    c,
                    h,
                    w: wd,
                    k,
                    ho,
                    wo,
                    spec: *spec,
                };
                let mut dx = self
                    .wants(*x)
                    .then(|| Tensor::zeros(self.value(*x).shape()));
                let mut dw = self
                    .wants(*w)
                    .then(|| Tensor::zeros(self.value(*w).shape()));
                let mut db = bias
                    .filter(|id| self.wants(*id))
                    .map(|_| Tensor::zeros(&[o]));
                kernels::conv2d_backward(
                    self.value(*x).data(),
                    b,
                    self.value(*w).data(),
                    o,
                    &shape,
                    dy.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                if let Some(bias) = bias {
                    accumulate(grads, *bias, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (b, c, h, w) = node.value.dims4()?;
                let hw = h * w;
                let n = (b * hw) as f64;
                let g = self.value(*gamma).data();
                let dys = dy.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        for i in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                            dgamma[ch] += dys[i] * xhat[i];
                            dbeta[ch] += dys[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(node.value.shape());
                    let dxs = dx.data_mut();
                    for bi in 0..b {
                        for ch in 0..c {
                            let scale = g[ch] * inv_std[ch];
                            for i in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                                dxs[i] = if *batch_stats {
                                    scale / n * (n * dys[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    scale * dys[i]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, Some(dx));
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, Some(Tensor::from_vec(&[c], dgamma)?));
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, Some(Tensor::from_vec(&[c], dbeta)?));
                }
            }
            Op::Relu(x) => {
                let mut dx = dy.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(grads, *x, Some(dx));
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, Some(dy.clone()));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, Some(dy.clone()));
                }
            }
            Op::Concat(inputs) => {
                let (b, _, h, w) = node.value.dims4()?;
                let hw = h * w;
                let total_c = node.value.shape()[1];
                let mut offset = 0;
                for id in inputs {
                    let c = self.value(*id).shape()[1];
                    if self.wants(*id) {
                        let mut data = Vec::with_capacity(b * c * hw);
                        for bi in 0..b {
                            let start = (bi * total_c + offset) * hw;
                            data.extend_from_slice(&dy.data()[start..start + c * hw]);
                        }
                        accumulate(grads, *id, Some(Tensor::from_vec(&[b, c, h, w], data)?));
                    }
                    offset += c;
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape();
                let hw = shape[2] * shape[3];
                let mut dx = Tensor::zeros(shape);
                for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
                    plane.fill(g / hw as f64);
                }
                accumulate(grads, *x, Some(dx));
            }
            Op::Resize(x) => {
                let (b, c, hi, wi) = self.value(*x).dims4()?;
                let (_, _, ho, wo) = node.value.dims4()?;
                let mut dx = Tensor::zeros(self.value(*x).shape());
                kernels::resize_backward(dy.data(), b * c, (hi, wi), (ho, wo), dx.data_mut());
                accumulate(grads, *x, Some(dx));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let dxs = dx.data_mut();
                for (&at, &g) in argmax.iter().zip(dy.data()) {
                    dxs[at] += g;
                }
                accumulate(grads, *x, Some(dx));
            }
            Op::Softmax(x) => {
                let (b, k, h, w) = node.value.dims4()?;
                let hw = h * w;
                let y = node.value.data();
                let g = dy.data();
                let mut dx = Tensor::zeros(node.value.shape());
                let dxs = dx.data_mut();
                for bi in 0..b {
                    let base = bi * k * hw;
                    for p in 0..hw {
                        let dot: f64 = (0..k)
                            .map(|c| g[base + c * hw + p] * y[base + c * hw + p])
                            .sum();
                        for c in 0..k {
                            let i = base + c * hw + p;
                            dxs[i] = y[i] * (g[i] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Some(dx));
            }
            Op::MaskedNll {
                prob,
                targets,
                keep,
            } => {
                let (b, k, h, w) = self.value(*prob).dims4()?;
                let hw = h * w;
                let scale = dy.item() / b as f64;
                let p = self.value(*prob).data();
                let mut dp = Tensor::zeros(self.value(*prob).shape());
                let dps = dp.data_mut();
                for i in 0..b {
                    masked_nll_grad(
                        &p[i * k * hw..(i + 1) * k * hw],
                        k,
                        &targets[i * hw..(i + 1) * hw],
                        &keep[i * hw..(i + 1) * hw],
                        scale,
                        &mut dps[i * k * hw..(i + 1) * k * hw],
                    );
                }
                accumulate(grads, *prob, Some(dp));
            }
            Op::WeightedSum(terms) => {
                for &(id, weight) in terms {
                    if self.wants(id) {
                        accumulate(grads, id, Some(Tensor::scalar(weight * dy.item())));
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, grad: Option<Tensor>) {
    let Some(grad) = grad else { return };
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&grad),
        slot @ None => *slot = Some(grad),
    }
}
