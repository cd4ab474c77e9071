//! Define-by-run reverse-mode differentiation over a flat tape.
//!
//! A [`Graph`] is rebuilt per attack or training step: leaves are pushed
//! first, ops reference earlier nodes, and the last node pushed is the root.
//! `forward` evaluates the tape in order and caches every intermediate;
//! `backward` walks it in reverse and returns exact gradients for every
//! registered parameter. Gradients only propagate into subtrees that contain
//! a parameter, so attack graphs never pay for weight gradients.
//!
//! Clamp uses a pass-through subgradient on the closed interval (boundary
//! points included) and zero outside.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { data: Tensor, param: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId, f32),
    MulScalar(NodeId, f32),
    BroadcastAdd { a: NodeId, scalar: NodeId },
    BroadcastMul { a: NodeId, scalar: NodeId },
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Clamp { a: NodeId, lo: f32, hi: f32 },
    Minimum(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    ReduceMax(NodeId),
    ReduceMin(NodeId),
    Select { a: NodeId, index: usize },
    WeightedSum { terms: Vec<NodeId>, weights: Vec<NodeId> },
    MatMul(NodeId, NodeId),
    BiasAddRow { a: NodeId, bias: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, pad: usize },
    MaxPool2(NodeId),
    Flatten(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize> },
    KlDivLogits { p: NodeId, q: NodeId },
    RgbToHsv(NodeId),
    HsvToRgb(NodeId),
    Rotate { x: NodeId, theta_deg: NodeId },
    ChannelSlice { x: NodeId, channel: usize },
    ChannelStack(Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::BroadcastAdd { .. } => "broadcast_add",
            Op::BroadcastMul { .. } => "broadcast_mul",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Relu(..) => "relu",
            Op::Clamp { .. } => "clamp",
            Op::Minimum(..) => "minimum",
            Op::Maximum(..) => "maximum",
            Op::ReduceMax(..) => "reduce_max",
            Op::ReduceMin(..) => "reduce_min",
            Op::Select { .. } => "select",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::MatMul(..) => "matmul",
            Op::BiasAddRow { .. } => "bias_add_row",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2(..) => "maxpool2",
            Op::Flatten(..) => "flatten",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::KlDivLogits { .. } => "kl_div_logits",
            Op::RgbToHsv(..) => "rgb_to_hsv",
            Op::HsvToRgb(..) => "hsv_to_rgb",
            Op::Rotate { .. } => "rotate",
            Op::ChannelSlice { .. } => "channel_slice",
            Op::ChannelStack(..) => "channel_stack",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Minimum(a, b)
            | Op::Maximum(a, b)
            | Op::MatMul(a, b) => vec![*a, *b],
            Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::Clamp { a, .. }
            | Op::ReduceMax(a)
            | Op::ReduceMin(a)
            | Op::Select { a, .. }
            | Op::MaxPool2(a)
            | Op::Flatten(a)
            | Op::RgbToHsv(a)
            | Op::HsvToRgb(a) => vec![*a],
            Op::BroadcastAdd { a, scalar } | Op::BroadcastMul { a, scalar } => vec![*a, *scalar],
            Op::BiasAddRow { a, bias } => vec![*a, *bias],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::KlDivLogits { p, q } => vec![*p, *q],
            Op::Rotate { x, theta_deg } => vec![*x, *theta_deg],
            Op::ChannelSlice { x, .. } => vec![*x],
            Op::WeightedSum { terms, weights } => {
                terms.iter().chain(weights.iter()).copied().collect()
            }
            Op::ChannelStack(xs) => xs.clone(),
        }
    }
}

struct Node {
    op: Op,
    requires_grad: bool,
}

/// Per-parameter gradients keyed by the parameter's node id.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    grads: BTreeMap<usize, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (NodeId(*k), v))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    evaluated: bool,
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

    fn push(&mut self, op: Op) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf { param, .. } => *param,
            other => other
                .inputs()
                .iter()
                .any(|id| self.nodes[id.0].requires_grad),
        };
        debug_assert!(op.inputs().iter().all(|id| id.0 < self.nodes.len()));
        self.nodes.push(Node { op, requires_grad });
        self.values.push(None);
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn input(&mut self, data: Tensor) -> NodeId {
        self.push(Op::Leaf { data, param: false })
    }

    /// Differentiable leaf; appears in the [`GradientMap`] after `backward`.
    pub fn param(&mut self, data: Tensor) -> NodeId {
        self.push(Op::Leaf { data, param: true })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div(a, b))
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f32) -> NodeId {
        self.push(Op::AddScalar(a, c))
    }
    pub fn mul_scalar(&mut self, a: NodeId, c: f32) -> NodeId {
        self.push(Op::MulScalar(a, c))
    }
    /// Adds a one-element node to every entry of `a`.
    pub fn broadcast_add(&mut self, a: NodeId, scalar: NodeId) -> NodeId {
        self.push(Op::BroadcastAdd { a, scalar })
    }
    /// Multiplies every entry of `a` by a one-element node.
    pub fn broadcast_mul(&mut self, a: NodeId, scalar: NodeId) -> NodeId {
        self.push(Op::BroadcastMul { a, scalar })
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }
    pub fn clamp(&mut self, a: NodeId, lo: f32, hi: f32) -> NodeId {
        self.push(Op::Clamp { a, lo, hi })
    }
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Minimum(a, b))
    }
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Maximum(a, b))
    }
    pub fn reduce_max(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ReduceMax(a))
    }
    pub fn reduce_min(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ReduceMin(a))
    }
    /// One element of `a` as a `[1]` tensor.
    pub fn select(&mut self, a: NodeId, index: usize) -> NodeId {
        self.push(Op::Select { a, index })
    }
    /// Convex-combination style sum: out = sum_i weights[i] * terms[i],
    /// each weight a one-element node.
    pub fn weighted_sum(&mut self, terms: &[NodeId], weights: &[NodeId]) -> NodeId {
        self.push(Op::WeightedSum {
            terms: terms.to_vec(),
            weights: weights.to_vec(),
        })
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    /// `[m,n] + [n]` row-broadcast bias.
    pub fn bias_add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::BiasAddRow { a, bias })
    }
    /// NCHW convolution, stride 1, zero padding `pad`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad: usize) -> NodeId {
        self.push(Op::Conv2d { x, w, b, pad })
    }
    pub fn maxpool2(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MaxPool2(a))
    }
    pub fn flatten(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Flatten(a))
    }
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy { logits, labels })
    }
    /// Mean KL(softmax(p) || softmax(q)); differentiable in both arguments.
    pub fn kl_div_logits(&mut self, p: NodeId, q: NodeId) -> NodeId {
        self.push(Op::KlDivLogits { p, q })
    }
    pub fn rgb_to_hsv(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RgbToHsv(a))
    }
    pub fn hsv_to_rgb(&mut self, a: NodeId) -> NodeId {
        self.push(Op::HsvToRgb(a))
    }
    /// Rotate square NCHW planes by a `[1]` node holding degrees.
    pub fn rotate(&mut self, x: NodeId, theta_deg: NodeId) -> NodeId {
        self.push(Op::Rotate { x, theta_deg })
    }
    /// `[N,C,H,W] -> [N,1,H,W]`.
    pub fn channel_slice(&mut self, x: NodeId, channel: usize) -> NodeId {
        self.push(Op::ChannelSlice { x, channel })
    }
    /// Concatenate `[N,1,H,W]` nodes along the channel axis.
    pub fn channel_stack(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(Op::ChannelStack(xs.to_vec()))
    }

    /// Replace a leaf's stored tensor. Invalidates cached values.
    pub fn set_leaf(&mut self, id: NodeId, data: Tensor) -> Result<()> {
        match &mut self.nodes[id.0].op {
            Op::Leaf { data: d, .. } => {
                if d.shape() != data.shape() {
                    return Err(Error::DimensionMismatch(format!(
                        "leaf {} has shape {:?}, new value has {:?}",
                        id.0,
                        d.shape(),
                        data.shape()
                    )));
                }
                *d = data;
                self.evaluated = false;
                Ok(())
            }
            _ => Err(Error::InvalidArgument(format!("node {} is not a leaf", id.0))),
        }
    }

    pub fn leaf_value(&self, id: NodeId) -> Option<&Tensor> {
        match &self.nodes[id.0].op {
            Op::Leaf { data, .. } => Some(data),
            _ => None,
        }
    }

    /// Cached value of any node; present after `forward`.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(|v| v.as_ref())
    }

    fn err_shape(&self, node: usize, detail: String) -> Error {
        Error::ShapeMismatch {
            node,
            op: self.nodes[node].op.name(),
            detail,
        }
    }

    /// Evaluate the tape in insertion order; returns the root (last node).
    pub fn forward(&mut self) -> Result<Tensor> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("empty graph".into()));
        }
        for i in 0..self.nodes.len() {
            let value = self.eval_node(i)?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("node {} ({})", i, self.nodes[i].op.name()),
                });
            }
            self.values[i] = Some(value);
        }
        self.evaluated = true;
        Ok(self.values.last().unwrap().clone().unwrap())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref().expect("value evaluated")
    }

    fn eval_node(&self, i: usize) -> Result<Tensor> {
        let same_shape = |a: &Tensor, b: &Tensor| -> Result<()> {
            if a.shape() != b.shape() {
                Err(self.err_shape(i, format!("{:?} vs {:?}", a.shape(), b.shape())))
            } else {
                Ok(())
            }
        };
        let scalar_node = |t: &Tensor| -> Result<f32> {
            if t.numel() != 1 {
                Err(self.err_shape(i, format!("expected [1] node, got {:?}", t.shape())))
            } else {
                Ok(t.item())
            }
        };
        let nchw = |t: &Tensor| -> Result<(usize, usize, usize, usize)> {
            match t.shape() {
                [n, c, h, w] => Ok((*n, *c, *h, *w)),
                s => Err(self.err_shape(i, format!("expected NCHW tensor, got {:?}", s))),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf { data, .. } => Ok(data.clone()),
            Op::Add(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                same_shape(a, b)?;
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Tensor::from_vec(a.shape(), data)
            }
            Op::Sub(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                same_shape(a, b)?;
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
                Tensor::from_vec(a.shape(), data)
            }
            Op::Mul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                same_shape(a, b)?;
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Tensor::from_vec(a.shape(), data)
            }
            Op::Div(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                same_shape(a, b)?;
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
                Tensor::from_vec(a.shape(), data)
            }
            Op::AddScalar(a, c) => {
                let a = self.val(*a);
                Tensor::from_vec(a.shape(), a.data().iter().map(|x| x + c).collect())
            }
            Op::MulScalar(a, c) => {
                let a = self.val(*a);
                Tensor::from_vec(a.shape(), a.data().iter().map(|x| x * c).collect())
            }
            Op::BroadcastAdd { a, scalar } => {
                let (a, s) = (self.val(*a), self.val(*scalar));
                let s = scalar_node(s)?;
                Tensor::from_vec(a.shape(), a.data().iter().map(|x| x + s).collect())
            }
            Op::BroadcastMul { a, scalar } => {
                let (a, s) = (self.val(*a), self.val(*scalar));
                let s = scalar_node(s)?;
                Tensor::from_vec(a.shape(), a.data().iter().map(|x| x * s).collect())
            }
            Op::Exp(a) => {
                let a = self.val(*a);
                Tensor::from_vec(a.shape(), a.data().iter().map(|x| x.exp()).collect())
            }
            Op::Log(a) => {
                let a = self.val(*a);
                Tensor::from_vec(a.shape(), a.data().iter().map(|x| x.ln()).collect())
            }
            Op::Relu(a) => {
                let a = self.val(*a);
                Tensor::from_vec(a.shape(), a.data().iter().map(|x| x.max(0.0)).collect())
            }
            Op::Clamp { a, lo, hi } => {
                let a = self.val(*a);
                Tensor::from_vec(
                    a.shape(),
                    a.data().iter().map(|x| x.clamp(*lo, *hi)).collect(),
                )
            }
            Op::Minimum(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                same_shape(a, b)?;
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| if x <= y { *x } else { *y })
                    .collect();
                Tensor::from_vec(a.shape(), data)
            }
            Op::Maximum(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                same_shape(a, b)?;
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| if x >= y { *x } else { *y })
                    .collect();
                Tensor::from_vec(a.shape(), data)
            }
            Op::ReduceMax(a) => {
                let a = self.val(*a);
                let m = a.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
                Ok(Tensor::scalar(m))
            }
            Op::ReduceMin(a) => {
                let a = self.val(*a);
                let m = a.data().iter().copied().fold(f32::INFINITY, f32::min);
                Ok(Tensor::scalar(m))
            }
            Op::Select { a, index } => {
                let a = self.val(*a);
                if *index >= a.numel() {
                    return Err(self.err_shape(i, format!("index {} out of {}", index, a.numel())));
                }
                Ok(Tensor::scalar(a.data()[*index]))
            }
            Op::WeightedSum { terms, weights } => {
                if terms.is_empty() || terms.len() != weights.len() {
                    return Err(self.err_shape(
                        i,
                        format!("{} terms vs {} weights", terms.len(), weights.len()),
                    ));
                }
                let shape = self.val(terms[0]).shape().to_vec();
                let mut out = vec![0.0f32; self.val(terms[0]).numel()];
                for (t, w) in terms.iter().zip(weights) {
                    let tv = self.val(*t);
                    same_shape(tv, self.val(terms[0]))?;
                    let wv = scalar_node(self.val(*w))?;
                    for (o, x) in out.iter_mut().zip(tv.data()) {
                        *o += wv * x;
                    }
                }
                Tensor::from_vec(&shape, out)
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = match av.shape() {
                    [m, k] => (*m, *k),
                    s => return Err(self.err_shape(i, format!("lhs not 2-D: {:?}", s))),
                };
                let (k2, n) = match bv.shape() {
                    [k2, n] => (*k2, *n),
                    s => return Err(self.err_shape(i, format!("rhs not 2-D: {:?}", s))),
                };
                if k != k2 {
                    return Err(self.err_shape(i, format!("inner dims {} vs {}", k, k2)));
                }
                let mut out = vec![0.0f32; m * n];
                kernels::matmul(av.data(), bv.data(), m, k, n, &mut out);
                Tensor::from_vec(&[m, n], out)
            }
            Op::BiasAddRow { a, bias } => {
                let (av, bv) = (self.val(*a), self.val(*bias));
                let (m, n) = match av.shape() {
                    [m, n] => (*m, *n),
                    s => return Err(self.err_shape(i, format!("lhs not 2-D: {:?}", s))),
                };
                if bv.shape() != [n] {
                    return Err(
                        self.err_shape(i, format!("bias {:?} vs row width {}", bv.shape(), n))
                    );
                }
                let mut out = Vec::with_capacity(m * n);
                for r in 0..m {
                    for c in 0..n {
                        out.push(av.data()[r * n + c] + bv.data()[c]);
                    }
                }
                Tensor::from_vec(&[m, n], out)
            }
            Op::Conv2d { x, w, b, pad } => {
                let (xv, wv, bv) = (self.val(*x), self.val(*w), self.val(*b));
                let (n, ci, h, wd) = nchw(xv)?;
                let (co, ci2, kh, kw) = nchw(wv)?;
                if ci != ci2 {
                    return Err(self.err_shape(i, format!("in channels {} vs {}", ci, ci2)));
                }
                if bv.shape() != [co] {
                    return Err(
                        self.err_shape(i, format!("bias {:?} vs out channels {}", bv.shape(), co))
                    );
                }
                let dims = kernels::ConvDims {
                    batch: n,
                    in_c: ci,
                    in_h: h,
                    in_w: wd,
                    out_c: co,
                    kh,
                    kw,
                    pad: *pad,
                };
                if dims.in_h + 2 * pad < kh || dims.in_w + 2 * pad < kw {
                    return Err(self.err_shape(i, "kernel larger than padded input".into()));
                }
                let mut out = vec![0.0f32; n * co * dims.out_h() * dims.out_w()];
                kernels::conv2d(xv.data(), wv.data(), bv.data(), &dims, &mut out);
                Tensor::from_vec(&[n, co, dims.out_h(), dims.out_w()], out)
            }
            Op::MaxPool2(a) => {
                let av = self.val(*a);
                let (n, c, h, w) = nchw(av)?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(self.err_shape(i, format!("odd spatial dims {}x{}", h, w)));
                }
                let mut out = vec![0.0f32; n * c * (h / 2) * (w / 2)];
                let mut arg = vec![0u32; out.len()];
                kernels::maxpool2(av.data(), n * c, h, w, &mut out, &mut arg);
                Tensor::from_vec(&[n, c, h / 2, w / 2], out)
            }
            Op::Flatten(a) => {
                let av = self.val(*a);
                let (n, c, h, w) = nchw(av)?;
                Tensor::from_vec(&[n, c * h * w], av.data().to_vec())
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let lv = self.val(*logits);
                let (m, d) = match lv.shape() {
                    [m, d] => (*m, *d),
                    s => return Err(self.err_shape(i, format!("logits not 2-D: {:?}", s))),
                };
                if labels.len() != m {
                    return Err(self.err_shape(i, format!("{} labels vs {} rows", labels.len(), m)));
                }
                if let Some(bad) = labels.iter().find(|&&y| y >= d) {
                    return Err(self.err_shape(i, format!("label {} >= {} classes", bad, d)));
                }
                Ok(Tensor::scalar(kernels::softmax_cross_entropy(
                    lv.data(),
                    labels,
                    d,
                )))
            }
            Op::KlDivLogits { p, q } => {
                let (pv, qv) = (self.val(*p), self.val(*q));
                same_shape(pv, qv)?;
                let (m, d) = match pv.shape() {
                    [m, d] => (*m, *d),
                    s => return Err(self.err_shape(i, format!("logits not 2-D: {:?}", s))),
                };
                Ok(Tensor::scalar(kernels::kl_div_logits(
                    pv.data(),
                    qv.data(),
                    m,
                    d,
                )))
            }
            Op::RgbToHsv(a) => {
                let av = self.val(*a);
                let (n, c, h, w) = nchw(av)?;
                if c != 3 {
                    return Err(self.err_shape(i, format!("expected 3 channels, got {}", c)));
                }
                let mut out = vec![0.0f32; av.numel()];
                kernels::rgb_to_hsv(av.data(), n, h * w, &mut out);
                Tensor::from_vec(av.shape(), out)
            }
            Op::HsvToRgb(a) => {
                let av = self.val(*a);
                let (n, c, h, w) = nchw(av)?;
                if c != 3 {
                    return Err(self.err_shape(i, format!("expected 3 channels, got {}", c)));
                }
                let mut out = vec![0.0f32; av.numel()];
                kernels::hsv_to_rgb(av.data(), n, h * w, &mut out);
                Tensor::from_vec(av.shape(), out)
            }
            Op::Rotate { x, theta_deg } => {
                let xv = self.val(*x);
                let (n, c, h, w) = nchw(xv)?;
                if h != w {
                    return Err(self.err_shape(i, format!("rotation needs a square image, got {}x{}", h, w)));
                }
                let theta = scalar_node(self.val(*theta_deg))?;
                let mut out = vec![0.0f32; xv.numel()];
                kernels::rotate(xv.data(), n * c, h, theta, &mut out);
                Tensor::from_vec(xv.shape(), out)
            }
            Op::ChannelSlice { x, channel } => {
                let xv = self.val(*x);
                let (n, c, h, w) = nchw(xv)?;
                if *channel >= c {
                    return Err(self.err_shape(i, format!("channel {} out of {}", channel, c)));
                }
                let plane = h * w;
                let mut out = Vec::with_capacity(n * plane);
                for b in 0..n {
                    let start = (b * c + channel) * plane;
                    out.extend_from_slice(&xv.data()[start..start + plane]);
                }
                Tensor::from_vec(&[n, 1, h, w], out)
            }
            Op::ChannelStack(xs) => {
                if xs.is_empty() {
                    return Err(self.err_shape(i, "empty channel stack".into()));
                }
                let first = self.val(xs[0]);
                let (n, c1, h, w) = nchw(first)?;
                if c1 != 1 {
                    return Err(self.err_shape(i, format!("stack inputs must be [N,1,H,W], got {:?}", first.shape())));
                }
                for x in xs {
                    same_shape(self.val(*x), first)?;
                }
                let plane = h * w;
                let c = xs.len();
                let mut out = vec![0.0f32; n * c * plane];
                for b in 0..n {
                    for (ci, x) in xs.iter().enumerate() {
                        let src = &self.val(*x).data()[b * plane..(b + 1) * plane];
                        out[(b * c + ci) * plane..(b * c + ci + 1) * plane].copy_from_slice(src);
                    }
                }
                Tensor::from_vec(&[n, c, h, w], out)
            }
        }
    }

    /// Reverse pass from a scalar root. Returns gradients for every `param`
    /// leaf (zeros if the parameter does not influence the root).
    pub fn backward(&mut self) -> Result<GradientMap> {
        if !self.evaluated {
            return Err(Error::BackwardBeforeForward);
        }
        let root = self.nodes.len() - 1;
        let root_shape = self.val(NodeId(root)).shape().to_vec();
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot { shape: root_shape });
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let upstream = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &upstream, &mut grads);
            grads[i] = Some(upstream);
        }

        let mut map = GradientMap::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { data, param: true } = &node.op {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(data.shape()));
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("gradient of node {}", i),
                    });
                }
                map.grads.insert(i, g);
            }
        }
        Ok(map)
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: &[f32]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let g = grads[id.0].get_or_insert_with(|| Tensor::zeros(self.val(id).shape()));
        for (a, b) in g.data_mut().iter_mut().zip(delta) {
            *a += b;
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, i: usize, up: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        // Clone the op descriptor to sidestep borrow overlap with `grads`.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accum(grads, a, up.data());
                self.accum(grads, b, up.data());
            }
            Op::Sub(a, b) => {
                self.accum(grads, a, up.data());
                let neg: Vec<f32> = up.data().iter().map(|x| -x).collect();
                self.accum(grads, b, &neg);
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let d: Vec<f32> = up
                        .data()
                        .iter()
                        .zip(self.val(b).data())
                        .map(|(u, y)| u * y)
                        .collect();
                    self.accum(grads, a, &d);
                }
                if self.needs(b) {
                    let d: Vec<f32> = up
                        .data()
                        .iter()
                        .zip(self.val(a).data())
                        .map(|(u, x)| u * x)
                        .collect();
                    self.accum(grads, b, &d);
                }
            }
            Op::Div(a, b) => {
                let bv = self.val(b);
                if self.needs(a) {
                    let d: Vec<f32> = up
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(u, y)| u / y)
                        .collect();
                    self.accum(grads, a, &d);
                }
                if self.needs(b) {
                    let av = self.val(a);
                    let d: Vec<f32> = up
                        .data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(u, (x, y))| -u * x / (y * y))
                        .collect();
                    self.accum(grads, b, &d);
                }
            }
            Op::AddScalar(a, _) => self.accum(grads, a, up.data()),
            Op::MulScalar(a, c) => {
                let d: Vec<f32> = up.data().iter().map(|u| u * c).collect();
                self.accum(grads, a, &d);
            }
            Op::BroadcastAdd { a, scalar } => {
                self.accum(grads, a, up.data());
                if self.needs(scalar) {
                    let s: f32 = up.data().iter().sum();
                    self.accum(grads, scalar, &[s]);
                }
            }
            Op::BroadcastMul { a, scalar } => {
                let sv = self.val(scalar).item();
                if self.needs(a) {
                    let d: Vec<f32> = up.data().iter().map(|u| u * sv).collect();
                    self.accum(grads, a, &d);
                }
                if self.needs(scalar) {
                    let s: f32 = up
                        .data()
                        .iter()
                        .zip(self.val(a).data())
                        .map(|(u, x)| u * x)
                        .sum();
                    self.accum(grads, scalar, &[s]);
                }
            }
            Op::Exp(a) => {
                let out = self.val(NodeId(i));
                let d: Vec<f32> = up
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(u, e)| u * e)
                    .collect();
                self.accum(grads, a, &d);
            }
            Op::Log(a) => {
                let av = self.val(a);
                let d: Vec<f32> = up
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(u, x)| u / x)
                    .collect();
                self.accum(grads, a, &d);
            }
            Op::Relu(a) => {
                let av = self.val(a);
                let d: Vec<f32> = up
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(u, x)| if *x > 0.0 { *u } else { 0.0 })
                    .collect();
                self.accum(grads, a, &d);
            }
            Op::Clamp { a, lo, hi } => {
                // Pass-through on the closed interval, zero outside.
                let av = self.val(a);
                let d: Vec<f32> = up
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(u, x)| if *x >= lo && *x <= hi { *u } else { 0.0 })
                    .collect();
                self.accum(grads, a, &d);
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                if self.needs(a) {
                    let d: Vec<f32> = up
                        .data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(u, (x, y))| if x <= y { *u } else { 0.0 })
                        .collect();
                    self.accum(grads, a, &d);
                }
                if self.needs(b) {
                    let d: Vec<f32> = up
                        .data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(u, (x, y))| if x <= y { 0.0 } else { *u })
                        .collect();
                    self.accum(grads, b, &d);
                }
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                if self.needs(a) {
                    let d: Vec<f32> = up
                        .data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(u, (x, y))| if x >= y { *u } else { 0.0 })
                        .collect();
                    self.accum(grads, a, &d);
                }
                if self.needs(b) {
                    let d: Vec<f32> = up
                        .data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(u, (x, y))| if x >= y { 0.0 } else { *u })
                        .collect();
                    self.accum(grads, b, &d);
                }
            }
            Op::ReduceMax(a) => {
                let av = self.val(a);
                let mut best = 0usize;
                for (j, v) in av.data().iter().enumerate() {
                    if *v > av.data()[best] {
                        best = j;
                    }
                }
                let mut d = vec![0.0f32; av.numel()];
                d[best] = up.item();
                self.accum(grads, a, &d);
            }
            Op::ReduceMin(a) => {
                let av = self.val(a);
                let mut best = 0usize;
                for (j, v) in av.data().iter().enumerate() {
                    if *v < av.data()[best] {
                        best = j;
                    }
                }
                let mut d = vec![0.0f32; av.numel()];
                d[best] = up.item();
                self.accum(grads, a, &d);
            }
            Op::Select { a, index } => {
                let mut d = vec![0.0f32; self.val(a).numel()];
                d[index] = up.item();
                self.accum(grads, a, &d);
            }
            Op::WeightedSum { terms, weights } => {
                for (t, w) in terms.iter().zip(&weights) {
                    let wv = self.val(*w).item();
                    if self.needs(*t) {
                        let d: Vec<f32> = up.data().iter().map(|u| u * wv).collect();
                        self.accum(grads, *t, &d);
                    }
                    if self.needs(*w) {
                        let s: f32 = up
                            .data()
                            .iter()
                            .zip(self.val(*t).data())
                            .map(|(u, x)| u * x)
                            .sum();
                        self.accum(grads, *w, &[s]);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs(a) {
                    let mut da = vec![0.0f32; m * k];
                    kernels::matmul_backward(
                        av.data(),
                        bv.data(),
                        up.data(),
                        m,
                        k,
                        n,
                        Some(&mut da),
                        None,
                    );
                    self.accum(grads, a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0f32; k * n];
                    kernels::matmul_backward(
                        av.data(),
                        bv.data(),
                        up.data(),
                        m,
                        k,
                        n,
                        None,
                        Some(&mut db),
                    );
                    self.accum(grads, b, &db);
                }
            }
            Op::BiasAddRow { a, bias } => {
                self.accum(grads, a, up.data());
                if self.needs(bias) {
                    let n = self.val(bias).numel();
                    let mut d = vec![0.0f32; n];
                    for row in up.data().chunks(n) {
                        for (g, u) in d.iter_mut().zip(row) {
                            *g += u;
                        }
                    }
                    self.accum(grads, bias, &d);
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let (xv, wv) = (self.val(x), self.val(w));
                let dims = kernels::ConvDims {
                    batch: xv.shape()[0],
                    in_c: xv.shape()[1],
                    in_h: xv.shape()[2],
                    in_w: xv.shape()[3],
                    out_c: wv.shape()[0],
                    kh: wv.shape()[2],
                    kw: wv.shape()[3],
                    pad,
                };
                if self.needs(x) {
                    let mut dx = vec![0.0f32; xv.numel()];
                    kernels::conv2d_backward_input(wv.data(), up.data(), &dims, &mut dx);
                    self.accum(grads, x, &dx);
                }
                if self.needs(w) || self.needs(b) {
                    let mut dw = vec![0.0f32; wv.numel()];
                    let mut db = vec![0.0f32; dims.out_c];
                    kernels::conv2d_backward_params(xv.data(), up.data(), &dims, &mut dw, &mut db);
                    if self.needs(w) {
                        self.accum(grads, w, &dw);
                    }
                    if self.needs(b) {
                        self.accum(grads, b, &db);
                    }
                }
            }
            Op::MaxPool2(a) => {
                let av = self.val(a);
                let (n, c, h, w) = (
                    av.shape()[0],
                    av.shape()[1],
                    av.shape()[2],
                    av.shape()[3],
                );
                let mut out = vec![0.0f32; n * c * (h / 2) * (w / 2)];
                let mut arg = vec![0u32; out.len()];
                kernels::maxpool2(av.data(), n * c, h, w, &mut out, &mut arg);
                let mut dx = vec![0.0f32; av.numel()];
                kernels::maxpool2_backward(up.data(), &arg, n * c, h, w, &mut dx);
                self.accum(grads, a, &dx);
            }
            Op::Flatten(a) => self.accum(grads, a, up.data()),
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let lv = self.val(logits);
                let d = lv.shape()[1];
                let mut dl = vec![0.0f32; lv.numel()];
                kernels::softmax_cross_entropy_backward(lv.data(), &labels, d, up.item(), &mut dl);
                self.accum(grads, logits, &dl);
            }
            Op::KlDivLogits { p, q } => {
                let (pv, qv) = (self.val(p), self.val(q));
                let (m, d) = (pv.shape()[0], pv.shape()[1]);
                let mut dp = if self.needs(p) {
                    Some(vec![0.0f32; pv.numel()])
                } else {
                    None
                };
                let mut dq = if self.needs(q) {
                    Some(vec![0.0f32; qv.numel()])
                } else {
                    None
                };
                kernels::kl_div_logits_backward(
                    pv.data(),
                    qv.data(),
                    m,
                    d,
                    up.item(),
                    dp.as_deref_mut(),
                    dq.as_deref_mut(),
                );
                if let Some(dp) = dp {
                    self.accum(grads, p, &dp);
                }
                if let Some(dq) = dq {
                    self.accum(grads, q, &dq);
                }
            }
            Op::RgbToHsv(a) => {
                let av = self.val(a);
                let (n, _, h, w) = (
                    av.shape()[0],
                    av.shape()[1],
                    av.shape()[2],
                    av.shape()[3],
                );
                let mut dx = vec![0.0f32; av.numel()];
                kernels::rgb_to_hsv_backward(av.data(), up.data(), n, h * w, &mut dx);
                self.accum(grads, a, &dx);
            }
            Op::HsvToRgb(a) => {
                let av = self.val(a);
                let (n, _, h, w) = (
                    av.shape()[0],
                    av.shape()[1],
                    av.shape()[2],
                    av.shape()[3],
                );
                let mut dx = vec![0.0f32; av.numel()];
                kernels::hsv_to_rgb_backward(av.data(), up.data(), n, h * w, &mut dx);
                self.accum(grads, a, &dx);
            }
            Op::Rotate { x, theta_deg } => {
                let xv = self.val(x);
                let (n, c, h, _) = (
                    xv.shape()[0],
                    xv.shape()[1],
                    xv.shape()[2],
                    xv.shape()[3],
                );
                let theta = self.val(theta_deg).item();
                let mut dx = if self.needs(x) {
                    Some(vec![0.0f32; xv.numel()])
                } else {
                    None
                };
                let mut dtheta = if self.needs(theta_deg) {
                    Some(0.0f32)
                } else {
                    None
                };
                kernels::rotate_backward(
                    xv.data(),
                    up.data(),
                    n * c,
                    h,
                    theta,
                    dx.as_deref_mut(),
                    dtheta.as_mut(),
                );
                if let Some(dx) = dx {
                    self.accum(grads, x, &dx);
                }
                if let Some(dt) = dtheta {
                    self.accum(grads, theta_deg, &[dt]);
                }
            }
            Op::ChannelSlice { x, channel } => {
                let xv = self.val(x);
                let (n, c, h, w) = (
                    xv.shape()[0],
                    xv.shape()[1],
                    xv.shape()[2],
                    xv.shape()[3],
                );
                let plane = h * w;
                let mut dx = vec![0.0f32; xv.numel()];
                for b in 0..n {
                    let dst = (b * c + channel) * plane;
                    dx[dst..dst + plane].copy_from_slice(&up.data()[b * plane..(b + 1) * plane]);
                }
                self.accum(grads, x, &dx);
            }
            Op::ChannelStack(xs) => {
                let c = xs.len();
                let first = self.val(xs[0]);
                let (n, _, h, w) = (
                    first.shape()[0],
                    first.shape()[1],
                    first.shape()[2],
                    first.shape()[3],
                );
                let plane = h * w;
                for (ci, x) in xs.iter().enumerate() {
                    if !self.needs(*x) {
                        continue;
                    }
                    let mut d = vec![0.0f32; n * plane];
                    for b in 0..n {
                        let src = (b * c + ci) * plane;
                        d[b * plane..(b + 1) * plane]
                            .copy_from_slice(&up.data()[src..src + plane]);
                    }
                    self.accum(grads, *x, &d);
                }
            }
        }
    }

    /// Max over the parameter's entries of
    /// `|analytic - central difference| / (|central difference| + 1e-8)`.
    pub fn finite_difference_check(&mut self, param: NodeId, h: f32) -> Result<f32> {
        let n = self
            .leaf_value(param)
            .ok_or_else(|| Error::InvalidArgument(format!("node {} is not a leaf", param.0)))?
            .numel();
        let entries: Vec<usize> = (0..n).collect();
        self.finite_difference_check_entries(param, &entries, h)
    }

    /// Raw central difference of the scalar root along one parameter entry.
    pub fn central_difference(&mut self, param: NodeId, entry: usize, h: f32) -> Result<f32> {
        if h <= 0.0 {
            return Err(Error::InvalidArgument("h must be positive".into()));
        }
        let original = self
            .leaf_value(param)
            .ok_or_else(|| Error::InvalidArgument(format!("node {} is not a leaf", param.0)))?
            .clone();
        let root = self.forward()?;
        if root.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root.shape().to_vec(),
            });
        }
        let mut plus = original.clone();
        plus.data_mut()[entry] += h;
        self.set_leaf(param, plus)?;
        let f_plus = self.forward()?.item() as f64;
        let mut minus = original.clone();
        minus.data_mut()[entry] -= h;
        self.set_leaf(param, minus)?;
        let f_minus = self.forward()?.item() as f64;
        self.set_leaf(param, original)?;
        self.forward()?;
        Ok(((f_plus - f_minus) / (2.0 * h as f64)) as f32)
    }

    /// Same as [`finite_difference_check`] restricted to selected entries.
    pub fn finite_difference_check_entries(
        &mut self,
        param: NodeId,
        entries: &[usize],
        h: f32,
    ) -> Result<f32> {
        if h <= 0.0 {
            return Err(Error::InvalidArgument("h must be positive".into()));
        }
        let original = self
            .leaf_value(param)
            .ok_or_else(|| Error::InvalidArgument(format!("node {} is not a leaf", param.0)))?
            .clone();

        let root_value = self.forward()?;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let analytic = self
            .backward()?
            .get(param)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(original.shape()));

        let mut worst = 0.0f32;
        for &e in entries {
            let mut plus = original.clone();
            plus.data_mut()[e] += h;
            self.set_leaf(param, plus)?;
            let f_plus = self.forward()?.item() as f64;

            let mut minus = original.clone();
            minus.data_mut()[e] -= h;
            self.set_leaf(param, minus)?;
            let f_minus = self.forward()?.item() as f64;

            let fd = ((f_plus - f_minus) / (2.0 * h as f64)) as f32;
            let rel = (analytic.data()[e] - fd).abs() / (fd.abs() + 1e-8);
            worst = worst.max(rel);
        }
        self.set_leaf(param, original)?;
        self.forward()?;
        Ok(worst)
    }
}
