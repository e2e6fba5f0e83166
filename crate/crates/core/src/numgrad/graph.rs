use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numgrad::kernels::{conv_out_len, gemm, log_add, sigmoid, Mat};
use crate::numgrad::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Placeholder values keyed by input name.
pub type Feeds = HashMap<String, Tensor>;

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Param(String),
    Const(Tensor),
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Swish(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Log(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Conv1d { x: NodeId, w: NodeId, stride: usize, pad: usize, depthwise: bool },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    MeanAbs(NodeId),
    SumAll(NodeId),
    MaskedL1 { pred: NodeId, target: NodeId, mask: Tensor },
    SplitHeads { x: NodeId, heads: usize },
    MergeHeads(NodeId),
    SliceLast { x: NodeId, start: usize, end: usize },
    SliceRows { x: NodeId, start: usize, end: usize },
    Interleave(Vec<NodeId>),
    RelPosBias { table: NodeId, like: NodeId, max_dist: usize },
    Ctc { log_probs: NodeId, target: Vec<usize> },
    Sum(Vec<NodeId>),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Swish(_) => "swish",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Log(_) => "log",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1d { .. } => "conv1d",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::MeanAbs(_) => "mean_abs",
            Op::SumAll(_) => "sum_all",
            Op::MaskedL1 { .. } => "masked_l1",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads(_) => "merge_heads",
            Op::SliceLast { .. } => "slice_last",
            Op::SliceRows { .. } => "slice_rows",
            Op::Interleave(_) => "interleave",
            Op::RelPosBias { .. } => "rel_pos_bias",
            Op::Ctc { .. } => "ctc",
            Op::Sum(_) => "sum",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Swish(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::MeanAbs(a)
            | Op::SumAll(a)
            | Op::MergeHeads(a) => vec![*a],
            Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            Op::Conv1d { x, w, .. } => vec![*x, *w],
            Op::MaskedL1 { pred, target, .. } => vec![*pred, *target],
            Op::SplitHeads { x, .. } | Op::SliceLast { x, .. } | Op::SliceRows { x, .. } => vec![*x],
            Op::Interleave(xs) | Op::Sum(xs) => xs.clone(),
            // `like` only contributes its length.
            Op::RelPosBias { table, .. } => vec![*table],
            Op::Ctc { log_probs, .. } => vec![*log_probs],
        }
    }

    fn shape_deps(&self) -> Vec<NodeId> {
        match self {
            Op::RelPosBias { table, like, .. } => vec![*table, *like],
            other => other.inputs(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    label: Option<String>,
}

/// Per-node values saved by the forward pass for the backward rule.
#[derive(Clone, Debug, Default)]
enum Aux {
    #[default]
    None,
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Columns(Vec<f64>),
    Occupancy(Vec<f64>),
}

#[derive(Clone, Debug)]
struct ParamSlot {
    node: NodeId,
    value: Tensor,
}

/// A recorded computation. Nodes are appended in topological order; values are
/// produced by [`Graph::forward`] and consumed by [`Graph::backward`].
///
/// One graph is single-writer: forward and backward mutate its caches.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    aux: Vec<Aux>,
    params: IndexMap<String, ParamSlot>,
    frozen: HashSet<String>,
    outputs: IndexMap<String, NodeId>,
    feeds: Feeds,
    evaluated: bool,
    grad_tamper: Option<(&'static str, f64)>,
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
        for dep in op.shape_deps() {
            assert!(dep.0 < self.nodes.len(), "node {dep:?} is not part of this graph");
        }
        self.nodes.push(Node { op, label: None });
        self.values.push(None);
        self.aux.push(Aux::None);
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    /// Human-readable node name used in error messages.
    pub fn describe(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match (&node.label, &node.op) {
            (Some(l), _) => format!("#{} {} `{l}`", id.0, node.op.kind()),
            (None, Op::Input(n)) | (None, Op::Param(n)) => format!("#{} {} `{n}`", id.0, node.op.kind()),
            (None, op) => format!("#{} {}", id.0, op.kind()),
        }
    }

    pub fn label(&mut self, id: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[id.0].label = Some(label.into());
        id
    }

    /// Register a named output returned by [`Graph::forward_eval`].
    pub fn set_output(&mut self, name: impl Into<String>, id: NodeId) {
        self.outputs.insert(name.into(), id);
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    /// Bind a trainable tensor. Binding the same name twice returns the
    /// existing node, so subgraphs can share weights.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(slot) = self.params.get(name) {
            return slot.node;
        }
        let node = self.push(Op::Param(name.to_string()));
        self.params.insert(
            name.to_string(),
            ParamSlot {
                node,
                value: value.clone(),
            },
        );
        node
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param_value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|s| &s.value)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::invalid(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        self.evaluated = false;
        Ok(())
    }

    /// Hold the named parameters fixed: backward neither computes nor
    /// returns their gradients, but still propagates through them.
    pub fn freeze<S: AsRef<str>>(&mut self, names: &[S]) -> Result<()> {
        for n in names {
            if !self.params.contains_key(n.as_ref()) {
                return Err(Error::UnknownParam(n.as_ref().to_string()));
            }
        }
        self.frozen.extend(names.iter().map(|n| n.as_ref().to_string()));
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|n| !self.frozen.contains(*n))
            .cloned()
            .collect()
    }

    /// Scale the input gradients produced by every op of `kind`. Only used to
    /// build negative controls for the gradient checker.
    #[doc(hidden)]
    pub fn tamper_backward(&mut self, kind: &'static str, factor: f64) {
        self.grad_tamper = Some((kind, factor));
    }

    // ---- builders -------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { a, b, trans_b: false })
    }

    /// `a * b^T` where `b` is stored row-major as `[n, k]` (or batched).
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { a, b, trans_b: true })
    }

    /// Elementwise add; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn swish(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Swish(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::LayerNorm { x, gain, bias })
    }

    /// 1-D convolution over the time axis of a `[T, C_in]` sequence.
    /// Weights are `[K, C_in, C_out]`, or `[K, C]` when `depthwise`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize, depthwise: bool) -> NodeId {
        self.push(Op::Conv1d {
            x,
            w,
            stride,
            pad,
            depthwise,
        })
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }

    pub fn mean_abs(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MeanAbs(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a))
    }

    /// Mean absolute difference over the frames selected by `mask`.
    /// `mask` has one weight per row of the last axis of `pred`.
    pub fn masked_l1(&mut self, pred: NodeId, target: NodeId, mask: Tensor) -> NodeId {
        self.push(Op::MaskedL1 { pred, target, mask })
    }

    /// `[T, H*d] -> [H, T, d]`
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        self.push(Op::SplitHeads { x, heads })
    }

    /// `[H, T, d] -> [T, H*d]`
    pub fn merge_heads(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MergeHeads(x))
    }

    pub fn slice_last(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::SliceLast { x, start, end })
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::SliceRows { x, start, end })
    }

    /// `k` inputs of shape `[R, F]` -> `[k*R, F]` with row `k*r + j` taken from input `j`.
    pub fn interleave(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(Op::Interleave(xs.to_vec()))
    }

    /// Additive attention bias `[H, T, T]` looked up from a `[H, 2M+1]` table
    /// by clipped relative distance `j - i`; `T` is the leading extent of `like`.
    pub fn rel_pos_bias(&mut self, table: NodeId, like: NodeId, max_dist: usize) -> NodeId {
        self.push(Op::RelPosBias { table, like, max_dist })
    }

    /// Negative log-likelihood of `target` (labels in `1..V`, blank 0) under
    /// per-frame log-probabilities `[T, V]`.
    pub fn ctc(&mut self, log_probs: NodeId, target: &[usize]) -> NodeId {
        self.push(Op::Ctc {
            log_probs,
            target: target.to_vec(),
        })
    }

    pub fn sum(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "sum of zero nodes");
        if xs.len() == 1 {
            return xs[0];
        }
        self.push(Op::Sum(xs.to_vec()))
    }

    // ---- evaluation -----------------------------------------------------

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values[id.0].as_ref()
    }

    pub fn try_value(&self, id: NodeId) -> Result<&Tensor> {
        self.value(id).ok_or(Error::BackwardBeforeForward)
    }

    /// Evaluate every node and return the registered outputs by name.
    pub fn forward_eval(&mut self, feeds: &Feeds) -> Result<IndexMap<String, Tensor>> {
        self.forward(feeds)?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), self.values[id.0].clone().unwrap()))
            .collect())
    }

    pub fn forward(&mut self, feeds: &Feeds) -> Result<()> {
        self.feeds = feeds.clone();
        self.run()
    }

    /// Re-run with the feeds of the previous call (parameters may have changed).
    pub fn rerun(&mut self) -> Result<()> {
        self.run()
    }

    fn run(&mut self) -> Result<()> {
        self.evaluated = false;
        for i in 0..self.nodes.len() {
            let (value, aux) = self.eval_node(NodeId(i))?;
            if !value.all_finite() {
                return Err(Error::NonFinite {
                    op: self.nodes[i].op.kind(),
                    node: self.describe(NodeId(i)),
                });
            }
            self.values[i] = Some(value);
            self.aux[i] = aux;
        }
        self.evaluated = true;
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref().expect("inputs are evaluated first")
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.describe(a),
            lhs_shape: self.val(a).shape().to_vec(),
            rhs: self.describe(b),
            rhs_shape: self.val(b).shape().to_vec(),
        }
    }

    fn bad_shape(&self, op: &'static str, id: NodeId, detail: impl Into<String>) -> Error {
        Error::InvalidShape {
            op,
            node: self.describe(id),
            detail: detail.into(),
        }
    }

    fn eval_node(&self, id: NodeId) -> Result<(Tensor, Aux)> {
        let op = &self.nodes[id.0].op;
        let kind = op.kind();
        let plain = |t: Tensor| Ok((t, Aux::None));
        match op {
            Op::Input(name) => plain(
                self.feeds
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::MissingFeed(name.clone()))?,
            ),
            Op::Param(name) => plain(self.params[name].value.clone()),
            Op::Const(t) => plain(t.clone()),
            Op::MatMul { a, b, trans_b } => plain(self.matmul_forward(*a, *b, *trans_b)?),
            Op::Add(a, b) => plain(self.broadcast_binary(kind, *a, *b, |x, y| x + y)?),
            Op::Sub(a, b) => plain(self.broadcast_binary(kind, *a, *b, |x, y| x - y)?),
            Op::Mul(a, b) => plain(self.broadcast_binary(kind, *a, *b, |x, y| x * y)?),
            Op::Scale(a, c) => plain(self.val(*a).map(|v| v * c)),
            Op::Sigmoid(a) => plain(self.val(*a).map(sigmoid)),
            Op::Swish(a) => plain(self.val(*a).map(|v| v * sigmoid(v))),
            Op::Relu(a) => plain(self.val(*a).map(|v| v.max(0.0))),
            Op::Tanh(a) => plain(self.val(*a).map(f64::tanh)),
            Op::Log(a) => plain(self.val(*a).map(f64::ln)),
            Op::LayerNorm { x, gain, bias } => self.layer_norm_forward(*x, *gain, *bias),
            Op::Conv1d {
                x,
                w,
                stride,
                pad,
                depthwise,
            } => self.conv_forward(id, *x, *w, *stride, *pad, *depthwise),
            Op::Softmax(a) => plain(row_softmax(self.val(*a), false)),
            Op::LogSoftmax(a) => plain(row_softmax(self.val(*a), true)),
            Op::MeanAbs(a) => {
                let x = self.val(*a);
                plain(Tensor::scalar(
                    x.data().iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64,
                ))
            }
            Op::SumAll(a) => plain(Tensor::scalar(self.val(*a).data().iter().sum())),
            Op::MaskedL1 { pred, target, mask } => {
                let (p, t) = (self.val(*pred), self.val(*target));
                if p.shape() != t.shape() {
                    return Err(self.mismatch(kind, *pred, *target));
                }
                let f = p.last_dim();
                if mask.len() * f != p.len() {
                    return Err(self.bad_shape(
                        kind,
                        id,
                        format!("mask of {} rows for prediction {:?}", mask.len(), p.shape()),
                    ));
                }
                let weight: f64 = mask.data().iter().sum();
                if weight <= 0.0 {
                    return Err(Error::EmptyMask);
                }
                let mut total = 0.0;
                for (r, &m) in mask.data().iter().enumerate() {
                    if m != 0.0 {
                        let s: f64 = p.data()[r * f..(r + 1) * f]
                            .iter()
                            .zip(&t.data()[r * f..(r + 1) * f])
                            .map(|(a, b)| (a - b).abs())
                            .sum();
                        total += m * s;
                    }
                }
                plain(Tensor::scalar(total / (weight * f as f64)))
            }
            Op::SplitHeads { x, heads } => {
                let xv = self.val(*x);
                if xv.rank() != 2 || !xv.shape()[1].is_multiple_of(*heads) {
                    return Err(self.bad_shape(kind, id, format!("{:?} into {heads} heads", xv.shape())));
                }
                let (t, d) = (xv.shape()[0], xv.shape()[1]);
                let dh = d / heads;
                let mut out = vec![0.0; t * d];
                for h in 0..*heads {
                    for ti in 0..t {
                        out[(h * t + ti) * dh..(h * t + ti + 1) * dh]
                            .copy_from_slice(&xv.data()[ti * d + h * dh..ti * d + (h + 1) * dh]);
                    }
                }
                plain(Tensor::from_parts(vec![*heads, t, dh], out))
            }
            Op::MergeHeads(x) => {
                let xv = self.val(*x);
                if xv.rank() != 3 {
                    return Err(self.bad_shape(kind, id, format!("expected [H, T, d], got {:?}", xv.shape())));
                }
                let (h, t, dh) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let d = h * dh;
                let mut out = vec![0.0; t * d];
                for hi in 0..h {
                    for ti in 0..t {
                        out[ti * d + hi * dh..ti * d + (hi + 1) * dh]
                            .copy_from_slice(&xv.data()[(hi * t + ti) * dh..(hi * t + ti + 1) * dh]);
                    }
                }
                plain(Tensor::from_parts(vec![t, d], out))
            }
            Op::SliceLast { x, start, end } => {
                let xv = self.val(*x);
                let f = xv.last_dim();
                if start >= end || *end > f {
                    return Err(self.bad_shape(kind, id, format!("range {start}..{end} of last axis {f}")));
                }
                let w = end - start;
                let mut shape = xv.shape().to_vec();
                *shape.last_mut().unwrap() = w;
                let data = xv.data().chunks(f).flat_map(|r| r[*start..*end].iter().copied()).collect();
                plain(Tensor::from_parts(shape, data))
            }
            Op::SliceRows { x, start, end } => {
                let xv = self.val(*x);
                let rows = xv.shape()[0];
                if start >= end || *end > rows {
                    return Err(self.bad_shape(kind, id, format!("range {start}..{end} of {rows} rows")));
                }
                let stride = xv.len() / rows;
                let mut shape = xv.shape().to_vec();
                shape[0] = end - start;
                plain(Tensor::from_parts(shape, xv.data()[start * stride..end * stride].to_vec()))
            }
            Op::Interleave(xs) => {
                let first = self.val(xs[0]);
                if first.rank() != 2 {
                    return Err(self.bad_shape(kind, xs[0], "interleave inputs must be [R, F]"));
                }
                for x in &xs[1..] {
                    if self.val(*x).shape() != first.shape() {
                        return Err(self.mismatch(kind, xs[0], *x));
                    }
                }
                let (r, f, k) = (first.shape()[0], first.shape()[1], xs.len());
                let mut out = vec![0.0; r * k * f];
                for (j, x) in xs.iter().enumerate() {
                    let xv = self.val(*x).data();
                    for ri in 0..r {
                        out[(ri * k + j) * f..(ri * k + j + 1) * f].copy_from_slice(&xv[ri * f..(ri + 1) * f]);
                    }
                }
                plain(Tensor::from_parts(vec![r * k, f], out))
            }
            Op::RelPosBias { table, like, max_dist } => {
                let tab = self.val(*table);
                let span = 2 * max_dist + 1;
                if tab.rank() != 2 || tab.shape()[1] != span {
                    return Err(self.bad_shape(kind, *table, format!("table must be [H, {span}], got {:?}", tab.shape())));
                }
                let h = tab.shape()[0];
                let t = self.val(*like).shape()[0];
                let mut out = vec![0.0; h * t * t];
                for hi in 0..h {
                    for i in 0..t {
                        for j in 0..t {
                            out[(hi * t + i) * t + j] = tab.data()[hi * span + rel_index(i, j, *max_dist)];
                        }
                    }
                }
                plain(Tensor::from_parts(vec![h, t, t], out))
            }
            Op::Ctc { log_probs, target } => {
                let lp = self.val(*log_probs);
                let (nll, occupancy) = ctc_forward_backward(lp, target)?;
                Ok((Tensor::scalar(nll), Aux::Occupancy(occupancy)))
            }
            Op::Sum(xs) => {
                let mut acc = self.val(xs[0]).clone();
                for x in &xs[1..] {
                    let v = self.val(*x);
                    if v.shape() != acc.shape() {
                        return Err(self.mismatch(kind, xs[0], *x));
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(v.data()) {
                        *a += b;
                    }
                }
                plain(acc)
            }
        }
    }

    fn broadcast_binary(&self, kind: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.val(a), self.val(b));
        if !is_suffix(bv.shape(), av.shape()) {
            return Err(self.mismatch(kind, a, b));
        }
        let nb = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % nb]))
            .collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    fn matmul_dims(&self, a: NodeId, b: NodeId, trans_b: bool) -> Result<MatMulDims> {
        let (av, bv) = (self.val(a), self.val(b));
        let (ar, br) = (av.rank(), bv.rank());
        if ar < 2 || !(br == 2 || br == ar) {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k) = (av.shape()[ar - 2], av.shape()[ar - 1]);
        let (bk, n) = if trans_b {
            (bv.shape()[br - 1], bv.shape()[br - 2])
        } else {
            (bv.shape()[br - 2], bv.shape()[br - 1])
        };
        if bk != k {
            return Err(self.mismatch("matmul", a, b));
        }
        let batch: usize = av.shape()[..ar - 2].iter().product();
        let batched = br == ar && ar > 2;
        if batched && av.shape()[..ar - 2] != bv.shape()[..br - 2] {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out_shape = av.shape()[..ar - 1].to_vec();
        out_shape.push(n);
        Ok(MatMulDims {
            batch,
            m,
            k,
            n,
            batched,
            out_shape,
        })
    }

    fn matmul_forward(&self, a: NodeId, b: NodeId, trans_b: bool) -> Result<Tensor> {
        let d = self.matmul_dims(a, b, trans_b)?;
        let (av, bv) = (self.val(a).data(), self.val(b).data());
        let mut out = vec![0.0; d.batch * d.m * d.n];
        let b_view = |data| if trans_b { Mat::transposed(data, d.k) } else { Mat::row_major(data, d.n) };
        if d.batched {
            for bi in 0..d.batch {
                gemm(
                    d.m,
                    d.k,
                    d.n,
                    Mat::row_major(&av[bi * d.m * d.k..], d.k),
                    b_view(&bv[bi * d.k * d.n..]),
                    &mut out[bi * d.m * d.n..],
                    false,
                );
            }
        } else {
            gemm(d.batch * d.m, d.k, d.n, Mat::row_major(av, d.k), b_view(bv), &mut out, false);
        }
        Ok(Tensor::from_parts(d.out_shape, out))
    }

    fn layer_norm_forward(&self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<(Tensor, Aux)> {
        let xv = self.val(x);
        let f = xv.last_dim();
        for p in [gain, bias] {
            if self.val(p).shape() != [f] {
                return Err(self.mismatch("layer_norm", x, p));
            }
        }
        let (g, b) = (self.val(gain).data(), self.val(bias).data());
        let rows = xv.len() / f;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * f..(r + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..f {
                let h = (row[c] - mean) * inv;
                xhat[r * f + c] = h;
                out[r * f + c] = h * g[c] + b[c];
            }
        }
        Ok((
            Tensor::from_parts(xv.shape().to_vec(), out),
            Aux::LayerNorm { xhat, inv_std },
        ))
    }

    fn conv_forward(&self, id: NodeId, x: NodeId, w: NodeId, stride: usize, pad: usize, depthwise: bool) -> Result<(Tensor, Aux)> {
        let (xv, wv) = (self.val(x), self.val(w));
        if xv.rank() != 2 {
            return Err(self.bad_shape("conv1d", x, format!("expected [T, C], got {:?}", xv.shape())));
        }
        let (t, cin) = (xv.shape()[0], xv.shape()[1]);
        let kernel = wv.shape()[0];
        let shape_ok = if depthwise {
            wv.shape() == [kernel, cin]
        } else {
            wv.rank() == 3 && wv.shape()[1] == cin
        };
        if !shape_ok {
            return Err(self.mismatch("conv1d", x, w));
        }
        let t_out = conv_out_len(t, kernel, stride, pad).ok_or_else(|| {
            self.bad_shape("conv1d", id, format!("{t} frames too short for kernel {kernel} with padding {pad}"))
        })?;
        let xd = xv.data();
        if depthwise {
            let wd = wv.data();
            let mut out = vec![0.0; t_out * cin];
            for to in 0..t_out {
                let orow = &mut out[to * cin..(to + 1) * cin];
                for k in 0..kernel {
                    let Some(src) = source_frame(to, k, stride, pad, t) else { continue };
                    let xrow = &xd[src * cin..(src + 1) * cin];
                    let wrow = &wd[k * cin..(k + 1) * cin];
                    for c in 0..cin {
                        orow[c] += xrow[c] * wrow[c];
                    }
                }
            }
            return Ok((Tensor::from_parts(vec![t_out, cin], out), Aux::None));
        }
        let cout = wv.shape()[2];
        let width = kernel * cin;
        let mut cols = vec![0.0; t_out * width];
        for to in 0..t_out {
            for k in 0..kernel {
                if let Some(src) = source_frame(to, k, stride, pad, t) {
                    cols[to * width + k * cin..to * width + (k + 1) * cin]
                        .copy_from_slice(&xd[src * cin..(src + 1) * cin]);
                }
            }
        }
        let mut out = vec![0.0; t_out * cout];
        gemm(
            t_out,
            width,
            cout,
            Mat::row_major(&cols, width),
            Mat::row_major(wv.data(), cout),
            &mut out,
            false,
        );
        Ok((Tensor::from_parts(vec![t_out, cout], out), Aux::Columns(cols)))
    }

    // ---- reverse mode ---------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every unfrozen parameter,
    /// in binding order.
    pub fn backward(&mut self, loss: NodeId) -> Result<IndexMap<String, Tensor>> {
        if !self.evaluated {
            return Err(Error::BackwardBeforeForward);
        }
        let loss_val = self.try_value(loss)?;
        if !loss_val.is_scalar() {
            return Err(Error::NonScalarLoss {
                node: self.describe(loss),
                shape: loss_val.shape().to_vec(),
            });
        }
        let needs = self.needs_grad();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_val.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let is_leaf = matches!(self.nodes[i].op, Op::Param(_));
            if is_leaf {
                grads[i] = Some(g);
                continue;
            }
            let mut contributions = self.backward_node(NodeId(i), &g, &needs)?;
            if let Some((kind, factor)) = self.grad_tamper {
                if kind == self.nodes[i].op.kind() {
                    for (_, t) in &mut contributions {
                        for v in t.data_mut() {
                            *v *= factor;
                        }
                    }
                }
            }
            for (input, contrib) in contributions {
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let mut out = IndexMap::new();
        for (name, slot) in &self.params {
            if self.frozen.contains(name) {
                continue;
            }
            let g = grads[slot.node.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(slot.value.shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match &node.op {
                Op::Param(name) => !self.frozen.contains(name),
                Op::Input(_) | Op::Const(_) => false,
                op => op.inputs().iter().any(|x| needs[x.0]),
            };
        }
        needs
    }

    fn backward_node(&self, id: NodeId, g: &Tensor, needs: &[bool]) -> Result<Vec<(NodeId, Tensor)>> {
        let want = |n: NodeId| needs[n.0];
        let mut out = Vec::new();
        let y = self.val(id);
        match &self.nodes[id.0].op {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let d = self.matmul_dims(*a, *b, *trans_b)?;
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let gd = g.data();
                if want(*a) {
                    let mut ga = vec![0.0; av.len()];
                    // dA = dC * B^T
                    let bt = |data| if *trans_b { Mat::row_major(data, d.k) } else { Mat::transposed(data, d.n) };
                    if d.batched {
                        for bi in 0..d.batch {
                            gemm(
                                d.m,
                                d.n,
                                d.k,
                                Mat::row_major(&gd[bi * d.m * d.n..], d.n),
                                bt(&bv[bi * d.k * d.n..]),
                                &mut ga[bi * d.m * d.k..],
                                false,
                            );
                        }
                    } else {
                        gemm(d.batch * d.m, d.n, d.k, Mat::row_major(gd, d.n), bt(bv), &mut ga, false);
                    }
                    out.push((*a, Tensor::from_parts(self.val(*a).shape().to_vec(), ga)));
                }
                if want(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    let batches = if d.batched { d.batch } else { 1 };
                    let rows = if d.batched { d.m } else { d.batch * d.m };
                    for bi in 0..batches {
                        let a_off = bi * rows * d.k;
                        let g_off = bi * rows * d.n;
                        let b_off = bi * d.k * d.n;
                        if *trans_b {
                            // dB [n, k] = dC^T * A
                            gemm(
                                d.n,
                                rows,
                                d.k,
                                Mat::transposed(&gd[g_off..], d.n),
                                Mat::row_major(&av[a_off..], d.k),
                                &mut gb[b_off..],
                                false,
                            );
                        } else {
                            // dB [k, n] = A^T * dC
                            gemm(
                                d.k,
                                rows,
                                d.n,
                                Mat::transposed(&av[a_off..], d.k),
                                Mat::row_major(&gd[g_off..], d.n),
                                &mut gb[b_off..],
                                false,
                            );
                        }
                    }
                    out.push((*b, Tensor::from_parts(self.val(*b).shape().to_vec(), gb)));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[id.0].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if want(*a) {
                    out.push((*a, g.clone()));
                }
                if want(*b) {
                    let bv = self.val(*b);
                    let nb = bv.len();
                    let mut gb = vec![0.0; nb];
                    for (i, v) in g.data().iter().enumerate() {
                        gb[i % nb] += sign * v;
                    }
                    out.push((*b, Tensor::from_parts(bv.shape().to_vec(), gb)));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let nb = bv.len();
                if want(*a) {
                    let ga = g.data().iter().enumerate().map(|(i, v)| v * bv.data()[i % nb]).collect();
                    out.push((*a, Tensor::from_parts(av.shape().to_vec(), ga)));
                }
                if want(*b) {
                    let mut gb = vec![0.0; nb];
                    for (i, v) in g.data().iter().enumerate() {
                        gb[i % nb] += v * av.data()[i];
                    }
                    out.push((*b, Tensor::from_parts(bv.shape().to_vec(), gb)));
                }
            }
            Op::Scale(a, c) => {
                if want(*a) {
                    out.push((*a, g.map(|v| v * c)));
                }
            }
            Op::Sigmoid(a) => {
                if want(*a) {
                    out.push((*a, zip_map(g, y, |gv, s| gv * s * (1.0 - s))));
                }
            }
            Op::Swish(a) => {
                if want(*a) {
                    out.push((
                        *a,
                        zip_map(g, self.val(*a), |gv, x| {
                            let s = sigmoid(x);
                            gv * (s + x * s * (1.0 - s))
                        }),
                    ));
                }
            }
            Op::Relu(a) => {
                if want(*a) {
                    out.push((*a, zip_map(g, self.val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })));
                }
            }
            Op::Tanh(a) => {
                if want(*a) {
                    out.push((*a, zip_map(g, y, |gv, t| gv * (1.0 - t * t))));
                }
            }
            Op::Log(a) => {
                if want(*a) {
                    out.push((*a, zip_map(g, self.val(*a), |gv, x| gv / x)));
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let Aux::LayerNorm { xhat, inv_std } = &self.aux[id.0] else { unreachable!() };
                let f = y.last_dim();
                let rows = y.len() / f;
                let gain_v = self.val(*gain).data();
                let gd = g.data();
                if want(*gain) || want(*bias) {
                    let mut gg = vec![0.0; f];
                    let mut gbias = vec![0.0; f];
                    for r in 0..rows {
                        for c in 0..f {
                            gg[c] += gd[r * f + c] * xhat[r * f + c];
                            gbias[c] += gd[r * f + c];
                        }
                    }
                    if want(*gain) {
                        out.push((*gain, Tensor::from_parts(vec![f], gg)));
                    }
                    if want(*bias) {
                        out.push((*bias, Tensor::from_parts(vec![f], gbias)));
                    }
                }
                if want(*x) {
                    let mut gx = vec![0.0; y.len()];
                    for r in 0..rows {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..f {
                            let dxh = gd[r * f + c] * gain_v[c];
                            sum_d += dxh;
                            sum_dx += dxh * xhat[r * f + c];
                        }
                        let scale = inv_std[r] / f as f64;
                        for c in 0..f {
                            let dxh = gd[r * f + c] * gain_v[c];
                            gx[r * f + c] = scale * (f as f64 * dxh - sum_d - xhat[r * f + c] * sum_dx);
                        }
                    }
                    out.push((*x, Tensor::from_parts(y.shape().to_vec(), gx)));
                }
            }
            Op::Conv1d {
                x,
                w,
                stride,
                pad,
                depthwise,
            } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (t, cin) = (xv.shape()[0], xv.shape()[1]);
                let kernel = wv.shape()[0];
                let t_out = y.shape()[0];
                let gd = g.data();
                if *depthwise {
                    let (xd, wd) = (xv.data(), wv.data());
                    let mut gx = vec![0.0; xv.len()];
                    let mut gw = vec![0.0; wv.len()];
                    for to in 0..t_out {
                        let grow = &gd[to * cin..(to + 1) * cin];
                        for k in 0..kernel {
                            let Some(src) = source_frame(to, k, *stride, *pad, t) else { continue };
                            for c in 0..cin {
                                gx[src * cin + c] += grow[c] * wd[k * cin + c];
                                gw[k * cin + c] += grow[c] * xd[src * cin + c];
                            }
                        }
                    }
                    if want(*x) {
                        out.push((*x, Tensor::from_parts(xv.shape().to_vec(), gx)));
                    }
                    if want(*w) {
                        out.push((*w, Tensor::from_parts(wv.shape().to_vec(), gw)));
                    }
                } else {
                    let Aux::Columns(cols) = &self.aux[id.0] else { unreachable!() };
                    let cout = wv.shape()[2];
                    let width = kernel * cin;
                    if want(*w) {
                        let mut gw = vec![0.0; wv.len()];
                        gemm(
                            width,
                            t_out,
                            cout,
                            Mat::transposed(cols, width),
                            Mat::row_major(gd, cout),
                            &mut gw,
                            false,
                        );
                        out.push((*w, Tensor::from_parts(wv.shape().to_vec(), gw)));
                    }
                    if want(*x) {
                        let mut gcols = vec![0.0; t_out * width];
                        gemm(
                            t_out,
                            cout,
                            width,
                            Mat::row_major(gd, cout),
                            Mat::transposed(wv.data(), cout),
                            &mut gcols,
                            false,
                        );
                        let mut gx = vec![0.0; xv.len()];
                        for to in 0..t_out {
                            for k in 0..kernel {
                                if let Some(src) = source_frame(to, k, *stride, *pad, t) {
                                    let from = &gcols[to * width + k * cin..to * width + (k + 1) * cin];
                                    for (dst, v) in gx[src * cin..(src + 1) * cin].iter_mut().zip(from) {
                                        *dst += v;
                                    }
                                }
                            }
                        }
                        out.push((*x, Tensor::from_parts(xv.shape().to_vec(), gx)));
                    }
                }
            }
            Op::Softmax(a) => {
                if want(*a) {
                    let f = y.last_dim();
                    let mut gx = vec![0.0; y.len()];
                    for (r, (yr, gr)) in y.data().chunks(f).zip(g.data().chunks(f)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..f {
                            gx[r * f + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    out.push((*a, Tensor::from_parts(y.shape().to_vec(), gx)));
                }
            }
            Op::LogSoftmax(a) => {
                if want(*a) {
                    let f = y.last_dim();
                    let mut gx = vec![0.0; y.len()];
                    for (r, (yr, gr)) in y.data().chunks(f).zip(g.data().chunks(f)).enumerate() {
                        let total: f64 = gr.iter().sum();
                        for c in 0..f {
                            gx[r * f + c] = gr[c] - yr[c].exp() * total;
                        }
                    }
                    out.push((*a, Tensor::from_parts(y.shape().to_vec(), gx)));
                }
            }
            Op::MeanAbs(a) => {
                if want(*a) {
                    let xv = self.val(*a);
                    let scale = g.item() / xv.len() as f64;
                    out.push((*a, xv.map(|v| sign(v) * scale)));
                }
            }
            Op::SumAll(a) => {
                if want(*a) {
                    out.push((*a, Tensor::full(self.val(*a).shape(), g.item())));
                }
            }
            Op::MaskedL1 { pred, target, mask } => {
                let (p, t) = (self.val(*pred), self.val(*target));
                let f = p.last_dim();
                let weight: f64 = mask.data().iter().sum();
                let scale = g.item() / (weight * f as f64);
                let mut gp = vec![0.0; p.len()];
                for (r, &m) in mask.data().iter().enumerate() {
                    if m == 0.0 {
                        continue;
                    }
                    for c in r * f..(r + 1) * f {
                        gp[c] = m * scale * sign(p.data()[c] - t.data()[c]);
                    }
                }
                if want(*target) {
                    out.push((*target, Tensor::from_parts(t.shape().to_vec(), gp.iter().map(|v| -v).collect())));
                }
                if want(*pred) {
                    out.push((*pred, Tensor::from_parts(p.shape().to_vec(), gp)));
                }
            }
            Op::SplitHeads { x, heads } => {
                if want(*x) {
                    let (t, dh) = (y.shape()[1], y.shape()[2]);
                    let d = heads * dh;
                    let mut gx = vec![0.0; t * d];
                    for h in 0..*heads {
                        for ti in 0..t {
                            gx[ti * d + h * dh..ti * d + (h + 1) * dh]
                                .copy_from_slice(&g.data()[(h * t + ti) * dh..(h * t + ti + 1) * dh]);
                        }
                    }
                    out.push((*x, Tensor::from_parts(vec![t, d], gx)));
                }
            }
            Op::MergeHeads(x) => {
                if want(*x) {
                    let xs = self.val(*x).shape();
                    let (h, t, dh) = (xs[0], xs[1], xs[2]);
                    let d = h * dh;
                    let mut gx = vec![0.0; t * d];
                    for hi in 0..h {
                        for ti in 0..t {
                            gx[(hi * t + ti) * dh..(hi * t + ti + 1) * dh]
                                .copy_from_slice(&g.data()[ti * d + hi * dh..ti * d + (hi + 1) * dh]);
                        }
                    }
                    out.push((*x, Tensor::from_parts(xs.to_vec(), gx)));
                }
            }
            Op::SliceLast { x, start, end } => {
                if want(*x) {
                    let xv = self.val(*x);
                    let f = xv.last_dim();
                    let w = end - start;
                    let mut gx = vec![0.0; xv.len()];
                    for (r, gr) in g.data().chunks(w).enumerate() {
                        gx[r * f + start..r * f + end].copy_from_slice(gr);
                    }
                    out.push((*x, Tensor::from_parts(xv.shape().to_vec(), gx)));
                }
            }
            Op::SliceRows { x, start, .. } => {
                if want(*x) {
                    let xv = self.val(*x);
                    let stride = xv.len() / xv.shape()[0];
                    let mut gx = vec![0.0; xv.len()];
                    gx[start * stride..start * stride + g.len()].copy_from_slice(g.data());
                    out.push((*x, Tensor::from_parts(xv.shape().to_vec(), gx)));
                }
            }
            Op::Interleave(xs) => {
                let k = xs.len();
                let (r, f) = (y.shape()[0] / k, y.shape()[1]);
                for (j, x) in xs.iter().enumerate() {
                    if !want(*x) {
                        continue;
                    }
                    let mut gx = vec![0.0; r * f];
                    for ri in 0..r {
                        gx[ri * f..(ri + 1) * f].copy_from_slice(&g.data()[(ri * k + j) * f..(ri * k + j + 1) * f]);
                    }
                    out.push((*x, Tensor::from_parts(vec![r, f], gx)));
                }
            }
            Op::RelPosBias { table, max_dist, .. } => {
                if want(*table) {
                    let tab = self.val(*table);
                    let span = 2 * max_dist + 1;
                    let (h, t) = (y.shape()[0], y.shape()[1]);
                    let mut gt = vec![0.0; tab.len()];
                    for hi in 0..h {
                        for i in 0..t {
                            for j in 0..t {
                                gt[hi * span + rel_index(i, j, *max_dist)] += g.data()[(hi * t + i) * t + j];
                            }
                        }
                    }
                    out.push((*table, Tensor::from_parts(tab.shape().to_vec(), gt)));
                }
            }
            Op::Ctc { log_probs, .. } => {
                if want(*log_probs) {
                    let Aux::Occupancy(occ) = &self.aux[id.0] else { unreachable!() };
                    let scale = g.item();
                    let shape = self.val(*log_probs).shape().to_vec();
                    out.push((*log_probs, Tensor::from_parts(shape, occ.iter().map(|o| -o * scale).collect())));
                }
            }
            Op::Sum(xs) => {
                for x in xs {
                    if want(*x) {
                        out.push((*x, g.clone()));
                    }
                }
            }
        }
        Ok(out)
    }
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    batched: bool,
    out_shape: Vec<usize>,
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn source_frame(out: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let pos = (out * stride + k) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
}

#[inline]
fn rel_index(i: usize, j: usize, max_dist: usize) -> usize {
    let m = max_dist as isize;
    ((j as isize - i as isize).clamp(-m, m) + m) as usize
}

fn row_softmax(x: &Tensor, log: bool) -> Tensor {
    let f = x.last_dim();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(f) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
        if log {
            let lse = max + total.ln();
            out.extend(row.iter().map(|v| v - lse));
        } else {
            out.extend(row.iter().map(|v| (v - max).exp() / total));
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Minimum number of frames a CTC alignment of `target` needs.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Log-space CTC forward-backward. Returns the negative log-likelihood and
/// the per-frame label occupancy `[T, V]` (posterior of emitting each label).
pub(crate) fn ctc_forward_backward(log_probs: &Tensor, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    if log_probs.rank() != 2 {
        return Err(Error::invalid(format!("ctc log-probs must be [T, V], got {:?}", log_probs.shape())));
    }
    let (t_len, v) = (log_probs.shape()[0], log_probs.shape()[1]);
    if let Some(&bad) = target.iter().find(|&&l| l == 0 || l >= v) {
        return Err(Error::invalid(format!("ctc label {bad} outside 1..{v}")));
    }
    let need = ctc_min_frames(target);
    if need > t_len {
        return Err(Error::TargetUnreachable {
            target_len: target.len(),
            repeats: need - target.len(),
            frames: t_len,
        });
    }
    let lp = log_probs.data();
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s.is_multiple_of(2) { 0 } else { target[s / 2] };
    let can_skip = |s: usize| s >= 2 && label(s) != 0 && label(s) != label(s - 2);
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp[0];
    if s_len > 1 {
        alpha[1] = lp[label(1)];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp[t * v + label(s)] };
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = if s_len > 1 {
        log_add(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_p == ninf {
        return Err(Error::TargetUnreachable {
            target_len: target.len(),
            repeats: need - target.len(),
            frames: t_len,
        });
    }

    // beta excludes the emission at its own frame, so alpha*beta/p is the posterior.
    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut acc = ninf;
            for succ in [s, s + 1, s + 2] {
                if succ >= s_len || (succ == s + 2 && !can_skip(succ)) {
                    continue;
                }
                let b = beta[next + succ];
                if b != ninf {
                    acc = log_add(acc, b + lp[(t + 1) * v + label(succ)]);
                }
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut occupancy = vec![0.0; t_len * v];
    for t in 0..t_len {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a != ninf && b != ninf {
                occupancy[t * v + label(s)] += (a + b - log_p).exp();
            }
        }
    }
    Ok((-log_p, occupancy))
}

/// Exposed for the CTC module, which evaluates the loss outside a graph.
pub(crate) fn log_softmax_rows(x: &Tensor) -> Tensor {
    row_softmax(x, true)
}
