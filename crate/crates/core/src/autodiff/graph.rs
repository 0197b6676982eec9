use std::collections::HashMap;

use super::{gemm, Parameter, Result, Tensor, TensorError, View, ViewMut};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// One block of attention: a contiguous run of query rows attending to a
/// contiguous run of key rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionSegment {
    pub query_start: usize,
    pub query_len: usize,
    pub key_start: usize,
    pub key_len: usize,
    /// Key position of the first query row; under a causal mask query `i`
    /// sees keys `0..=query_offset + i`.
    pub query_offset: usize,
}

/// How the rows of a stacked batch are grouped for attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub causal: bool,
    pub segments: Vec<AttentionSegment>,
}

impl AttentionLayout {
    /// Each sequence attends within itself.
    pub fn self_attention(lengths: &[usize], heads: usize, causal: bool) -> Self {
        let mut start = 0;
        let segments = lengths
            .iter()
            .map(|&len| {
                let seg = AttentionSegment {
                    query_start: start,
                    query_len: len,
                    key_start: start,
                    key_len: len,
                    query_offset: 0,
                };
                start += len;
                seg
            })
            .collect();
        AttentionLayout {
            heads,
            causal,
            segments,
        }
    }

    /// Sequence `b` of the queries attends to sequence `b` of the keys.
    pub fn cross_attention(query_lengths: &[usize], key_lengths: &[usize], heads: usize) -> Self {
        assert_eq!(query_lengths.len(), key_lengths.len());
        let (mut q, mut k) = (0, 0);
        let segments = query_lengths
            .iter()
            .zip(key_lengths)
            .map(|(&ql, &kl)| {
                let seg = AttentionSegment {
                    query_start: q,
                    query_len: ql,
                    key_start: k,
                    key_len: kl,
                    query_offset: 0,
                };
                q += ql;
                k += kl;
                seg
            })
            .collect();
        AttentionLayout {
            heads,
            causal: false,
            segments,
        }
    }

    /// Rows an additive logit bias must have: one per (query, key) pair of
    /// every segment, segment-major, then query-major.
    pub fn bias_rows(&self) -> usize {
        self.segments.iter().map(|s| s.query_len * s.key_len).sum()
    }

    fn allowed(&self, seg: &AttentionSegment, i: usize, j: usize) -> bool {
        !self.causal || j <= seg.query_offset + i
    }
}

enum Op {
    Input,
    Param(Parameter),
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    Sum {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: NodeId,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    LogFloor {
        x: NodeId,
        floor: f64,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        bias: Option<NodeId>,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<f64>,
        count: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Affine { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::MatMul { a, b } | Op::Add { a, b } => vec![*a, *b],
            Op::Relu { x } | Op::Scale { x, .. } | Op::Sum { x } | Op::Softmax { x } | Op::LogFloor { x, .. } => {
                vec![*x]
            }
            Op::LayerNorm { x, gain, shift, .. } => vec![*x, *gain, *shift],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatRows { parts } => parts.clone(),
            Op::Attention { q, k, v, bias, .. } => {
                let mut out = vec![*q, *k, *v];
                out.extend(bias);
                out
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only tape of forward computations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<u64, NodeId>,
    backward_done: bool,
}

fn mismatch(op: &'static str, left: &Tensor, right: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
}

fn softmax_row(row: &mut [f64], allowed: impl Fn(usize) -> bool) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if allowed(j) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(TensorError::NoAttendablePosition);
    }
    let mut total = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        if allowed(j) {
            *x = (*x - max).exp();
            total += *x;
        } else {
            *x = 0.0;
        }
    }
    for x in row.iter_mut() {
        *x /= total;
    }
    Ok(())
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Distinct parameters recorded so far, in insertion order.
    pub fn parameters(&self) -> Vec<Parameter> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(p) => Some(p.clone()),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Constant input; receives no gradient outside the graph.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Input, "input")
    }

    /// Records `param` once per graph; later calls return the same node.
    pub fn param(&mut self, param: &Parameter) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&param.id()) {
            return id;
        }
        let value = param.value().clone();
        self.nodes.push(Node {
            value,
            op: Op::Param(param.clone()),
        });
        let id = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(param.id(), id);
        id
    }

    /// `x · w (+ b)` over the last axis of `x`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[0] {
            return Err(mismatch("affine", xv, wv));
        }
        let (n, p, q) = (xv.rows(), xv.cols(), wv.shape()[1]);
        let mut out = vec![0.0; n * q];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != q {
                return Err(mismatch("affine bias", wv, bv));
            }
            for row in out.chunks_mut(q) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            1.0,
            View::matrix(xv.data(), n, p),
            View::matrix(wv.data(), p, q),
            1.0,
            ViewMut::matrix(&mut out, n, q),
        );
        let value = Tensor::matrix(n, q, out)?;
        self.push(value, Op::Affine { x, w, b }, "affine")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(mismatch("matmul", av, bv));
        }
        let (n, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; n * q];
        gemm(
            1.0,
            View::matrix(av.data(), n, p),
            View::matrix(bv.data(), p, q),
            0.0,
            ViewMut::matrix(&mut out, n, q),
        );
        let value = Tensor::matrix(n, q, out)?;
        self.push(value, Op::MatMul { a, b }, "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av, bv));
        }
        let mut value = av.clone();
        value.add_assign(bv);
        self.push(value, Op::Add { a, b }, "add")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu { x }, "relu")
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, "scale")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, "sum")
    }

    /// Per-row normalization over the last axis, then `gain * x + shift`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let (gv, sv) = (self.value(gain), self.value(shift));
        let c = xv.cols();
        if gv.len() != c {
            return Err(mismatch("layer_norm gain", xv, gv));
        }
        if sv.len() != c {
            return Err(mismatch("layer_norm shift", xv, sv));
        }
        let rows = xv.rows();
        let mut normalized = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let nv = (row[j] - mean) * is;
                normalized[r * c + j] = nv;
                out[r * c + j] = nv * gv.data()[j] + sv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Row-wise softmax over the last axis. `mask` (true = attendable) is
    /// either one flag per column, shared by all rows, or one per element.
    pub fn masked_softmax(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        if let Some(m) = mask {
            if m.len() != c && m.len() != xv.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    left: xv.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            softmax_row(row, |j| match mask {
                None => true,
                Some(m) if m.len() == c => m[j],
                Some(m) => m[r * c + j],
            })?;
        }
        self.push(value, Op::Softmax { x }, "masked_softmax")
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let bound = tv.rows();
        if let Some(&bad) = ids.iter().find(|&&i| i >= bound) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                bound,
            });
        }
        let value = tv.gather_rows(ids).reshape(vec![ids.len(), tv.cols()])?;
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// Rows of any node selected by `ids`, repeats allowed. Same operation
    /// as [`Graph::embedding`]; the gradient scatter-adds back into `x`.
    pub fn gather_rows(&mut self, x: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.embedding(x, ids)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.value(*parts.first().ok_or(TensorError::Ragged)?);
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(mismatch("concat_rows", first, pv));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::matrix(rows, c, data)?;
        self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            "concat_rows",
        )
    }

    /// `ln(max(x, floor))`; no gradient flows where the floor is active.
    pub fn log_floor(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        let value = self.value(x).map(|v| v.max(floor).ln());
        self.push(value, Op::LogFloor { x, floor }, "log_floor")
    }

    /// Per-head `softmax(q kᵀ / √head_dim + bias) v` over each segment of
    /// `layout`, heads concatenated along the last axis.
    ///
    /// `bias`, when present, has [`AttentionLayout::bias_rows`] rows and one
    /// column per head.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        bias: Option<NodeId>,
        layout: &AttentionLayout,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        if kv.cols() != width || vv.cols() != width {
            return Err(mismatch("attention", qv, kv));
        }
        if kv.rows() != vv.rows() {
            return Err(mismatch("attention", kv, vv));
        }
        let heads = layout.heads;
        if heads == 0 || width % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "attention heads",
                left: qv.shape().to_vec(),
                right: vec![heads],
            });
        }
        let bias_value = bias.map(|b| self.value(b));
        if let Some(bv) = bias_value {
            if bv.rows() != layout.bias_rows() || bv.cols() != heads {
                return Err(TensorError::ShapeMismatch {
                    op: "attention bias",
                    left: bv.shape().to_vec(),
                    right: vec![layout.bias_rows(), heads],
                });
            }
        }
        for seg in &layout.segments {
            if seg.query_start + seg.query_len > qv.rows() || seg.key_start + seg.key_len > kv.rows() {
                return Err(TensorError::IndexOutOfRange {
                    op: "attention segment",
                    index: seg.query_start + seg.query_len,
                    bound: qv.rows(),
                });
            }
        }

        let head_dim = width / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut out = vec![0.0; qv.rows() * width];
        let mut probs = Vec::with_capacity(layout.bias_rows() * heads);
        let mut bias_base = 0;
        for seg in &layout.segments {
            let (tq, tk) = (seg.query_len, seg.key_len);
            for h in 0..heads {
                let col = h * head_dim;
                let mut scores = vec![0.0; tq * tk];
                gemm(
                    scale,
                    View::block(qv.data(), width, seg.query_start, tq, col, head_dim),
                    View::block(kv.data(), width, seg.key_start, tk, col, head_dim).t(),
                    0.0,
                    ViewMut::matrix(&mut scores, tq, tk),
                );
                if let Some(bv) = bias_value {
                    for (idx, s) in scores.iter_mut().enumerate() {
                        *s += bv.data()[(bias_base + idx) * heads + h];
                    }
                }
                for i in 0..tq {
                    softmax_row(&mut scores[i * tk..(i + 1) * tk], |j| layout.allowed(seg, i, j))?;
                }
                gemm(
                    1.0,
                    View::matrix(&scores, tq, tk),
                    View::block(vv.data(), width, seg.key_start, tk, col, head_dim),
                    0.0,
                    ViewMut::block(&mut out, width, seg.query_start, tq, col, head_dim),
                );
                probs.extend_from_slice(&scores);
            }
            bias_base += tq * tk;
        }
        let value = Tensor::matrix(qv.rows(), width, out)?;
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                bias,
                layout: layout.clone(),
                probs,
            },
            "attention",
        )
    }

    /// Attention probabilities recorded by an attention node, segment-major
    /// then head-major, each block `query_len × key_len`.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean negative log-likelihood of `targets` over rows whose target is
    /// not `ignore_index`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], ignore_index: usize) -> Result<NodeId> {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * c..(r + 1) * c];
            softmax_row(row, |_| true)?;
            if t == ignore_index {
                continue;
            }
            if t >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: c,
                });
            }
            // log p computed from logits directly for accuracy.
            let logits_row = lv.row(r);
            let max = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits_row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - logits_row[t];
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::AllIgnored);
        }
        let value = Tensor::scalar(total / count as f64);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            "cross_entropy",
        )
    }

    /// Back-propagates from a scalar `loss` and stores the gradient of
    /// every reachable parameter on the parameter itself.
    ///
    /// Fails if a reachable parameter still holds a gradient, or if this
    /// graph has already been differentiated.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::StaleGradients(
                "backward already ran on this graph".into(),
            ));
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(loss_shape));
        }

        let mut reachable = vec![false; loss.0 + 1];
        reachable[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if reachable[i] {
                for input in self.nodes[i].op.inputs() {
                    reachable[input.0] = true;
                }
            }
        }
        for (i, node) in self.nodes[..=loss.0].iter().enumerate() {
            if let Op::Param(p) = &node.op {
                if reachable[i] && p.has_grad() {
                    return Err(TensorError::StaleGradients(format!(
                        "{} still holds a gradient; reset before another backward pass",
                        p.name()
                    )));
                }
            }
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(loss_shape, vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else { continue };
            self.backprop_node(i, grad, &mut grads)?;
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, grad: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut accumulate = |id: NodeId, g: Tensor| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Input => {}
            Op::Param(p) => p.store_grad(grad)?,
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, p, q) = (xv.rows(), xv.cols(), wv.shape()[1]);
                let mut dx = vec![0.0; n * p];
                gemm(
                    1.0,
                    View::matrix(grad.data(), n, q),
                    View::matrix(wv.data(), p, q).t(),
                    0.0,
                    ViewMut::matrix(&mut dx, n, p),
                );
                let mut dw = vec![0.0; p * q];
                gemm(
                    1.0,
                    View::matrix(xv.data(), n, p).t(),
                    View::matrix(grad.data(), n, q),
                    0.0,
                    ViewMut::matrix(&mut dw, p, q),
                );
                if let Some(b) = b {
                    let mut db = vec![0.0; q];
                    for row in grad.data().chunks(q) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(*b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
                }
                accumulate(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                accumulate(*w, Tensor::new(wv.shape().to_vec(), dw)?);
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, p, q) = (av.rows(), av.cols(), bv.cols());
                let mut da = vec![0.0; n * p];
                gemm(
                    1.0,
                    View::matrix(grad.data(), n, q),
                    View::matrix(bv.data(), p, q).t(),
                    0.0,
                    ViewMut::matrix(&mut da, n, p),
                );
                let mut db = vec![0.0; p * q];
                gemm(
                    1.0,
                    View::matrix(av.data(), n, p).t(),
                    View::matrix(grad.data(), n, q),
                    0.0,
                    ViewMut::matrix(&mut db, p, q),
                );
                accumulate(*a, Tensor::new(av.shape().to_vec(), da)?);
                accumulate(*b, Tensor::new(bv.shape().to_vec(), db)?);
            }
            Op::Add { a, b } => {
                accumulate(*a, grad.clone());
                accumulate(*b, grad);
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let mut g = grad;
                for (gv, &v) in g.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *gv = 0.0;
                    }
                }
                accumulate(*x, g);
            }
            Op::Scale { x, factor } => accumulate(*x, grad.map(|g| g * factor)),
            Op::Sum { x } => {
                let xv = self.value(*x);
                accumulate(*x, Tensor::filled(xv.shape().to_vec(), grad.data()[0]));
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let c = xv.cols();
                let rows = xv.rows();
                let mut dx = vec![0.0; rows * c];
                let mut dgain = vec![0.0; c];
                let mut dshift = vec![0.0; c];
                for r in 0..rows {
                    let dy = grad.row(r);
                    let xhat = &normalized[r * c..(r + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let dxhat = dy[j] * gv.data()[j];
                        mean_d += dxhat;
                        mean_dx += dxhat * xhat[j];
                        dgain[j] += dy[j] * xhat[j];
                        dshift[j] += dy[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let dxhat = dy[j] * gv.data()[j];
                        dx[r * c + j] = inv_std[r] * (dxhat - mean_d - xhat[j] * mean_dx);
                    }
                }
                accumulate(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                accumulate(*gain, Tensor::new(gv.shape().to_vec(), dgain)?);
                accumulate(*shift, Tensor::new(self.value(*shift).shape().to_vec(), dshift)?);
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = grad;
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dr = &mut dx.data_mut()[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (dr[j] - dot);
                    }
                }
                accumulate(*x, dx);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let c = tv.cols();
                let mut dt = Tensor::zeros(tv.shape().to_vec());
                for (r, &id) in ids.iter().enumerate() {
                    let src = grad.row(r);
                    for (d, s) in dt.data_mut()[id * c..(id + 1) * c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                accumulate(*table, dt);
            }
            Op::ConcatRows { parts } => {
                let mut start = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.len();
                    let slice = grad.data()[start..start + len].to_vec();
                    accumulate(p, Tensor::new(pv.shape().to_vec(), slice)?);
                    start += len;
                }
            }
            Op::LogFloor { x, floor } => {
                let xv = self.value(*x);
                let mut g = grad;
                for (gv, &v) in g.data_mut().iter_mut().zip(xv.data()) {
                    *gv = if v > *floor { *gv / v } else { 0.0 };
                }
                accumulate(*x, g);
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                layout,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let width = qv.cols();
                let heads = layout.heads;
                let head_dim = width / heads;
                let scale = 1.0 / (head_dim as f64).sqrt();
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut dbias = bias.map(|_| vec![0.0; layout.bias_rows() * heads]);
                let mut prob_base = 0;
                let mut bias_base = 0;
                for seg in &layout.segments {
                    let (tq, tk) = (seg.query_len, seg.key_len);
                    for h in 0..heads {
                        let col = h * head_dim;
                        let p = &probs[prob_base..prob_base + tq * tk];
                        prob_base += tq * tk;
                        let dout = View::block(grad.data(), width, seg.query_start, tq, col, head_dim);
                        // dV += Pᵀ dO
                        gemm(
                            1.0,
                            View::matrix(p, tq, tk).t(),
                            dout,
                            1.0,
                            ViewMut::block(&mut dv, width, seg.key_start, tk, col, head_dim),
                        );
                        // dP = dO Vᵀ
                        let mut ds = vec![0.0; tq * tk];
                        gemm(
                            1.0,
                            dout,
                            View::block(vv.data(), width, seg.key_start, tk, col, head_dim).t(),
                            0.0,
                            ViewMut::matrix(&mut ds, tq, tk),
                        );
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                        for i in 0..tq {
                            let pr = &p[i * tk..(i + 1) * tk];
                            let dr = &mut ds[i * tk..(i + 1) * tk];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for j in 0..tk {
                                dr[j] = pr[j] * (dr[j] - dot);
                            }
                        }
                        if let Some(db) = dbias.as_mut() {
                            for (idx, s) in ds.iter().enumerate() {
                                db[(bias_base + idx) * heads + h] += s;
                            }
                        }
                        gemm(
                            scale,
                            View::matrix(&ds, tq, tk),
                            View::block(kv.data(), width, seg.key_start, tk, col, head_dim),
                            1.0,
                            ViewMut::block(&mut dq, width, seg.query_start, tq, col, head_dim),
                        );
                        gemm(
                            scale,
                            View::matrix(&ds, tq, tk).t(),
                            View::block(qv.data(), width, seg.query_start, tq, col, head_dim),
                            1.0,
                            ViewMut::block(&mut dk, width, seg.key_start, tk, col, head_dim),
                        );
                    }
                    bias_base += tq * tk;
                }
                accumulate(*q, Tensor::new(qv.shape().to_vec(), dq)?);
                accumulate(*k, Tensor::new(kv.shape().to_vec(), dk)?);
                accumulate(*v, Tensor::new(vv.shape().to_vec(), dv)?);
                if let (Some(b), Some(db)) = (bias, dbias) {
                    accumulate(*b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                probs,
                count,
            } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let scale = grad.data()[0] / *count as f64;
                let mut dl = vec![0.0; lv.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore_index {
                        continue;
                    }
                    for j in 0..c {
                        dl[r * c + j] = probs[r * c + j] * scale;
                    }
                    dl[r * c + t] -= scale;
                }
                accumulate(*logits, Tensor::new(lv.shape().to_vec(), dl)?);
            }
        }
        Ok(())
    }
}
