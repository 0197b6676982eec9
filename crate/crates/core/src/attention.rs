//! Multi-head attention with tied projections and the geometric gate.
//!
//! Under [`AttentionShareMode::ShareQk`] the query and key projections are one
//! [`Linear`]; under [`AttentionShareMode::ShareKv`] the key and value
//! projections are. When the tied projections read the same source tensor
//! their outputs are identical, so the fast path computes the projection
//! once and reuses the node. Only `ShareKv` can reuse in cross-attention,
//! where queries and keys come from different sources.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AttentionLayout, Graph, NodeId, Parameter, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionShareMode {
    #[default]
    NoShare,
    ShareQk,
    ShareKv,
}

impl AttentionShareMode {
    /// Distinct projection matrices per block, output projection included.
    pub fn distinct_projections(self) -> usize {
        match self {
            AttentionShareMode::NoShare => 4,
            AttentionShareMode::ShareQk | AttentionShareMode::ShareKv => 3,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown attention sharing mode {0:?} (expected no_share, share_qk or share_kv)")]
pub struct UnknownShareMode(String);

impl FromStr for AttentionShareMode {
    type Err = UnknownShareMode;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "no_share" | "none" => Ok(AttentionShareMode::NoShare),
            "share_qk" => Ok(AttentionShareMode::ShareQk),
            "share_kv" => Ok(AttentionShareMode::ShareKv),
            _ => Err(UnknownShareMode(s.to_string())),
        }
    }
}

impl fmt::Display for AttentionShareMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionShareMode::NoShare => "no_share",
            AttentionShareMode::ShareQk => "share_qk",
            AttentionShareMode::ShareKv => "share_kv",
        })
    }
}

/// Uniform initialization in `[-bound, bound]`.
pub(crate) fn uniform(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Weight `[in × out]` plus bias `[out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Weights and bias drawn from `U(-1/√in, 1/√in)`.
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Linear {
            weight: Parameter::new(format!("{name}.weight"), uniform(rng, vec![inputs, outputs], bound)),
            bias: Parameter::new(format!("{name}.bias"), uniform(rng, vec![outputs], bound)),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.affine(x, w, Some(b))
    }

    pub fn same_as(&self, other: &Linear) -> bool {
        self.weight.same_as(&other.weight) && self.bias.same_as(&other.bias)
    }

    pub fn parameters(&self) -> [Parameter; 2] {
        [self.weight.clone(), self.bias.clone()]
    }

    pub fn numel(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    /// Independent copy with fresh parameter identities.
    pub fn deep_clone(&self, name: &str) -> Linear {
        Linear {
            weight: Parameter::new(format!("{name}.weight"), self.weight.value().clone()),
            bias: Parameter::new(format!("{name}.bias"), self.bias.value().clone()),
        }
    }
}

/// Q/K/V/O projections of one attention block, aliased according to `mode`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub mode: AttentionShareMode,
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Projected query, key and value nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Projected {
    pub query: NodeId,
    pub key: NodeId,
    pub value: NodeId,
}

impl AttentionWeights {
    pub fn new(prefix: &str, width: usize, heads: usize, mode: AttentionShareMode, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        let (query, key, value) = match mode {
            AttentionShareMode::NoShare => {
                let q = Linear::new(&format!("{prefix}.q"), width, width, rng);
                let k = Linear::new(&format!("{prefix}.k"), width, width, rng);
                let v = Linear::new(&format!("{prefix}.v"), width, width, rng);
                (q, k, v)
            }
            AttentionShareMode::ShareQk => {
                let qk = Linear::new(&format!("{prefix}.qk"), width, width, rng);
                let v = Linear::new(&format!("{prefix}.v"), width, width, rng);
                (qk.clone(), qk, v)
            }
            AttentionShareMode::ShareKv => {
                let q = Linear::new(&format!("{prefix}.q"), width, width, rng);
                let kv = Linear::new(&format!("{prefix}.kv"), width, width, rng);
                (q, kv.clone(), kv)
            }
        };
        let output = Linear::new(&format!("{prefix}.o"), width, width, rng);
        AttentionWeights {
            mode,
            heads,
            query,
            key,
            value,
            output,
        }
    }

    pub fn width(&self) -> usize {
        self.output.bias.numel()
    }

    /// Distinct parameters, in a fixed order.
    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = Vec::new();
        for lin in self.projections() {
            for p in lin.parameters() {
                if !out.iter().any(|q: &Parameter| q.same_as(&p)) {
                    out.push(p);
                }
            }
        }
        out
    }

    fn projections(&self) -> [&Linear; 4] {
        [&self.query, &self.key, &self.value, &self.output]
    }

    /// Every projection in stack order, aliases repeated (for per-layer
    /// comparisons that need a fixed tensor list regardless of mode).
    pub fn projection_tensors(&self) -> Vec<Parameter> {
        self.projections().iter().flat_map(|l| l.parameters()).collect()
    }

    pub fn deep_clone(&self, prefix: &str) -> Self {
        let names = match self.mode {
            AttentionShareMode::NoShare => ["q", "k", "v"],
            AttentionShareMode::ShareQk => ["qk", "qk", "v"],
            AttentionShareMode::ShareKv => ["q", "kv", "kv"],
        };
        let query = self.query.deep_clone(&format!("{prefix}.{}", names[0]));
        let key = if self.key.same_as(&self.query) {
            query.clone()
        } else {
            self.key.deep_clone(&format!("{prefix}.{}", names[1]))
        };
        let value = if self.value.same_as(&self.key) {
            key.clone()
        } else {
            self.value.deep_clone(&format!("{prefix}.{}", names[2]))
        };
        AttentionWeights {
            mode: self.mode,
            heads: self.heads,
            query,
            key,
            value,
            output: self.output.deep_clone(&format!("{prefix}.o")),
        }
    }

    /// Projections when query, key and value read the same tensor `x`.
    /// With `reuse`, a tied projection is computed once.
    pub fn project_self(&self, g: &mut Graph, x: NodeId, reuse: bool) -> Result<Projected> {
        let query = self.query.apply(g, x)?;
        let key = if reuse && self.mode == AttentionShareMode::ShareQk {
            query
        } else {
            self.key.apply(g, x)?
        };
        let value = if reuse && self.mode == AttentionShareMode::ShareKv {
            key
        } else {
            self.value.apply(g, x)?
        };
        Ok(Projected { query, key, value })
    }

    /// Key and value projections of a memory tensor; `ShareKv` with `reuse`
    /// returns the projected key as the value.
    pub fn project_memory(&self, g: &mut Graph, memory: NodeId, reuse: bool) -> Result<(NodeId, NodeId)> {
        let key = self.key.apply(g, memory)?;
        let value = if reuse && self.mode == AttentionShareMode::ShareKv {
            key
        } else {
            self.value.apply(g, memory)?
        };
        Ok((key, value))
    }

    /// Scaled dot-product attention over projected inputs, then the output
    /// projection.
    pub fn attend(
        &self,
        g: &mut Graph,
        projected: Projected,
        layout: &AttentionLayout,
        logit_bias: Option<NodeId>,
    ) -> Result<NodeId> {
        debug_assert_eq!(layout.heads, self.heads);
        let mixed = g.attention(projected.query, projected.key, projected.value, logit_bias, layout)?;
        self.output.apply(g, mixed)
    }

    /// General entry point. Reuse applies only where the tied projections
    /// read the same node; everything else is recomputed.
    #[allow(clippy::too_many_arguments)]
    pub fn multi_head_attention(
        &self,
        g: &mut Graph,
        query_src: NodeId,
        key_src: NodeId,
        value_src: NodeId,
        layout: &AttentionLayout,
        logit_bias: Option<NodeId>,
        reuse: bool,
    ) -> Result<NodeId> {
        let query = self.query.apply(g, query_src)?;
        let key = if reuse && self.mode == AttentionShareMode::ShareQk && key_src == query_src {
            query
        } else {
            self.key.apply(g, key_src)?
        };
        let value = if reuse && self.mode == AttentionShareMode::ShareKv && value_src == key_src {
            key
        } else {
            self.value.apply(g, value_src)?
        };
        self.attend(g, Projected { query, key, value }, layout, logit_bias)
    }
}

/// Center and size of a region in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxGeometry {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("box {index} has non-positive extent ({w} x {h})")]
    NonPositiveExtent { index: usize, w: f64, h: f64 },
    #[error("no regions")]
    Empty,
}

/// Relative geometry of every ordered pair `(m, n)`, `m`-major:
/// `((cx_n − cx_m)/w_m, (cy_n − cy_m)/h_m, ln(w_n/w_m), ln(h_n/h_m))`.
pub fn relative_geometry(boxes: &[BoxGeometry]) -> std::result::Result<Vec<[f64; 4]>, GeometryError> {
    if boxes.is_empty() {
        return Err(GeometryError::Empty);
    }
    for (index, b) in boxes.iter().enumerate() {
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(GeometryError::NonPositiveExtent { index, w: b.w, h: b.h });
        }
    }
    let mut out = Vec::with_capacity(boxes.len() * boxes.len());
    for m in boxes {
        for n in boxes {
            out.push([
                (n.cx - m.cx) / m.w,
                (n.cy - m.cy) / m.h,
                (n.w / m.w).ln(),
                (n.h / m.h).ln(),
            ]);
        }
    }
    Ok(out)
}

/// Sinusoidal embedding of relative geometry into `dim` features:
/// `dim / 8` frequencies per coordinate, sines then cosines.
pub fn embed_geometry(relative: &[[f64; 4]], dim: usize) -> Tensor {
    assert!(dim >= 8 && dim % 8 == 0, "geometry embedding size must be a multiple of 8");
    let freqs = dim / 8;
    let mut data = Vec::with_capacity(relative.len() * dim);
    for lambda in relative {
        let mut sines = Vec::with_capacity(dim / 2);
        let mut cosines = Vec::with_capacity(dim / 2);
        for &coord in lambda {
            for i in 0..freqs {
                let wave = 1000f64.powf(i as f64 / freqs as f64);
                let angle = 100.0 * coord / wave;
                sines.push(angle.sin());
                cosines.push(angle.cos());
            }
        }
        data.extend(sines);
        data.extend(cosines);
    }
    Tensor::new(vec![relative.len(), dim], data).expect("embedding shape")
}

/// Floor applied to gate values before taking the log, so a zero gate
/// becomes a large negative logit bias instead of `-inf`.
pub const GATE_FLOOR: f64 = 1e-9;

/// Learned map from pairwise box geometry to one non-negative weight per
/// head: `relu(embed(λ) · W + b)`.
#[derive(Clone, Debug)]
pub struct GeometricGate {
    pub proj: Linear,
    pub dim: usize,
}

impl GeometricGate {
    pub fn new(prefix: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        GeometricGate {
            proj: Linear::new(&format!("{prefix}.gate"), dim, heads, rng),
            dim,
        }
    }

    pub fn parameters(&self) -> [Parameter; 2] {
        self.proj.parameters()
    }

    /// Gate values `[pairs × heads]` for pre-embedded geometry.
    pub fn gate(&self, g: &mut Graph, embedded: NodeId) -> Result<NodeId> {
        let pre = self.proj.apply(g, embedded)?;
        g.relu(pre)
    }

    /// Log-gate used as an additive attention bias. Multiplying softmax
    /// numerators by the gate and renormalizing equals adding its log.
    pub fn logit_bias(&self, g: &mut Graph, embedded: NodeId) -> Result<NodeId> {
        let gate = self.gate(g, embedded)?;
        g.log_floor(gate, GATE_FLOOR)
    }

    /// Standalone evaluation: gate tensor laid out `[heads × n × n]`.
    pub fn evaluate(&self, boxes: &[BoxGeometry]) -> std::result::Result<Tensor, GateError> {
        let n = boxes.len();
        let rel = relative_geometry(boxes)?;
        let mut g = Graph::new();
        let emb = g.input(embed_geometry(&rel, self.dim))?;
        let gate = self.gate(&mut g, emb)?;
        let pairs = g.value(gate);
        let heads = pairs.cols();
        let mut data = vec![0.0; heads * n * n];
        for pair in 0..n * n {
            for h in 0..heads {
                data[h * n * n + pair] = pairs.get(pair, h);
            }
        }
        Ok(Tensor::new(vec![heads, n, n], data)?)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GateError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const MODES: [AttentionShareMode; 3] = [
        AttentionShareMode::NoShare,
        AttentionShareMode::ShareQk,
        AttentionShareMode::ShareKv,
    ];

    fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BoxGeometry> {
        (0..n)
            .map(|_| BoxGeometry {
                cx: rng.gen_range(0.0..1.0),
                cy: rng.gen_range(0.0..1.0),
                w: rng.gen_range(0.05..0.5),
                h: rng.gen_range(0.05..0.5),
            })
            .collect()
    }

    #[test]
    fn aliasing_follows_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = AttentionWeights::new("a", 8, 2, AttentionShareMode::NoShare, &mut rng);
        let qk = AttentionWeights::new("a", 8, 2, AttentionShareMode::ShareQk, &mut rng);
        let kv = AttentionWeights::new("a", 8, 2, AttentionShareMode::ShareKv, &mut rng);
        assert!(!none.query.same_as(&none.key) && !none.key.same_as(&none.value));
        assert!(qk.query.same_as(&qk.key) && !qk.key.same_as(&qk.value));
        assert!(kv.key.same_as(&kv.value) && !kv.query.same_as(&kv.key));
        // 4·(h² + h) versus 3·(h² + h)
        let count = |w: &AttentionWeights| w.parameters().iter().map(Parameter::numel).sum::<usize>();
        assert_eq!(count(&none), 4 * (64 + 8));
        assert_eq!(count(&qk), 3 * (64 + 8));
        assert_eq!(count(&kv), 3 * (64 + 8));
        for w in [&none, &qk, &kv] {
            assert_eq!(w.parameters().len(), 2 * w.mode.distinct_projections());
        }
    }

    #[test]
    fn deep_clone_preserves_aliasing_with_new_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let kv = AttentionWeights::new("a", 8, 2, AttentionShareMode::ShareKv, &mut rng);
        let copy = kv.deep_clone("b");
        assert!(copy.key.same_as(&copy.value));
        assert!(!copy.key.same_as(&kv.key));
        assert_eq!(*copy.key.weight.value(), *kv.key.weight.value());
        assert_eq!(copy.key.weight.name(), "b.kv.weight");
    }

    #[test]
    fn self_attention_fast_paths_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in MODES {
            let w = AttentionWeights::new("a", 12, 3, mode, &mut rng);
            let x = uniform(&mut rng, vec![7, 12], 1.0);
            let layout = AttentionLayout::self_attention(&[4, 3], 3, false);
            let run = |reuse| {
                let mut g = Graph::new();
                let xi = g.input(x.clone()).unwrap();
                let out = w.multi_head_attention(&mut g, xi, xi, xi, &layout, None, reuse).unwrap();
                let nodes = g.len();
                (g.value(out).clone(), nodes)
            };
            let (fast, fast_nodes) = run(true);
            let (naive, naive_nodes) = run(false);
            assert!(fast.max_abs_diff(&naive) <= 1e-12, "{mode}");
            if mode != AttentionShareMode::NoShare {
                assert!(fast_nodes < naive_nodes, "{mode}: reuse should skip a projection");
            }
        }
    }

    #[test]
    fn cross_attention_key_value_reuse_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mode in MODES {
            let w = AttentionWeights::new("a", 8, 2, mode, &mut rng);
            let queries = uniform(&mut rng, vec![5, 8], 1.0);
            let memory = uniform(&mut rng, vec![6, 8], 1.0);
            let layout = AttentionLayout::cross_attention(&[2, 3], &[4, 2], 2);
            let run = |reuse| {
                let mut g = Graph::new();
                let q = g.input(queries.clone()).unwrap();
                let m = g.input(memory.clone()).unwrap();
                let out = w.multi_head_attention(&mut g, q, m, m, &layout, None, reuse).unwrap();
                (g.value(out).clone(), g.len())
            };
            let (fast, fast_nodes) = run(true);
            let (naive, naive_nodes) = run(false);
            assert!(fast.max_abs_diff(&naive) <= 1e-12);
            // Only Share-KV can skip a projection across sources.
            assert_eq!(fast_nodes < naive_nodes, mode == AttentionShareMode::ShareKv, "{mode}");
        }
    }

    #[test]
    fn single_region_reduces_to_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mode in MODES {
            let w = AttentionWeights::new("a", 6, 2, mode, &mut rng);
            let x = uniform(&mut rng, vec![1, 6], 1.0);
            let mut g = Graph::new();
            let xi = g.input(x).unwrap();
            let layout = AttentionLayout::self_attention(&[1], 2, false);
            let out = w.multi_head_attention(&mut g, xi, xi, xi, &layout, None, true).unwrap();
            let v = w.value.apply(&mut g, xi).unwrap();
            let expected = w.output.apply(&mut g, v).unwrap();
            assert!(g.value(out).max_abs_diff(g.value(expected)) <= 1e-12);
        }
    }

    #[test]
    fn geometry_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gate = GeometricGate::new("g", 64, 4, &mut rng);
        for _ in 0..20 {
            let boxes = random_boxes(&mut rng, 5);
            let base = relative_geometry(&boxes).unwrap();
            let (dx, dy) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let shifted: Vec<_> = boxes
                .iter()
                .map(|b| BoxGeometry { cx: b.cx + dx, cy: b.cy + dy, ..*b })
                .collect();
            let s = rng.gen_range(0.1..10.0);
            let scaled: Vec<_> = boxes
                .iter()
                .map(|b| BoxGeometry { cx: b.cx * s, cy: b.cy * s, w: b.w * s, h: b.h * s })
                .collect();
            for other in [relative_geometry(&shifted).unwrap(), relative_geometry(&scaled).unwrap()] {
                for (a, b) in base.iter().zip(&other) {
                    for k in 0..4 {
                        assert!((a[k] - b[k]).abs() <= 1e-12 * (1.0 + a[k].abs()));
                    }
                }
            }
            let g0 = gate.evaluate(&boxes).unwrap();
            assert!(g0.data().iter().all(|&v| v >= 0.0));
            assert_eq!(g0.shape(), [4, 5, 5]);
        }
    }

    #[test]
    fn identical_boxes_depend_only_on_bias_path() {
        let b = BoxGeometry { cx: 0.3, cy: 0.6, w: 0.2, h: 0.1 };
        let rel = relative_geometry(&[b, b]).unwrap();
        assert!(rel.iter().all(|l| *l == [0.0; 4]));
        let emb = embed_geometry(&rel, 16);
        // sin(0) = 0 in the first half, cos(0) = 1 in the second.
        assert!(emb.row(0)[..8].iter().all(|&v| v == 0.0));
        assert!(emb.row(0)[8..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        let b = BoxGeometry { cx: 0.5, cy: 0.5, w: 0.0, h: 0.1 };
        assert_eq!(
            relative_geometry(&[b]),
            Err(GeometryError::NonPositiveExtent { index: 0, w: 0.0, h: 0.1 })
        );
        assert_eq!(relative_geometry(&[]), Err(GeometryError::Empty));
    }

    #[test]
    fn gated_attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = AttentionWeights::new("a", 8, 2, AttentionShareMode::ShareKv, &mut rng);
        let gate = GeometricGate::new("g", 16, 2, &mut rng);
        let boxes = random_boxes(&mut rng, 4);
        let mut g = Graph::new();
        let x = g.input(uniform(&mut rng, vec![4, 8], 1.0)).unwrap();
        let emb = g.input(embed_geometry(&relative_geometry(&boxes).unwrap(), 16)).unwrap();
        let bias = gate.logit_bias(&mut g, emb).unwrap();
        let layout = AttentionLayout::self_attention(&[4], 2, false);
        let p = w.project_self(&mut g, x, true).unwrap();
        let mixed = g.attention(p.query, p.key, p.value, Some(bias), &layout).unwrap();
        let probs = g.attention_probs(mixed).unwrap();
        for row in probs.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gating_multiplies_weights_then_renormalizes() {
        // With q = 0 every logit is zero, so probabilities are the gate
        // values normalized per row.
        let mut g = Graph::new();
        let q = g.input(Tensor::zeros(vec![2, 2])).unwrap();
        let v = g.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let gate = g.input(Tensor::from_rows(&[vec![1.0], vec![3.0], vec![0.0], vec![2.0]]).unwrap()).unwrap();
        let bias = g.log_floor(gate, GATE_FLOOR).unwrap();
        let layout = AttentionLayout::self_attention(&[2], 1, false);
        let out = g.attention(q, q, v, Some(bias), &layout).unwrap();
        let p = g.attention_probs(out).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        assert!(p[2] < 1e-8 && (p[3] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("share-kv".parse(), Ok(AttentionShareMode::ShareKv));
        assert_eq!("Share_QK".parse(), Ok(AttentionShareMode::ShareQk));
        assert_eq!("no_share".parse(), Ok(AttentionShareMode::NoShare));
        assert!("share_qv".parse::<AttentionShareMode>().is_err());
        assert_eq!(serde_json::to_string(&AttentionShareMode::ShareKv).unwrap(), "\"share_kv\"");
    }
}
