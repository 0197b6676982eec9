//! The encoder–decoder captioner.
//!
//! Region features are projected to the hidden width and run through the
//! encoder stack with no positional signal. The decoder embeds tokens, scales
//! them by `√r`, adds a fixed sinusoidal position table and runs masked
//! self-attention, cross-attention over the encoder output and an MLP. Every
//! sub-layer is post-norm: `x = norm(x + f(x))`.
//!
//! Each stack position points at a parameter group through a
//! [`ShareLayout`]; positions in the same group hold clones of the same
//! [`Parameter`] handles, so their gradients add up during backward.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    embed_geometry, relative_geometry, uniform, AttentionShareMode, AttentionWeights, BoxGeometry, GateError,
    GeometricGate, GeometryError, Linear, Projected,
};
use crate::autodiff::{
    load_checkpoint, save_checkpoint, AttentionLayout, AttentionSegment, Graph, NodeId, Parameter, Tensor,
    TensorError,
};
use crate::layout::ShareLayout;
use crate::vocab::radix_digits;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn default_geometric_dim() -> usize {
    64
}

/// Everything needed to build a model or count its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub mlp_size: usize,
    pub heads: usize,
    pub feature_dim: usize,
    pub encoder_layout: ShareLayout,
    pub decoder_layout: ShareLayout,
    pub attention_mode: AttentionShareMode,
    /// Overrides `attention_mode` for the encoder only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_attention: Option<AttentionShareMode>,
    /// Overrides `attention_mode` for the decoder only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_attention: Option<AttentionShareMode>,
    /// Radix base `v`, or 0 for a word-level vocabulary.
    pub radix_base: usize,
    /// Number of regular word indices, `<UNK>` included.
    pub vocab_size: usize,
    /// Longest token stream the decoder accepts, BOS and EOS included.
    pub max_len: usize,
    pub use_geometric: bool,
    #[serde(default = "default_geometric_dim")]
    pub geometric_dim: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("no regions to encode")]
    NoRegions,
    #[error("region features have {got} columns, expected {expected}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("{regions} regions but {boxes} boxes")]
    BoxCount { regions: usize, boxes: usize },
    #[error("token sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} out of range for {size} encoded tokens")]
    TokenOutOfRange { id: usize, size: usize },
}

impl From<GateError> for ModelError {
    fn from(e: GateError) -> Self {
        match e {
            GateError::Geometry(e) => ModelError::Geometry(e),
            GateError::Tensor(e) => ModelError::Tensor(e),
        }
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.hidden_size == 0 || self.mlp_size == 0 || self.feature_dim == 0 {
            return fail("hidden_size, mlp_size and feature_dim must be positive".into());
        }
        if self.heads == 0 || self.hidden_size % self.heads != 0 {
            return fail(format!(
                "hidden_size {} is not divisible by {} heads",
                self.hidden_size, self.heads
            ));
        }
        if self.radix_base == 1 {
            return fail("radix_base must be 0 (word level) or at least 2".into());
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be at least 1".into());
        }
        if self.radix_base >= 2 {
            radix_digits(self.vocab_size, self.radix_base).map_err(|e| ModelError::Config(e.to_string()))?;
        }
        if self.max_len < 2 {
            return fail("max_len must be at least 2".into());
        }
        if self.use_geometric && (self.geometric_dim == 0 || self.geometric_dim % 8 != 0) {
            return fail(format!(
                "geometric_dim {} must be a positive multiple of 8",
                self.geometric_dim
            ));
        }
        Ok(())
    }

    /// Rows of the input embedding and columns of the output projection:
    /// `v + 2` with a radix codec, `|V_o| + 2` at word level.
    pub fn encoded_vocab_size(&self) -> usize {
        if self.radix_base >= 2 {
            self.radix_base + 2
        } else {
            self.vocab_size + 2
        }
    }

    pub fn encoder_mode(&self) -> AttentionShareMode {
        self.encoder_attention.unwrap_or(self.attention_mode)
    }

    pub fn decoder_mode(&self) -> AttentionShareMode {
        self.decoder_attention.unwrap_or(self.attention_mode)
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

/// Which stack a position belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stack {
    Encoder,
    Decoder,
}

impl Stack {
    fn prefix(self) -> &'static str {
        match self {
            Stack::Encoder => "encoder",
            Stack::Decoder => "decoder",
        }
    }
}

/// Accounting bucket of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Embeddings,
    Attention,
    Mlp,
    Misc,
    FeatureProj,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: Parameter,
    pub shift: Parameter,
}

impl LayerNormParams {
    fn new(name: &str, width: usize) -> Self {
        LayerNormParams {
            gain: Parameter::new(format!("{name}.gain"), Tensor::filled(vec![width], 1.0)),
            shift: Parameter::new(format!("{name}.shift"), Tensor::zeros(vec![width])),
        }
    }

    fn apply(&self, g: &mut Graph, x: NodeId) -> std::result::Result<NodeId, TensorError> {
        let gain = g.param(&self.gain);
        let shift = g.param(&self.shift);
        g.layer_norm(x, gain, shift, LAYER_NORM_EPS)
    }

    fn parameters(&self) -> [Parameter; 2] {
        [self.gain.clone(), self.shift.clone()]
    }

    fn deep_clone(&self, name: &str) -> Self {
        LayerNormParams {
            gain: Parameter::new(format!("{name}.gain"), self.gain.value().clone()),
            shift: Parameter::new(format!("{name}.shift"), self.shift.value().clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    fn new(name: &str, width: usize, inner: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            hidden: Linear::new(&format!("{name}.fc1"), width, inner, rng),
            output: Linear::new(&format!("{name}.fc2"), inner, width, rng),
        }
    }

    fn apply(&self, g: &mut Graph, x: NodeId) -> std::result::Result<NodeId, TensorError> {
        let h = self.hidden.apply(g, x)?;
        let h = g.relu(h)?;
        self.output.apply(g, h)
    }

    fn parameters(&self) -> Vec<Parameter> {
        self.hidden.parameters().into_iter().chain(self.output.parameters()).collect()
    }

    fn deep_clone(&self, name: &str) -> Self {
        Mlp {
            hidden: self.hidden.deep_clone(&format!("{name}.fc1")),
            output: self.output.deep_clone(&format!("{name}.fc2")),
        }
    }
}

/// Parameters of one encoder group.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attention: AttentionWeights,
    pub gate: Option<GeometricGate>,
    pub norm1: LayerNormParams,
    pub mlp: Mlp,
    pub norm2: LayerNormParams,
}

impl EncoderBlock {
    fn new(prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let r = cfg.hidden_size;
        let attention = AttentionWeights::new(&format!("{prefix}.attn"), r, cfg.heads, cfg.encoder_mode(), rng);
        let gate = cfg
            .use_geometric
            .then(|| GeometricGate::new(&format!("{prefix}.attn"), cfg.geometric_dim, cfg.heads, rng));
        EncoderBlock {
            attention,
            gate,
            norm1: LayerNormParams::new(&format!("{prefix}.norm1"), r),
            mlp: Mlp::new(&format!("{prefix}.mlp"), r, cfg.mlp_size, rng),
            norm2: LayerNormParams::new(&format!("{prefix}.norm2"), r),
        }
    }

    fn tagged(&self) -> Vec<(Component, Parameter)> {
        let mut out: Vec<_> = self.attention.parameters().into_iter().map(|p| (Component::Attention, p)).collect();
        if let Some(gate) = &self.gate {
            out.extend(gate.parameters().into_iter().map(|p| (Component::Misc, p)));
        }
        out.extend(self.norm1.parameters().into_iter().map(|p| (Component::Misc, p)));
        out.extend(self.mlp.parameters().into_iter().map(|p| (Component::Mlp, p)));
        out.extend(self.norm2.parameters().into_iter().map(|p| (Component::Misc, p)));
        out
    }

    fn layer_tensors(&self) -> Vec<Parameter> {
        let mut out = self.attention.projection_tensors();
        if let Some(gate) = &self.gate {
            out.extend(gate.parameters());
        }
        out.extend(self.norm1.parameters());
        out.extend(self.mlp.parameters());
        out.extend(self.norm2.parameters());
        out
    }

    fn deep_clone(&self, prefix: &str) -> Self {
        EncoderBlock {
            attention: self.attention.deep_clone(&format!("{prefix}.attn")),
            gate: self.gate.as_ref().map(|gate| GeometricGate {
                proj: gate.proj.deep_clone(&format!("{prefix}.attn.gate")),
                dim: gate.dim,
            }),
            norm1: self.norm1.deep_clone(&format!("{prefix}.norm1")),
            mlp: self.mlp.deep_clone(&format!("{prefix}.mlp")),
            norm2: self.norm2.deep_clone(&format!("{prefix}.norm2")),
        }
    }
}

/// Parameters of one decoder group.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attention: AttentionWeights,
    pub norm1: LayerNormParams,
    pub cross_attention: AttentionWeights,
    pub norm2: LayerNormParams,
    pub mlp: Mlp,
    pub norm3: LayerNormParams,
}

impl DecoderBlock {
    fn new(prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (r, heads, mode) = (cfg.hidden_size, cfg.heads, cfg.decoder_mode());
        DecoderBlock {
            self_attention: AttentionWeights::new(&format!("{prefix}.self"), r, heads, mode, rng),
            norm1: LayerNormParams::new(&format!("{prefix}.norm1"), r),
            cross_attention: AttentionWeights::new(&format!("{prefix}.cross"), r, heads, mode, rng),
            norm2: LayerNormParams::new(&format!("{prefix}.norm2"), r),
            mlp: Mlp::new(&format!("{prefix}.mlp"), r, cfg.mlp_size, rng),
            norm3: LayerNormParams::new(&format!("{prefix}.norm3"), r),
        }
    }

    fn tagged(&self) -> Vec<(Component, Parameter)> {
        let attn = self
            .self_attention
            .parameters()
            .into_iter()
            .chain(self.cross_attention.parameters())
            .map(|p| (Component::Attention, p));
        let norms = [&self.norm1, &self.norm2, &self.norm3]
            .into_iter()
            .flat_map(|n| n.parameters())
            .map(|p| (Component::Misc, p));
        let mlp = self.mlp.parameters().into_iter().map(|p| (Component::Mlp, p));
        attn.chain(norms).chain(mlp).collect()
    }

    fn layer_tensors(&self) -> Vec<Parameter> {
        let mut out = self.self_attention.projection_tensors();
        out.extend(self.norm1.parameters());
        out.extend(self.cross_attention.projection_tensors());
        out.extend(self.norm2.parameters());
        out.extend(self.mlp.parameters());
        out.extend(self.norm3.parameters());
        out
    }

    fn deep_clone(&self, prefix: &str) -> Self {
        DecoderBlock {
            self_attention: self.self_attention.deep_clone(&format!("{prefix}.self")),
            norm1: self.norm1.deep_clone(&format!("{prefix}.norm1")),
            cross_attention: self.cross_attention.deep_clone(&format!("{prefix}.cross")),
            norm2: self.norm2.deep_clone(&format!("{prefix}.norm2")),
            mlp: self.mlp.deep_clone(&format!("{prefix}.mlp")),
            norm3: self.norm3.deep_clone(&format!("{prefix}.norm3")),
        }
    }
}

/// Region features and boxes of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Regions {
    /// `[n × feature_dim]`
    pub features: Tensor,
    /// One box per region; may be empty when the model has no geometric gate.
    pub boxes: Vec<BoxGeometry>,
}

impl Regions {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encoder output for a batch: all regions stacked, image-major.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub node: NodeId,
    pub lengths: Vec<usize>,
}

/// `pe[pos, 2i] = sin(pos / 10000^(2i/r))`, `pe[pos, 2i+1] = cos(…)`.
pub fn sinusoidal_table(rows: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; rows * width];
    for pos in 0..rows {
        for i in 0..width {
            let exponent = (2 * (i / 2)) as f64 / width as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(rows, width, data).expect("table shape")
}

pub struct CaptionerModel {
    config: ModelConfig,
    pub feature_proj: Linear,
    /// `[encoded_vocab × r]`
    pub input_embedding: Parameter,
    /// `r → encoded_vocab`; never tied to the input embedding.
    pub output_projection: Linear,
    positional: Tensor,
    encoder_groups: Vec<EncoderBlock>,
    decoder_groups: Vec<DecoderBlock>,
    encoder_assignment: Vec<usize>,
    decoder_assignment: Vec<usize>,
    reuse_projections: bool,
}

/// Builds a model with weights drawn deterministically from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<CaptionerModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = cfg.hidden_size;
    let rows = cfg.encoded_vocab_size();
    let feature_proj = Linear::new("feature_proj", cfg.feature_dim, r, &mut rng);
    let input_embedding = Parameter::new(
        "embedding.input",
        uniform(&mut rng, vec![rows, r], 1.0 / (r as f64).sqrt()),
    );
    let output_projection = Linear::new("embedding.output", r, rows, &mut rng);
    let encoder_groups = (0..cfg.encoder_layout.independent_count())
        .map(|gid| EncoderBlock::new(&format!("encoder.{gid}"), cfg, &mut rng))
        .collect();
    let decoder_groups = (0..cfg.decoder_layout.independent_count())
        .map(|gid| DecoderBlock::new(&format!("decoder.{gid}"), cfg, &mut rng))
        .collect();
    Ok(CaptionerModel {
        config: cfg.clone(),
        feature_proj,
        input_embedding,
        output_projection,
        positional: sinusoidal_table(cfg.max_len, r),
        encoder_groups,
        decoder_groups,
        encoder_assignment: cfg.encoder_layout.assignment().to_vec(),
        decoder_assignment: cfg.decoder_layout.assignment().to_vec(),
        reuse_projections: true,
    })
}

impl CaptionerModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder_groups(&self) -> &[EncoderBlock] {
        &self.encoder_groups
    }

    pub fn decoder_groups(&self) -> &[DecoderBlock] {
        &self.decoder_groups
    }

    /// Group used at each stack position.
    pub fn assignment(&self, stack: Stack) -> &[usize] {
        match stack {
            Stack::Encoder => &self.encoder_assignment,
            Stack::Decoder => &self.decoder_assignment,
        }
    }

    /// Whether tied projections are computed once and reused. Results are
    /// identical either way; turning it off exists for comparison.
    pub fn set_projection_reuse(&mut self, reuse: bool) {
        self.reuse_projections = reuse;
    }

    /// Every distinct parameter with its accounting bucket, in a fixed order.
    pub fn tagged_parameters(&self) -> Vec<(Component, Parameter)> {
        let mut out = vec![(Component::Embeddings, self.input_embedding.clone())];
        out.extend(self.output_projection.parameters().into_iter().map(|p| (Component::Embeddings, p)));
        out.extend(self.feature_proj.parameters().into_iter().map(|p| (Component::FeatureProj, p)));
        for block in &self.encoder_groups {
            out.extend(block.tagged());
        }
        for block in &self.decoder_groups {
            out.extend(block.tagged());
        }
        out
    }

    /// Every distinct parameter, each exactly once.
    pub fn parameters(&self) -> Vec<Parameter> {
        self.tagged_parameters().into_iter().map(|(_, p)| p).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(Parameter::numel).sum()
    }

    /// Parameter tensors seen by one stack position, in a fixed order that
    /// does not depend on the sharing mode (tied projections repeat).
    pub fn position_tensors(&self, stack: Stack, position: usize) -> Vec<Parameter> {
        match stack {
            Stack::Encoder => self.encoder_groups[self.encoder_assignment[position]].layer_tensors(),
            Stack::Decoder => self.decoder_groups[self.decoder_assignment[position]].layer_tensors(),
        }
    }

    /// Gives `position` a private copy of its group's parameters. The copy
    /// starts equal but no longer shares identity.
    pub fn untie_position(&mut self, stack: Stack, position: usize) -> Result<()> {
        let assignment = match stack {
            Stack::Encoder => &self.encoder_assignment,
            Stack::Decoder => &self.decoder_assignment,
        };
        let Some(&group) = assignment.get(position) else {
            return Err(ModelError::Config(format!("no {} position {position}", stack.prefix())));
        };
        if assignment.iter().filter(|&&g| g == group).count() < 2 {
            return Err(ModelError::Config(format!(
                "{} position {position} does not share its group",
                stack.prefix()
            )));
        }
        match stack {
            Stack::Encoder => {
                let id = self.encoder_groups.len();
                let copy = self.encoder_groups[group].deep_clone(&format!("encoder.{id}"));
                self.encoder_groups.push(copy);
                self.encoder_assignment[position] = id;
            }
            Stack::Decoder => {
                let id = self.decoder_groups.len();
                let copy = self.decoder_groups[group].deep_clone(&format!("decoder.{id}"));
                self.decoder_groups.push(copy);
                self.decoder_assignment[position] = id;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_checkpoint(path, &self.parameters())?)
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        Ok(load_checkpoint(path, &self.parameters())?)
    }

    /// Runs the encoder over a batch of images.
    pub fn encode(&self, g: &mut Graph, images: &[&Regions]) -> Result<Encoded> {
        let cfg = &self.config;
        if images.is_empty() || images.iter().any(|im| im.is_empty()) {
            return Err(ModelError::NoRegions);
        }
        let mut rows = Vec::new();
        let mut lengths = Vec::with_capacity(images.len());
        let mut relative = Vec::new();
        for im in images {
            if im.features.cols() != cfg.feature_dim {
                return Err(ModelError::FeatureWidth {
                    expected: cfg.feature_dim,
                    got: im.features.cols(),
                });
            }
            if cfg.use_geometric {
                if im.boxes.len() != im.len() {
                    return Err(ModelError::BoxCount {
                        regions: im.len(),
                        boxes: im.boxes.len(),
                    });
                }
                relative.extend(relative_geometry(&im.boxes)?);
            }
            rows.extend_from_slice(im.features.data());
            lengths.push(im.len());
        }
        let total: usize = lengths.iter().sum();
        let features = g.input(Tensor::matrix(total, cfg.feature_dim, rows)?)?;
        let mut x = self.feature_proj.apply(g, features)?;

        let layout = AttentionLayout::self_attention(&lengths, cfg.heads, false);
        let geometry = if cfg.use_geometric {
            Some(g.input(embed_geometry(&relative, cfg.geometric_dim))?)
        } else {
            None
        };
        // Shared positions read the same gate weights and geometry, so the
        // bias is computed once per group.
        let mut biases: Vec<Option<NodeId>> = vec![None; self.encoder_groups.len()];
        for &group in &self.encoder_assignment {
            let block = &self.encoder_groups[group];
            let bias = match (&block.gate, geometry) {
                (Some(gate), Some(emb)) => match biases[group] {
                    Some(b) => Some(b),
                    None => {
                        let b = gate.logit_bias(g, emb)?;
                        biases[group] = Some(b);
                        Some(b)
                    }
                },
                _ => None,
            };
            let projected = block.attention.project_self(g, x, self.reuse_projections)?;
            let attended = block.attention.attend(g, projected, &layout, bias)?;
            let sum = g.add(x, attended)?;
            x = block.norm1.apply(g, sum)?;
            let ff = block.mlp.apply(g, x)?;
            let sum = g.add(x, ff)?;
            x = block.norm2.apply(g, sum)?;
        }
        Ok(Encoded { node: x, lengths })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let size = self.config.encoded_vocab_size();
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.config.max_len {
            return Err(ModelError::TooLong {
                len: tokens.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id >= size) {
            return Err(ModelError::TokenOutOfRange { id, size });
        }
        Ok(())
    }

    /// `embed(ids)·√r + positional rows`.
    fn embed_tokens(&self, g: &mut Graph, ids: &[usize], positions: &[usize]) -> Result<NodeId> {
        let table = g.param(&self.input_embedding);
        let emb = g.embedding(table, ids)?;
        let emb = g.scale(emb, (self.config.hidden_size as f64).sqrt())?;
        let pos = g.input(self.positional.gather_rows(positions))?;
        Ok(g.add(emb, pos)?)
    }

    /// Memory keys and values for each decoder group.
    fn memory_projections(&self, g: &mut Graph, memory: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        self.decoder_groups
            .iter()
            .map(|block| {
                Ok(block
                    .cross_attention
                    .project_memory(g, memory, self.reuse_projections)?)
            })
            .collect()
    }

    /// Shared tail of a decoder position after self-attention: residual and
    /// norm, cross-attention, MLP.
    fn decoder_tail(
        &self,
        g: &mut Graph,
        block: &DecoderBlock,
        x: NodeId,
        attended: NodeId,
        memory_kv: (NodeId, NodeId),
        cross_layout: &AttentionLayout,
    ) -> Result<NodeId> {
        let sum = g.add(x, attended)?;
        let x = block.norm1.apply(g, sum)?;
        let query = block.cross_attention.query.apply(g, x)?;
        let projected = Projected {
            query,
            key: memory_kv.0,
            value: memory_kv.1,
        };
        let crossed = block.cross_attention.attend(g, projected, cross_layout, None)?;
        let sum = g.add(x, crossed)?;
        let x = block.norm2.apply(g, sum)?;
        let ff = block.mlp.apply(g, x)?;
        let sum = g.add(x, ff)?;
        Ok(block.norm3.apply(g, sum)?)
    }

    /// Logits `[Σ len × encoded_vocab]` for a batch of token prefixes, one
    /// per encoded image, under a causal mask.
    pub fn decode_teacher_forced(&self, g: &mut Graph, memory: &Encoded, inputs: &[&[usize]]) -> Result<NodeId> {
        assert_eq!(inputs.len(), memory.lengths.len(), "one token sequence per image");
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut lengths = Vec::with_capacity(inputs.len());
        for seq in inputs {
            self.check_tokens(seq)?;
            ids.extend_from_slice(seq);
            positions.extend(0..seq.len());
            lengths.push(seq.len());
        }
        let heads = self.config.heads;
        let self_layout = AttentionLayout::self_attention(&lengths, heads, true);
        let cross_layout = AttentionLayout::cross_attention(&lengths, &memory.lengths, heads);
        let memory_kv = self.memory_projections(g, memory.node)?;

        let mut x = self.embed_tokens(g, &ids, &positions)?;
        for &group in &self.decoder_assignment {
            let block = &self.decoder_groups[group];
            let projected = block.self_attention.project_self(g, x, self.reuse_projections)?;
            let attended = block.self_attention.attend(g, projected, &self_layout, None)?;
            x = self.decoder_tail(g, block, x, attended, memory_kv[group], &cross_layout)?;
        }
        Ok(self.output_projection.apply(g, x)?)
    }

    /// Mean teacher-forced cross-entropy over a batch of `(image, stream)`
    /// pairs; each stream starts with BOS and ends with EOS.
    pub fn loss(&self, g: &mut Graph, batch: &[(&Regions, &[usize])]) -> Result<NodeId> {
        let images: Vec<&Regions> = batch.iter().map(|(r, _)| *r).collect();
        let memory = self.encode(g, &images)?;
        let mut inputs = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for (_, stream) in batch {
            if stream.len() < 2 {
                return Err(ModelError::EmptySequence);
            }
            inputs.push(&stream[..stream.len() - 1]);
            targets.extend_from_slice(&stream[1..]);
        }
        let logits = self.decode_teacher_forced(g, &memory, &inputs)?;
        Ok(g.cross_entropy(logits, &targets, usize::MAX)?)
    }

    /// Encodes `images` and prepares one decoding item per image.
    pub fn start_decoding(&self, images: &[&Regions]) -> Result<DecoderCache> {
        let mut g = Graph::new();
        let memory = self.encode(&mut g, images)?;
        let kv = self.memory_projections(&mut g, memory.node)?;
        let memory_kv = kv
            .into_iter()
            .map(|(k, v)| (g.value(k).clone(), g.value(v).clone()))
            .collect();
        let mut memory_starts = Vec::with_capacity(images.len());
        let mut start = 0;
        for &len in &memory.lengths {
            memory_starts.push(start);
            start += len;
        }
        let positions = self.decoder_assignment.len();
        let items = (0..images.len())
            .map(|image| CacheItem {
                image,
                len: 0,
                keys: vec![Vec::new(); positions],
                values: vec![Vec::new(); positions],
            })
            .collect();
        Ok(DecoderCache {
            memory_kv,
            memory_starts,
            memory_lengths: memory.lengths,
            items,
        })
    }

    /// Feeds one token per live item and returns next-token log-probabilities
    /// `[items × encoded_vocab]`.
    pub fn decode_step(&self, cache: &mut DecoderCache, tokens: &[usize]) -> Result<Tensor> {
        let (r, heads) = (self.config.hidden_size, self.config.heads);
        assert_eq!(tokens.len(), cache.items.len(), "one token per decoding item");
        let size = self.config.encoded_vocab_size();
        if let Some(&id) = tokens.iter().find(|&&id| id >= size) {
            return Err(ModelError::TokenOutOfRange { id, size });
        }
        if let Some(item) = cache.items.iter().find(|it| it.len >= self.config.max_len) {
            return Err(ModelError::TooLong {
                len: item.len + 1,
                max_len: self.config.max_len,
            });
        }
        let n = cache.items.len();
        let mut g = Graph::new();
        let positions: Vec<usize> = cache.items.iter().map(|it| it.len).collect();
        let mut x = self.embed_tokens(&mut g, tokens, &positions)?;

        // Keys of item b sit at rows [start_b, start_b + len_b] of the
        // gathered tensor: its cached rows followed by the new one.
        let cached_total: usize = positions.iter().sum();
        let mut gather = Vec::with_capacity(cached_total + n);
        let mut segments = Vec::with_capacity(n);
        let mut offset = 0;
        for (b, &len) in positions.iter().enumerate() {
            segments.push(AttentionSegment {
                query_start: b,
                query_len: 1,
                key_start: gather.len(),
                key_len: len + 1,
                query_offset: len,
            });
            gather.extend(offset..offset + len);
            gather.push(cached_total + b);
            offset += len;
        }
        let self_layout = AttentionLayout {
            heads,
            causal: true,
            segments,
        };
        let cross_layout = AttentionLayout {
            heads,
            causal: false,
            segments: cache
                .items
                .iter()
                .enumerate()
                .map(|(b, it)| AttentionSegment {
                    query_start: b,
                    query_len: 1,
                    key_start: cache.memory_starts[it.image],
                    key_len: cache.memory_lengths[it.image],
                    query_offset: 0,
                })
                .collect(),
        };
        let mut memory_kv = Vec::with_capacity(cache.memory_kv.len());
        for (k, v) in &cache.memory_kv {
            memory_kv.push((g.input(k.clone())?, g.input(v.clone())?));
        }

        let stacked = |rows: Vec<&[f64]>| -> std::result::Result<Tensor, TensorError> {
            let total = rows.iter().map(|r| r.len()).sum::<usize>() / r.max(1);
            Tensor::matrix(total, r, rows.concat())
        };
        let mut new_rows = Vec::with_capacity(self.decoder_assignment.len());
        for (pos, &group) in self.decoder_assignment.iter().enumerate() {
            let block = &self.decoder_groups[group];
            let projected = block.self_attention.project_self(&mut g, x, self.reuse_projections)?;
            let past_keys = g.input(stacked(cache.items.iter().map(|it| it.keys[pos].as_slice()).collect())?)?;
            let all_keys = g.concat_rows(&[past_keys, projected.key])?;
            let key = g.gather_rows(all_keys, &gather)?;
            let value = if projected.value == projected.key {
                key
            } else {
                let past = g.input(stacked(cache.items.iter().map(|it| it.values[pos].as_slice()).collect())?)?;
                let all = g.concat_rows(&[past, projected.value])?;
                g.gather_rows(all, &gather)?
            };
            let full = Projected {
                query: projected.query,
                key,
                value,
            };
            let attended = block.self_attention.attend(&mut g, full, &self_layout, None)?;
            new_rows.push((projected.key, projected.value));
            x = self.decoder_tail(&mut g, block, x, attended, memory_kv[group], &cross_layout)?;
        }
        let logits = self.output_projection.apply(&mut g, x)?;

        for (pos, (k, v)) in new_rows.into_iter().enumerate() {
            let (kv, vv) = (g.value(k), g.value(v));
            for (b, item) in cache.items.iter_mut().enumerate() {
                item.keys[pos].extend_from_slice(kv.row(b));
                item.values[pos].extend_from_slice(vv.row(b));
            }
        }
        for item in &mut cache.items {
            item.len += 1;
        }
        Ok(log_softmax_rows(g.value(logits)))
    }
}

/// Row-wise `log softmax`.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        for x in row.iter_mut() {
            *x -= lse;
        }
    }
    out
}

#[derive(Clone, Debug)]
struct CacheItem {
    image: usize,
    len: usize,
    /// Per decoder position, `len × r` projected self-attention keys.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Incremental decoding state: encoder memory projections plus cached
/// self-attention keys and values for every live item.
#[derive(Clone, Debug)]
pub struct DecoderCache {
    memory_kv: Vec<(Tensor, Tensor)>,
    memory_starts: Vec<usize>,
    memory_lengths: Vec<usize>,
    items: Vec<CacheItem>,
}

impl DecoderCache {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_images(&self) -> usize {
        self.memory_lengths.len()
    }

    /// Image each item decodes.
    pub fn image_of(&self, item: usize) -> usize {
        self.items[item].image
    }

    /// Tokens fed so far to `item`.
    pub fn steps(&self, item: usize) -> usize {
        self.items[item].len
    }

    /// Keeps the listed items, in order; an index may repeat to fork an item.
    pub fn select(&mut self, items: &[usize]) {
        self.items = items.iter().map(|&i| self.items[i].clone()).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::parse_layout;

    pub(crate) fn tiny_config(encoder: &str, decoder: &str, mode: AttentionShareMode) -> ModelConfig {
        ModelConfig {
            hidden_size: 8,
            mlp_size: 12,
            heads: 2,
            feature_dim: 6,
            encoder_layout: parse_layout(encoder).unwrap(),
            decoder_layout: parse_layout(decoder).unwrap(),
            attention_mode: mode,
            encoder_attention: None,
            decoder_attention: None,
            radix_base: 4,
            vocab_size: 10,
            max_len: 12,
            use_geometric: true,
            geometric_dim: 16,
        }
    }

    fn random_regions(rng: &mut ChaCha8Rng, n: usize, feature_dim: usize) -> Regions {
        let features = uniform(rng, vec![n, feature_dim], 1.0);
        let boxes = (0..n)
            .map(|_| BoxGeometry {
                cx: rng.gen_range(0.1..0.9),
                cy: rng.gen_range(0.1..0.9),
                w: rng.gen_range(0.05..0.4),
                h: rng.gen_range(0.05..0.4),
            })
            .collect();
        Regions { features, boxes }
    }

    fn encode_values(model: &CaptionerModel, regions: &Regions) -> Tensor {
        let mut g = Graph::new();
        let enc = model.encode(&mut g, &[regions]).unwrap();
        g.value(enc.node).clone()
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config("(0x2)", "(0x2)", AttentionShareMode::ShareKv);
        assert!(cfg.validate().is_ok());
        cfg.heads = 3;
        assert!(matches!(cfg.validate(), Err(ModelError::Config(_))));
        cfg.heads = 2;
        cfg.radix_base = 1;
        assert!(cfg.validate().is_err());
        cfg.radix_base = 0;
        assert_eq!(cfg.encoded_vocab_size(), 12);
        cfg.radix_base = 4;
        assert_eq!(cfg.encoded_vocab_size(), 6);

        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"encoder_layout\":\"(0x2)\""));
        assert_eq!(ModelConfig::from_json(&json).unwrap(), cfg);
        let unknown = json.replacen('{', "{\"bogus\":1,", 1);
        assert!(ModelConfig::from_json(&unknown).is_err());
    }

    #[test]
    fn shared_groups_are_single_identities() {
        let cfg = tiny_config("(0x6)", "(0x3,1x3)", AttentionShareMode::ShareKv);
        let model = build_model(&cfg, 1).unwrap();
        assert_eq!(model.encoder_groups().len(), 1);
        assert_eq!(model.decoder_groups().len(), 2);
        let first = model.position_tensors(Stack::Encoder, 0);
        for p in 1..6 {
            let other = model.position_tensors(Stack::Encoder, p);
            assert!(first.iter().zip(&other).all(|(a, b)| a.same_as(b)));
        }
        let d0 = model.position_tensors(Stack::Decoder, 0);
        let d3 = model.position_tensors(Stack::Decoder, 3);
        assert!(d0.iter().zip(&d3).all(|(a, b)| !a.same_as(b)));

        let names: Vec<String> = model.parameters().iter().map(|p| p.name().to_string()).collect();
        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), names.len(), "parameter names are unique");
        assert!(names.iter().all(|n| !n.starts_with("encoder.1")));
        assert!(names.iter().any(|n| n == "decoder.1.self.kv.weight"));
        assert!(!model.input_embedding.same_as(&model.output_projection.weight));
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = tiny_config("(0,1)", "(0x2)", AttentionShareMode::NoShare);
        let (a, b, c) = (build_model(&cfg, 7).unwrap(), build_model(&cfg, 7).unwrap(), build_model(&cfg, 8).unwrap());
        let dump = |m: &CaptionerModel| {
            let mut buf = Vec::new();
            crate::autodiff::write_checkpoint(&mut buf, &m.parameters()).unwrap();
            buf
        };
        assert_eq!(dump(&a), dump(&b));
        assert_ne!(dump(&a), dump(&c));
    }

    #[test]
    fn checkpoint_holds_one_record_per_group() {
        let cfg = tiny_config("(0x3,1x3)", "(0x6)", AttentionShareMode::ShareKv);
        let model = build_model(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let records = crate::autodiff::read_checkpoint(std::fs::File::open(&path).unwrap()).unwrap();
        let groups = |prefix: &str| {
            let mut ids: Vec<&str> = records
                .iter()
                .filter_map(|(n, _)| n.strip_prefix(prefix))
                .map(|rest| rest.split('.').next().unwrap())
                .collect();
            ids.sort();
            ids.dedup();
            ids.len()
        };
        assert_eq!(groups("encoder."), 2);
        assert_eq!(groups("decoder."), 1);

        let other = build_model(&cfg, 4).unwrap();
        other.load(&path).unwrap();
        for (p, q) in model.parameters().iter().zip(other.parameters()) {
            assert_eq!(*p.value(), *q.value());
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let cfg = tiny_config("(0,1)", "(0)", AttentionShareMode::ShareKv);
        let model = build_model(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let regions = random_regions(&mut rng, 5, cfg.feature_dim);
        let perm = [3, 0, 4, 1, 2];
        let permuted = Regions {
            features: regions.features.gather_rows(&perm),
            boxes: perm.iter().map(|&i| regions.boxes[i]).collect(),
        };
        let out = encode_values(&model, &regions);
        let out_perm = encode_values(&model, &permuted);
        assert!(out.gather_rows(&perm).max_abs_diff(&out_perm) <= 1e-12);
    }

    #[test]
    fn single_region_and_missing_regions() {
        let cfg = tiny_config("(0)", "(0)", AttentionShareMode::ShareQk);
        let model = build_model(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let one = random_regions(&mut rng, 1, cfg.feature_dim);
        assert!(encode_values(&model, &one).is_finite());
        let none = Regions {
            features: Tensor::zeros(vec![0, cfg.feature_dim]),
            boxes: vec![],
        };
        assert_eq!(model.encode(&mut Graph::new(), &[&none]).unwrap_err(), ModelError::NoRegions);
        let bad_box = Regions {
            boxes: vec![BoxGeometry {
                cx: 0.5,
                cy: 0.5,
                w: 0.0,
                h: 0.1,
            }],
            ..one
        };
        assert!(matches!(
            model.encode(&mut Graph::new(), &[&bad_box]),
            Err(ModelError::Geometry(_))
        ));
    }

    fn teacher_forced(model: &CaptionerModel, regions: &Regions, tokens: &[usize]) -> Tensor {
        let mut g = Graph::new();
        let enc = model.encode(&mut g, &[regions]).unwrap();
        let logits = model.decode_teacher_forced(&mut g, &enc, &[tokens]).unwrap();
        g.value(logits).clone()
    }

    #[test]
    fn decoder_is_causal() {
        let cfg = tiny_config("(0)", "(0,1)", AttentionShareMode::ShareKv);
        let model = build_model(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let regions = random_regions(&mut rng, 3, cfg.feature_dim);
        let tokens = [4, 1, 2, 3, 0, 1, 2];
        let base = teacher_forced(&model, &regions, &tokens);
        assert_eq!(base.shape(), [tokens.len(), 6]);
        for t in 1..tokens.len() {
            let mut changed = tokens;
            changed[t] = (changed[t] + 1) % 4;
            let out = teacher_forced(&model, &regions, &changed);
            for row in 0..tokens.len() {
                let same = base.row(row) == out.row(row);
                assert_eq!(same, row < t, "position {row} after perturbing {t}");
            }
        }
        let bos_only = teacher_forced(&model, &regions, &[4]);
        assert_eq!(bos_only.shape(), [1, 6]);
        assert_eq!(
            model.decode_teacher_forced(
                &mut Graph::new(),
                &model.encode(&mut Graph::new(), &[&regions]).unwrap(),
                &[&[7]]
            ),
            Err(ModelError::TokenOutOfRange { id: 7, size: 6 })
        );
    }

    #[test]
    fn batching_matches_single_items() {
        let cfg = tiny_config("(0x2)", "(0,1)", AttentionShareMode::NoShare);
        let model = build_model(&cfg, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_regions(&mut rng, 2, cfg.feature_dim);
        let b = random_regions(&mut rng, 4, cfg.feature_dim);
        let (ta, tb) = ([4usize, 0, 1], [4usize, 3, 3, 2, 1]);
        let mut g = Graph::new();
        let enc = model.encode(&mut g, &[&a, &b]).unwrap();
        let logits = model.decode_teacher_forced(&mut g, &enc, &[&ta, &tb]).unwrap();
        let both = g.value(logits).clone();
        let single_a = teacher_forced(&model, &a, &ta);
        let single_b = teacher_forced(&model, &b, &tb);
        let rows_a: Vec<usize> = (0..3).collect();
        let rows_b: Vec<usize> = (3..8).collect();
        assert!(both.gather_rows(&rows_a).max_abs_diff(&single_a) <= 1e-12);
        assert!(both.gather_rows(&rows_b).max_abs_diff(&single_b) <= 1e-12);
    }

    #[test]
    fn incremental_decoding_matches_teacher_forcing() {
        for mode in [AttentionShareMode::NoShare, AttentionShareMode::ShareQk, AttentionShareMode::ShareKv] {
            let cfg = tiny_config("(0,1)", "(0x2,1)", mode);
            let model = build_model(&cfg, 12).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let a = random_regions(&mut rng, 3, cfg.feature_dim);
            let b = random_regions(&mut rng, 2, cfg.feature_dim);
            let streams = [[4usize, 1, 0, 3, 2], [4usize, 2, 2, 0, 1]];
            let mut cache = model.start_decoding(&[&a, &b]).unwrap();
            let mut steps = Vec::new();
            for t in 0..5 {
                steps.push(model.decode_step(&mut cache, &[streams[0][t], streams[1][t]]).unwrap());
            }
            for (item, regions) in [(0, &a), (1, &b)] {
                let full = log_softmax_rows(&teacher_forced(&model, regions, &streams[item]));
                for (t, step) in steps.iter().enumerate() {
                    let diff = full.row(t).iter().zip(step.row(item)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                    assert!(diff <= 1e-9, "{mode} item {item} step {t}: {diff}");
                }
            }
        }
    }

    #[test]
    fn cache_select_forks_items() {
        let cfg = tiny_config("(0)", "(0x2)", AttentionShareMode::ShareKv);
        let model = build_model(&cfg, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_regions(&mut rng, 3, cfg.feature_dim);
        let mut cache = model.start_decoding(&[&a]).unwrap();
        model.decode_step(&mut cache, &[4]).unwrap();
        cache.select(&[0, 0]);
        let forked = model.decode_step(&mut cache, &[1, 2]).unwrap();
        let direct = log_softmax_rows(&teacher_forced(&model, &a, &[4, 2]));
        let diff = forked.row(1).iter().zip(direct.row(1)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-9);
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.image_of(1), 0);
        assert_eq!(cache.steps(1), 2);
    }

    #[test]
    fn projection_reuse_does_not_change_outputs() {
        for mode in [AttentionShareMode::ShareQk, AttentionShareMode::ShareKv] {
            let cfg = tiny_config("(0,1)", "(0,1)", mode);
            let mut model = build_model(&cfg, 14).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let a = random_regions(&mut rng, 4, cfg.feature_dim);
            let fast = teacher_forced(&model, &a, &[4, 0, 1, 2]);
            model.set_projection_reuse(false);
            let naive = teacher_forced(&model, &a, &[4, 0, 1, 2]);
            assert!(fast.max_abs_diff(&naive) <= 1e-12);
        }
    }

    fn batch_loss(model: &CaptionerModel, batch: &[(Regions, Vec<usize>)]) -> f64 {
        let mut g = Graph::new();
        let pairs: Vec<(&Regions, &[usize])> = batch.iter().map(|(r, t)| (r, t.as_slice())).collect();
        let loss = model.loss(&mut g, &pairs).unwrap();
        g.value(loss).data()[0]
    }

    fn gradients(model: &CaptionerModel, batch: &[(Regions, Vec<usize>)]) -> Vec<Tensor> {
        let params = model.parameters();
        params.iter().for_each(Parameter::zero_grad);
        let mut g = Graph::new();
        let pairs: Vec<(&Regions, &[usize])> = batch.iter().map(|(r, t)| (r, t.as_slice())).collect();
        let loss = model.loss(&mut g, &pairs).unwrap();
        g.backward(loss).unwrap();
        params.iter().map(|p| p.take_grad().unwrap()).collect()
    }

    fn toy_batch(cfg: &ModelConfig, seed: u64) -> Vec<(Regions, Vec<usize>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![
            (random_regions(&mut rng, 3, cfg.feature_dim), vec![4, 0, 2, 1, 3, 5]),
            (random_regions(&mut rng, 2, cfg.feature_dim), vec![4, 3, 3, 5]),
        ]
    }

    #[test]
    fn shared_stack_matches_finite_differences() {
        let cfg = tiny_config("(0x2)", "(0x2)", AttentionShareMode::ShareKv);
        let model = build_model(&cfg, 21).unwrap();
        let batch = toy_batch(&cfg, 22);
        let grads = gradients(&model, &batch);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (p, grad) in model.parameters().iter().zip(&grads) {
            for _ in 0..3 {
                let i = rng.gen_range(0..p.numel());
                let orig = p.value().data()[i];
                p.update(|d| d[i] = orig + h);
                let up = batch_loss(&model, &batch);
                p.update(|d| d[i] = orig - h);
                let down = batch_loss(&model, &batch);
                p.update(|d| d[i] = orig);
                let numeric = (up - down) / (2.0 * h);
                let analytic = grad.data()[i];
                let scale = numeric.abs().max(analytic.abs());
                if scale > 1e-6 {
                    worst = worst.max((numeric - analytic).abs() / scale);
                } else {
                    assert!((numeric - analytic).abs() < 1e-9, "{}", p.name());
                }
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn shared_gradient_is_sum_of_untied_twin() {
        let cfg = tiny_config("(0x2)", "(0x2)", AttentionShareMode::ShareQk);
        let shared = build_model(&cfg, 31).unwrap();
        let mut twin = build_model(&cfg, 31).unwrap();
        twin.untie_position(Stack::Encoder, 1).unwrap();
        twin.untie_position(Stack::Decoder, 1).unwrap();
        let batch = toy_batch(&cfg, 32);
        assert_eq!(batch_loss(&shared, &batch), batch_loss(&twin, &batch));

        let shared_grads = gradients(&shared, &batch);
        let twin_grads = gradients(&twin, &batch);
        let by_name = |model: &CaptionerModel, grads: &[Tensor], name: &str| {
            let idx = model.parameters().iter().position(|p| p.name() == name);
            idx.map(|i| grads[i].clone())
        };
        let mut compared = 0;
        for (p, grad) in shared.parameters().iter().zip(&shared_grads) {
            let name = p.name();
            let expected = match name.split_once(".0.") {
                Some((stack, rest)) => {
                    let mut sum = by_name(&twin, &twin_grads, name).unwrap();
                    sum.add_assign(&by_name(&twin, &twin_grads, &format!("{stack}.1.{rest}")).unwrap());
                    sum
                }
                None => by_name(&twin, &twin_grads, name).unwrap(),
            };
            assert!(grad.max_abs_diff(&expected) <= 1e-12, "{name}");
            compared += 1;
        }
        assert_eq!(compared, shared.parameters().len());
    }

    #[test]
    fn untie_copies_one_group() {
        let cfg = tiny_config("(0x3)", "(0,1)", AttentionShareMode::ShareKv);
        let mut model = build_model(&cfg, 15).unwrap();
        let before = model.num_parameters();
        let block: usize = model.encoder_groups()[0].tagged().iter().map(|(_, p)| p.numel()).sum();
        model.untie_position(Stack::Encoder, 1).unwrap();
        assert_eq!(model.num_parameters(), before + block);
        assert_eq!(model.assignment(Stack::Encoder), [0, 1, 0]);
        assert!(model.untie_position(Stack::Decoder, 0).is_err());
    }
}
