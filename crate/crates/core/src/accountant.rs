//! Closed-form parameter counts, checked against built models.

use std::fmt;

use crate::attention::AttentionShareMode;
use crate::layout::{parse_layout, ShareLayout};
use crate::model::{CaptionerModel, Component, ModelConfig};

/// Word-level vocabulary size used for full-scale counts: the value for
/// which `2·V·512` matches the 10.3M word-embedding figure.
pub const REFERENCE_WORD_VOCAB: usize = 10_058;

/// Region feature width of the detector features at full scale.
pub const REFERENCE_FEATURE_DIM: usize = 2048;

/// Parameter counts per accounting bucket. The fixed positional table holds
/// no parameters and is not listed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamReport {
    /// Input embedding plus output projection, output bias included.
    pub embeddings: usize,
    /// All Q/K/V/O projections of both stacks, shared ones counted once.
    pub attention: usize,
    pub mlp: usize,
    /// Layer norms and geometric gates.
    pub misc: usize,
    pub feature_proj: usize,
}

impl ParamReport {
    pub fn total(&self) -> usize {
        self.embeddings + self.attention + self.mlp + self.misc + self.feature_proj
    }

    fn add(&mut self, component: Component, count: usize) {
        match component {
            Component::Embeddings => self.embeddings += count,
            Component::Attention => self.attention += count,
            Component::Mlp => self.mlp += count,
            Component::Misc => self.misc += count,
            Component::FeatureProj => self.feature_proj += count,
        }
    }

    fn components(&self) -> [(&'static str, usize); 5] {
        [
            ("embeddings", self.embeddings),
            ("attention", self.attention),
            ("mlp", self.mlp),
            ("misc", self.misc),
            ("feature_proj", self.feature_proj),
        ]
    }
}

fn attention_block(width: usize, mode: AttentionShareMode) -> usize {
    mode.distinct_projections() * (width * width + width)
}

/// Parameter counts implied by `cfg`, without building anything.
pub fn count_from_config(cfg: &ModelConfig) -> ParamReport {
    let r = cfg.hidden_size;
    let rows = cfg.encoded_vocab_size();
    let norm = 2 * r;
    let mlp = 2 * r * cfg.mlp_size + cfg.mlp_size + r;
    let gate = if cfg.use_geometric {
        cfg.geometric_dim * cfg.heads + cfg.heads
    } else {
        0
    };
    let enc = cfg.encoder_layout.independent_count();
    let dec = cfg.decoder_layout.independent_count();
    ParamReport {
        embeddings: 2 * rows * r + rows,
        attention: enc * attention_block(r, cfg.encoder_mode()) + dec * 2 * attention_block(r, cfg.decoder_mode()),
        mlp: (enc + dec) * mlp,
        misc: enc * (2 * norm + gate) + dec * 3 * norm,
        feature_proj: cfg.feature_dim * r + r,
    }
}

/// Counts obtained by enumerating the distinct parameters of a built model.
pub fn count_from_model(model: &CaptionerModel) -> ParamReport {
    let mut report = ParamReport::default();
    for (component, param) in model.tagged_parameters() {
        report.add(component, param.numel());
    }
    report
}

/// Enumerated and analytic counts disagree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mismatch {
    pub enumerated: ParamReport,
    pub expected: ParamReport,
}

impl Mismatch {
    /// `(component, enumerated − expected)` for every component that differs.
    pub fn diff(&self) -> Vec<(&'static str, i64)> {
        self.enumerated
            .components()
            .iter()
            .zip(self.expected.components())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| (a.0, a.1 as i64 - b.1 as i64))
            .collect()
    }
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "enumerated {} parameters, expected {}",
            self.enumerated.total(),
            self.expected.total()
        )?;
        for (name, delta) in self.diff() {
            write!(f, "; {name} {delta:+}")?;
        }
        Ok(())
    }
}

impl std::error::Error for Mismatch {}

/// Exact integer comparison of a built model against `report`.
pub fn reconcile(model: &CaptionerModel, report: &ParamReport) -> Result<(), Mismatch> {
    let enumerated = count_from_model(model);
    if enumerated == *report {
        Ok(())
    } else {
        Err(Mismatch {
            enumerated,
            expected: *report,
        })
    }
}

pub const CSV_HEADER: &str = "name,embeddings,attention,mlp,misc,feature_proj,total,total_millions";

/// One CSV row per named config, header first, LF line endings.
pub fn emit_tables(configs: &[(String, ModelConfig)]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (name, cfg) in configs {
        let r = count_from_config(cfg);
        out.push_str(&format!(
            "{name},{},{},{},{},{},{},{:.1}\n",
            r.embeddings,
            r.attention,
            r.mlp,
            r.misc,
            r.feature_proj,
            r.total(),
            r.total() as f64 / 1e6
        ));
    }
    out
}

fn layout(text: &str) -> ShareLayout {
    parse_layout(text).expect("built-in layout")
}

/// ORT baseline at full scale: 6+6 independent layers, word-level
/// vocabulary, no attention sharing, geometric gate on.
pub fn ort_config(hidden_size: usize, mlp_size: usize) -> ModelConfig {
    ModelConfig {
        hidden_size,
        mlp_size,
        heads: 8,
        feature_dim: REFERENCE_FEATURE_DIM,
        encoder_layout: layout("(0,1,2,3,4,5)"),
        decoder_layout: layout("(0,1,2,3,4,5)"),
        attention_mode: AttentionShareMode::NoShare,
        encoder_attention: None,
        decoder_attention: None,
        radix_base: 0,
        vocab_size: REFERENCE_WORD_VOCAB,
        max_len: 64,
        use_geometric: true,
        geometric_dim: 64,
    }
}

/// ACORT at full scale: radix base 768, Share-KV, the given layout on
/// both stacks.
pub fn acort_config(hidden_size: usize, mlp_size: usize, share: &str) -> ModelConfig {
    ModelConfig {
        encoder_layout: layout(share),
        decoder_layout: layout(share),
        attention_mode: AttentionShareMode::ShareKv,
        radix_base: 768,
        ..ort_config(hidden_size, mlp_size)
    }
}

fn with_layout(cfg: ModelConfig, share: &str) -> ModelConfig {
    ModelConfig {
        encoder_layout: layout(share),
        decoder_layout: layout(share),
        ..cfg
    }
}

/// A named group of configs with the reference parameter figure for each.
#[derive(Clone, Debug)]
pub struct ReferenceTable {
    pub title: &'static str,
    pub rows: Vec<ReferenceRow>,
}

#[derive(Clone, Debug)]
pub struct ReferenceRow {
    pub name: String,
    pub config: ModelConfig,
    /// Reference figure in millions, for whichever quantity the table lists.
    pub expected_millions: f64,
}

fn row(name: &str, config: ModelConfig, expected_millions: f64) -> ReferenceRow {
    ReferenceRow {
        name: name.to_string(),
        config,
        expected_millions,
    }
}

/// Model configurations table: reference totals.
pub fn model_size_table() -> ReferenceTable {
    ReferenceTable {
        title: "model-configurations",
        rows: vec![
            row("ort-base", ort_config(512, 2048), 55.4),
            row("ort-base-4", with_layout(ort_config(512, 2048), "(0,1,2,3)"), 40.7),
            row("ort-base-2", with_layout(ort_config(512, 2048), "(0,1)"), 26.0),
            row("ort-small", ort_config(256, 1024), 16.7),
            row("ort-xsmall", ort_config(104, 416), 4.1),
            row("acort-base", acort_config(512, 2048, "(0x3,1x3)"), 15.0),
            row("acort-base-al", acort_config(512, 2048, "(0x6)"), 8.4),
            row("acort-small", acort_config(256, 1024, "(0x3,1x3)"), 4.2),
            row("acort-xsmall", acort_config(256, 1024, "(0x2)"), 2.6),
        ],
    }
}

/// Radix base sweep: reference embedding sizes.
pub fn radix_table() -> ReferenceTable {
    let base = |v: usize| ModelConfig {
        radix_base: v,
        ..ort_config(512, 2048)
    };
    ReferenceTable {
        title: "radix-embeddings",
        rows: vec![
            row("word", ort_config(512, 2048), 10.3),
            row("radix-1024", base(1024), 1.1),
            row("radix-768", base(768), 0.8),
            row("radix-512", base(512), 0.5),
            row("radix-256", base(256), 0.3),
        ],
    }
}

/// Independent-layer sweep at fixed depth 6: reference totals.
pub fn layer_share_table() -> ReferenceTable {
    let shared = |s: &str| with_layout(ort_config(512, 2048), s);
    ReferenceTable {
        title: "layer-sharing",
        rows: vec![
            row("share-(0,1,2,3,4,5)", shared("(0,1,2,3,4,5)"), 55.4),
            row("share-(0,0,0,1,2,3)", shared("(0,0,0,1,2,3)"), 40.7),
            row("share-(0,0,1,1,2,2)", shared("(0,0,1,1,2,2)"), 33.4),
            row("share-(0,1,2,2,1,0)", shared("(0,1,2,2,1,0)"), 33.4),
            row("share-(0x3,1x3)", shared("(0x3,1x3)"), 26.0),
            row("share-(0x6)", shared("(0x6)"), 18.7),
        ],
    }
}

/// Two independent layers reused to depth 2, 6 and 12: reference totals.
pub fn layer_reuse_table() -> ReferenceTable {
    let shared = |s: &str| with_layout(ort_config(512, 2048), s);
    ReferenceTable {
        title: "layer-reuse",
        rows: vec![
            row("depth-2-(0,1)", shared("(0,1)"), 26.0),
            row("depth-6-(0x3,1x3)", shared("(0x3,1x3)"), 26.0),
            row("depth-12-(0x6,1x6)", shared("(0x6,1x6)"), 26.0),
        ],
    }
}

/// Attention sharing sweep: reference attention sizes.
pub fn attention_share_table() -> ReferenceTable {
    let base = ort_config(512, 2048);
    let kv = Some(AttentionShareMode::ShareKv);
    ReferenceTable {
        title: "attention-sharing",
        rows: vec![
            row("no-share", base.clone(), 18.9),
            row(
                "share-kv-encoder",
                ModelConfig {
                    encoder_attention: kv,
                    ..base.clone()
                },
                17.3,
            ),
            row(
                "share-kv-decoder",
                ModelConfig {
                    decoder_attention: kv,
                    ..base.clone()
                },
                15.8,
            ),
            row(
                "share-kv",
                ModelConfig {
                    attention_mode: AttentionShareMode::ShareKv,
                    ..base.clone()
                },
                14.2,
            ),
            row(
                "share-qk",
                ModelConfig {
                    attention_mode: AttentionShareMode::ShareQk,
                    ..base
                },
                14.2,
            ),
        ],
    }
}

/// Every reference table.
pub fn reference_suite() -> Vec<ReferenceTable> {
    vec![
        model_size_table(),
        radix_table(),
        layer_share_table(),
        layer_reuse_table(),
        attention_share_table(),
    ]
}

/// `table/row` names paired with configs, ready for [`emit_tables`].
pub fn reference_suite_configs() -> Vec<(String, ModelConfig)> {
    reference_suite()
        .into_iter()
        .flat_map(|t| {
            t.rows
                .into_iter()
                .map(move |r| (format!("{}/{}", t.title, r.name), r.config))
        })
        .collect()
}
