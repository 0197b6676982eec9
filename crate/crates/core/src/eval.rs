//! Caption metrics and layer-distance analysis for trained models.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::decoding::generate;
use crate::model::{CaptionerModel, ModelError, Regions, Stack};
use crate::toy_world::{scene_regions, Scene};
use crate::vocab::{TokenCodec, TokenStream, VocabError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("layer {layer} does not match layer 0 in parameter shapes")]
    ShapeMismatch { layer: usize },
    #[error("need at least two layers, got {0}")]
    TooFewLayers(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Corpus-level BLEU-1 through BLEU-4 against one reference per hypothesis,
/// unsmoothed, with the usual brevity penalty. An order with no matching
/// n-gram zeroes that score and every higher one.
pub fn corpus_bleu<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> [f64; 4] {
    assert_eq!(hypotheses.len(), references.len(), "one reference per hypothesis");
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, reference) in hypotheses.iter().zip(references) {
        let hyp: Vec<&str> = hyp.iter().map(AsRef::as_ref).collect();
        let reference: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=4 {
            let ref_counts = ngram_counts(&reference, n);
            for (gram, count) in ngram_counts(&hyp, n) {
                matched[n - 1] += count.min(ref_counts.get(&gram).copied().unwrap_or(0));
                total[n - 1] += count;
            }
        }
    }
    if hyp_len == 0 {
        return [0.0; 4];
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let mut scores = [0.0; 4];
    let mut log_sum = 0.0;
    for n in 0..4 {
        if matched[n] == 0 {
            break;
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
        scores[n] = bp * (log_sum / (n + 1) as f64).exp();
    }
    scores
}

fn ngram_counts<'a>(words: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    for gram in words.windows(n) {
        *counts.entry(gram.to_vec()).or_insert(0) += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaptionStats {
    /// Share of generated captions that never occur in the training set.
    pub unique_fraction: f64,
    /// Mean caption length in words.
    pub avg_word_count: f64,
}

pub fn caption_stats(generated: &[String], training: &HashSet<String>) -> CaptionStats {
    if generated.is_empty() {
        return CaptionStats {
            unique_fraction: 0.0,
            avg_word_count: 0.0,
        };
    }
    let n = generated.len() as f64;
    let unseen = generated.iter().filter(|c| !training.contains(c.as_str())).count();
    let words: usize = generated.iter().map(|c| c.split_whitespace().count()).sum();
    CaptionStats {
        unique_fraction: unseen as f64 / n,
        avg_word_count: words as f64 / n,
    }
}

/// How region features are synthesised from scenes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureOptions {
    pub noise: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub exact_match: f64,
    /// BLEU-1 .. BLEU-4.
    pub bleu: [f64; 4],
    pub stats: CaptionStats,
    /// Generated caption per scene, in input order.
    pub captions: Vec<String>,
}

// Images captioned per batched greedy pass.
const EVAL_BATCH: usize = 64;

/// Captions every scene with a frozen model and scores against the scene
/// captions.
pub fn evaluate(
    model: &CaptionerModel,
    codec: &TokenCodec,
    scenes: &[Scene],
    features: FeatureOptions,
    training_captions: &HashSet<String>,
    beam_size: usize,
) -> Result<Evaluation, EvalError> {
    if scenes.is_empty() {
        return Err(EvalError::Empty);
    }
    let dim = model.config().feature_dim;
    let regions: Vec<Regions> = scenes
        .iter()
        .map(|s| scene_regions(s, dim, features.noise, features.seed))
        .collect();
    let mut captions = Vec::with_capacity(scenes.len());
    for chunk in regions.chunks(EVAL_BATCH) {
        let refs: Vec<&Regions> = chunk.iter().collect();
        for hyp in generate(model, &refs, codec, beam_size, None)? {
            let stream = TokenStream::new(hyp.tokens, codec.mode());
            captions.push(codec.caption_from_tokens(&stream)?);
        }
    }
    let exact = scenes
        .iter()
        .zip(&captions)
        .filter(|(s, c)| s.caption_text() == **c)
        .count();
    let hyps: Vec<Vec<&str>> = captions.iter().map(|c| c.split_whitespace().collect()).collect();
    let refs: Vec<Vec<&str>> = scenes.iter().map(|s| s.caption.iter().map(String::as_str).collect()).collect();
    Ok(Evaluation {
        exact_match: exact as f64 / scenes.len() as f64,
        bleu: corpus_bleu(&hyps, &refs),
        stats: caption_stats(&captions, training_captions),
        captions,
    })
}

/// Symmetric `[L × L]` grid of pairwise distances.
pub type DistanceMatrix = Vec<Vec<f64>>;

/// Pairwise mean squared distance between layers, each given as its list
/// of parameter tensors. Every tensor is L2-normalised along its last axis
/// before the layer is flattened into one vector.
pub fn distance_matrix(layers: &[Vec<Tensor>]) -> Result<DistanceMatrix, EvalError> {
    if layers.len() < 2 {
        return Err(EvalError::TooFewLayers(layers.len()));
    }
    let shapes = |layer: &[Tensor]| layer.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
    let reference = shapes(&layers[0]);
    for (i, layer) in layers.iter().enumerate().skip(1) {
        if shapes(layer) != reference {
            return Err(EvalError::ShapeMismatch { layer: i });
        }
    }
    let vectors: Vec<Vec<f64>> = layers.iter().map(|l| normalised_vector(l)).collect();
    let n = vectors.len();
    let mut out = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let sq: f64 = vectors[a].iter().zip(&vectors[b]).map(|(x, y)| (x - y) * (x - y)).sum();
            let msd = sq / vectors[a].len().max(1) as f64;
            out[a][b] = msd;
            out[b][a] = msd;
        }
    }
    Ok(out)
}

fn normalised_vector(layer: &[Tensor]) -> Vec<f64> {
    let mut flat = Vec::new();
    for t in layer {
        let last = t.shape().last().copied().unwrap_or(1).max(1);
        for row in t.data().chunks(last) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                flat.extend_from_slice(row);
            } else {
                flat.extend(row.iter().map(|x| x / norm));
            }
        }
    }
    flat
}

/// Distance matrices for the encoder and decoder stacks, one row and
/// column per stack position. Positions in one sharing group are exactly 0
/// apart.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDistances {
    pub encoder: DistanceMatrix,
    pub decoder: DistanceMatrix,
}

pub fn layer_distance_matrix(model: &CaptionerModel) -> Result<LayerDistances, EvalError> {
    let stack = |s: Stack| -> Result<DistanceMatrix, EvalError> {
        let layers: Vec<Vec<Tensor>> = (0..model.assignment(s).len())
            .map(|pos| model.position_tensors(s, pos).iter().map(|p| p.value().clone()).collect())
            .collect();
        distance_matrix(&layers)
    };
    Ok(LayerDistances {
        encoder: stack(Stack::Encoder)?,
        decoder: stack(Stack::Decoder)?,
    })
}

/// Element-wise square root, for root-mean-squared plots.
pub fn rms_matrix(m: &DistanceMatrix) -> DistanceMatrix {
    m.iter().map(|row| row.iter().map(|x| x.sqrt()).collect()).collect()
}

/// Raises every entry below the second-lowest distinct value to that value,
/// so the zero diagonal does not dominate a colour scale.
pub fn clip_to_second_lowest(m: &DistanceMatrix) -> DistanceMatrix {
    let mut values: Vec<f64> = m.iter().flatten().copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let Some(&floor) = values.get(1) else {
        return m.clone();
    };
    m.iter().map(|row| row.iter().map(|&x| x.max(floor)).collect()).collect()
}

/// Writes the matrix as a headerless CSV grid.
pub fn write_matrix_csv<W: Write>(mut out: W, m: &DistanceMatrix) -> std::io::Result<()> {
    for row in m {
        let cells: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionShareMode;
    use crate::layout::parse_layout;
    use crate::model::{build_model, ModelConfig};

    fn words(text: &str) -> Vec<&str> {
        text.split_whitespace().collect()
    }

    #[test]
    fn identical_corpus_scores_one() {
        let refs = vec![words("a small red circle"), words("a big blue star and a small red circle")];
        let bleu = corpus_bleu(&refs, &refs);
        for b in bleu {
            assert!((b - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bleu_matches_hand_count() {
        // hyp 1: "a red circle and a star"   ref 1: "a small red circle and a big star"
        // hyp 2: "a big star"                ref 2: "a big blue star"
        let hyps = vec![words("a red circle and a star"), words("a big star")];
        let refs = vec![words("a small red circle and a big star"), words("a big blue star")];
        // unigrams: 6/6 + 3/3 = 9/9
        // bigrams:  {a red, red circle, circle and, and a, a star} vs ref1 bigrams
        //           {a small, small red, red circle, circle and, and a, a big, big star}
        //           → red circle, circle and, and a = 3 of 5; hyp 2 {a big, big star} vs
        //           {a big, big blue, blue star} → 1 of 2. Total 4/7.
        // trigrams: {a red circle, red circle and, circle and a, and a star}: 2 of 4 match
        //           (red circle and, circle and a); hyp 2 {a big star}: 0 of 1. Total 2/5.
        // 4-grams:  {a red circle and, red circle and a, circle and a star}: 1 of 3
        //           (red circle and a); hyp 2 has none. Total 1/3.
        // lengths 9 vs 12 → BP = exp(1 − 12/9).
        let bp = (1.0f64 - 12.0 / 9.0).exp();
        let p = [1.0f64, 4.0 / 7.0, 2.0 / 5.0, 1.0 / 3.0];
        let bleu = corpus_bleu(&hyps, &refs);
        for n in 0..4 {
            let geo = (p[..=n].iter().map(|x| x.ln()).sum::<f64>() / (n + 1) as f64).exp();
            assert!((bleu[n] - bp * geo).abs() < 1e-12, "BLEU-{}", n + 1);
        }
    }

    #[test]
    fn missing_four_grams_give_zero() {
        let bleu = corpus_bleu(&[words("a red star")], &[words("a red star")]);
        assert_eq!(bleu[3], 0.0);
        assert!((bleu[2] - 1.0).abs() < 1e-15);
        assert_eq!(corpus_bleu(&[Vec::<&str>::new()], &[words("a")]), [0.0; 4]);
    }

    #[test]
    fn copied_captions_are_not_unique() {
        let train: HashSet<String> = ["a big red star", "a small blue circle"].map(String::from).into();
        let stats = caption_stats(&["a big red star".to_string(), "a small blue circle".to_string()], &train);
        assert_eq!(stats.unique_fraction, 0.0);
        assert_eq!(stats.avg_word_count, 4.0);
        let stats = caption_stats(&["a big red star".to_string(), "a big red circle".to_string()], &train);
        assert_eq!(stats.unique_fraction, 0.5);
    }

    #[test]
    fn two_layer_distance_by_hand() {
        // (3, 4) normalises to (0.6, 0.8); (1, 0) stays. MSD = (0.16 + 0.64) / 2.
        let a = vec![Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap()];
        let b = vec![Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()];
        let m = distance_matrix(&[a, b]).unwrap();
        assert!((m[0][1] - 0.4).abs() < 1e-15);
        assert_eq!(m[0][1], m[1][0]);
        assert_eq!((m[0][0], m[1][1]), (0.0, 0.0));
    }

    #[test]
    fn distance_rejects_mismatched_layers() {
        let a = vec![Tensor::zeros(vec![2, 2])];
        let b = vec![Tensor::zeros(vec![2, 3])];
        assert!(matches!(distance_matrix(&[a.clone(), b]), Err(EvalError::ShapeMismatch { layer: 1 })));
        assert!(matches!(distance_matrix(&[a]), Err(EvalError::TooFewLayers(1))));
    }

    #[test]
    fn shared_positions_are_zero_apart() {
        let cfg = ModelConfig {
            hidden_size: 8,
            mlp_size: 12,
            heads: 2,
            feature_dim: 16,
            encoder_layout: parse_layout("(0x2,1x2)").unwrap(),
            decoder_layout: parse_layout("(0,1,0)").unwrap(),
            attention_mode: AttentionShareMode::ShareKv,
            encoder_attention: None,
            decoder_attention: None,
            radix_base: 4,
            vocab_size: 10,
            max_len: 12,
            use_geometric: true,
            geometric_dim: 16,
        };
        let model = build_model(&cfg, 1).unwrap();
        let d = layer_distance_matrix(&model).unwrap();
        let enc = &d.encoder;
        assert_eq!(enc.len(), 4);
        assert_eq!(enc[0][1], 0.0);
        assert_eq!(enc[2][3], 0.0);
        assert!(enc[0][2] > 0.0);
        assert_eq!(d.decoder[0][2], 0.0);
        assert!(d.decoder[0][1] > 0.0);
        for m in [&d.encoder, &d.decoder] {
            for i in 0..m.len() {
                assert_eq!(m[i][i], 0.0);
                for j in 0..m.len() {
                    assert_eq!(m[i][j], m[j][i]);
                    assert!(m[i][j] >= 0.0);
                }
            }
        }
        let clipped = clip_to_second_lowest(enc);
        assert_eq!(clipped[0][0], enc[0][2].min(enc[0][3]).min(enc[1][2]).min(enc[1][3]));
        let rms = rms_matrix(enc);
        assert!((rms[0][2] * rms[0][2] - enc[0][2]).abs() < 1e-15);
        let mut csv = Vec::new();
        write_matrix_csv(&mut csv, enc).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 4);
    }
}
