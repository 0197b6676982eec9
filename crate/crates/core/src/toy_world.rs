//! Synthetic captioning scenes: coloured shapes in a unit square with
//! templated captions, standing in for detector region features.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::BoxGeometry;
use crate::autodiff::Tensor;
use crate::model::Regions;

pub const MAX_OBJECTS: usize = 5;

/// Standard deviation of the feature noise unless a caller asks otherwise.
pub const DEFAULT_NOISE: f64 = 0.05;

/// Narrowest feature vector that holds every slot.
pub const MIN_FEATURE_DIM: usize = 16;

// Box centres closer than this along x would make the caption order fragile.
const MIN_CX_GAP: f64 = 0.04;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn from_word(word: &str) -> Option<Self> {
                match word {
                    $($word => Some($name::$variant),)+
                    _ => None,
                }
            }

            fn slot(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).unwrap()
            }
        }
    };
}

word_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle", Star => "star" });
word_enum!(Color { Red => "red", Blue => "blue", Green => "green", Yellow => "yellow" });
word_enum!(Size { Small => "small", Big => "big" });

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    #[serde(rename = "box")]
    pub bbox: BoxGeometry,
}

impl ToyObject {
    pub fn attributes(&self) -> (Size, Color, Shape) {
        (self.size, self.color, self.shape)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub id: u64,
    pub objects: Vec<ToyObject>,
    pub caption: Vec<String>,
}

impl Scene {
    pub fn caption_text(&self) -> String {
        self.caption.join(" ")
    }

    /// Checks the structural invariants and that the caption is the one the
    /// template grammar derives from the objects.
    pub fn validate(&self) -> Result<(), ToyError> {
        let invalid = |reason: String| ToyError::Invalid { id: self.id, reason };
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return Err(invalid(format!("{} objects, expected 1 to {MAX_OBJECTS}", self.objects.len())));
        }
        for obj in &self.objects {
            let b = obj.bbox;
            let inside = b.w > 0.0
                && b.h > 0.0
                && b.cx - b.w / 2.0 >= 0.0
                && b.cx + b.w / 2.0 <= 1.0
                && b.cy - b.h / 2.0 >= 0.0
                && b.cy + b.h / 2.0 <= 1.0;
            if !inside {
                return Err(invalid(format!("box {b:?} leaves the unit square")));
            }
        }
        let expected = caption_for(&self.objects);
        if expected != self.caption {
            return Err(invalid(format!(
                "caption {:?} does not match objects (expected {:?})",
                self.caption_text(),
                expected.join(" ")
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("scene {id}: {reason}")]
    Invalid { id: u64, reason: String },
    #[error("unparseable caption at word {position}: {reason}")]
    Caption { position: usize, reason: String },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// "a {size} {color} {shape}" per object, left to right by box centre,
/// joined by "and".
pub fn caption_for(objects: &[ToyObject]) -> Vec<String> {
    let mut ordered: Vec<&ToyObject> = objects.iter().collect();
    ordered.sort_by(|a, b| a.bbox.cx.total_cmp(&b.bbox.cx));
    let mut words = Vec::with_capacity(objects.len() * 5);
    for (i, obj) in ordered.iter().enumerate() {
        if i > 0 {
            words.push("and".to_string());
        }
        words.extend(["a", obj.size.word(), obj.color.word(), obj.shape.word()].map(String::from));
    }
    words
}

/// Inverse of the template grammar: the attribute tuples in caption order.
pub fn parse_caption<S: AsRef<str>>(words: &[S]) -> Result<Vec<(Size, Color, Shape)>, ToyError> {
    let err = |position: usize, reason: &str| ToyError::Caption {
        position,
        reason: reason.to_string(),
    };
    let words: Vec<&str> = words.iter().map(AsRef::as_ref).collect();
    let mut out = Vec::new();
    let mut i = 0;
    loop {
        if words.get(i) != Some(&"a") {
            return Err(err(i, "expected \"a\""));
        }
        let size = words.get(i + 1).and_then(|w| Size::from_word(w)).ok_or_else(|| err(i + 1, "expected a size"))?;
        let color = words.get(i + 2).and_then(|w| Color::from_word(w)).ok_or_else(|| err(i + 2, "expected a color"))?;
        let shape = words.get(i + 3).and_then(|w| Shape::from_word(w)).ok_or_else(|| err(i + 3, "expected a shape"))?;
        out.push((size, color, shape));
        i += 4;
        match words.get(i) {
            None => return Ok(out),
            Some(&"and") => i += 1,
            Some(_) => return Err(err(i, "expected \"and\" or end of caption")),
        }
    }
}

/// Every word the grammar can emit.
pub fn grammar_words() -> Vec<&'static str> {
    let mut words = vec!["a", "and"];
    words.extend(Size::ALL.iter().map(|s| s.word()));
    words.extend(Color::ALL.iter().map(|c| c.word()));
    words.extend(Shape::ALL.iter().map(|s| s.word()));
    words
}

fn scene_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One scene, a pure function of `(seed, id)`.
pub fn generate_scene(seed: u64, id: u64) -> Scene {
    let mut rng = scene_rng(seed, id);
    let n = rng.gen_range(1..=MAX_OBJECTS);
    let mut objects: Vec<ToyObject> = Vec::with_capacity(n);
    while objects.len() < n {
        let size = Size::ALL[rng.gen_range(0..Size::ALL.len())];
        let (lo, hi) = match size {
            Size::Small => (0.06, 0.12),
            Size::Big => (0.18, 0.30),
        };
        let w = rng.gen_range(lo..hi);
        let h = rng.gen_range(lo..hi);
        let cx = rng.gen_range(w / 2.0..1.0 - w / 2.0);
        let cy = rng.gen_range(h / 2.0..1.0 - h / 2.0);
        if objects.iter().any(|o| (o.bbox.cx - cx).abs() < MIN_CX_GAP) {
            continue;
        }
        objects.push(ToyObject {
            shape: Shape::ALL[rng.gen_range(0..Shape::ALL.len())],
            color: Color::ALL[rng.gen_range(0..Color::ALL.len())],
            size,
            bbox: BoxGeometry { cx, cy, w, h },
        });
    }
    let caption = caption_for(&objects);
    Scene { id, objects, caption }
}

/// Train, validation and test splits with consecutive, disjoint ids.
pub fn generate_dataset(seed: u64, n_train: usize, n_val: usize, n_test: usize) -> (Vec<Scene>, Vec<Scene>, Vec<Scene>) {
    let split = |start: usize, n: usize| -> Vec<Scene> {
        (start..start + n).map(|id| generate_scene(seed, id as u64)).collect()
    };
    (
        split(0, n_train),
        split(n_train, n_val),
        split(n_train + n_val, n_test),
    )
}

/// `[objects × feature_dim]` region features.
///
/// Slots: shape one-hot at 0..4, colour at 4..8, size at 8..10, then the box
/// (cx, cy, w, h) at 10..14; the rest is zero padding. Gaussian noise of the
/// given standard deviation is added to every entry, drawn from a stream
/// keyed by `(noise_seed, scene id)`.
pub fn scene_features(scene: &Scene, feature_dim: usize, noise: f64, noise_seed: u64) -> Tensor {
    assert!(feature_dim >= MIN_FEATURE_DIM, "feature_dim must be at least {MIN_FEATURE_DIM}");
    assert!(noise >= 0.0 && noise.is_finite(), "noise must be a finite standard deviation");
    let n = scene.objects.len();
    let mut data = vec![0.0; n * feature_dim];
    for (row, obj) in data.chunks_mut(feature_dim).zip(&scene.objects) {
        row[obj.shape.slot()] = 1.0;
        row[4 + obj.color.slot()] = 1.0;
        row[8 + obj.size.slot()] = 1.0;
        row[10..14].copy_from_slice(&[obj.bbox.cx, obj.bbox.cy, obj.bbox.w, obj.bbox.h]);
    }
    if noise > 0.0 {
        let mut rng = scene_rng(noise_seed, scene.id);
        let normal = Normal::new(0.0, noise).expect("valid standard deviation");
        for x in &mut data {
            *x += normal.sample(&mut rng);
        }
    }
    Tensor::new(vec![n, feature_dim], data).expect("shape matches data")
}

/// Features plus boxes, ready for the encoder.
pub fn scene_regions(scene: &Scene, feature_dim: usize, noise: f64, noise_seed: u64) -> Regions {
    Regions {
        features: scene_features(scene, feature_dim, noise, noise_seed),
        boxes: scene.objects.iter().map(|o| o.bbox).collect(),
    }
}

pub fn write_jsonl<W: Write>(mut out: W, scenes: &[Scene]) -> Result<(), ToyError> {
    for scene in scenes {
        serde_json::to_writer(&mut out, scene).map_err(|source| ToyError::Json { line: 0, source })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads scenes back, validating each one. Blank lines are skipped.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Scene>, ToyError> {
    let mut scenes = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line).map_err(|source| ToyError::Json { line: i + 1, source })?;
        scene.validate()?;
        scenes.push(scene);
    }
    Ok(scenes)
}
