use std::path::{Path, PathBuf};

use acort::model::ModelConfig;
use acort::toy_world::DEFAULT_NOISE;
use acort::train::DEFAULT_WARMUP_STEPS;
use serde::{Deserialize, Serialize};

/// Everything a run needs, loaded from one JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_peak: Option<f64>,
    pub warmup_steps: u64,
    pub seed: u64,
    pub min_frequency: u64,
    /// Stop early once validation exact match reaches this.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_exact_match: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 30,
            batch_size: 32,
            lr_peak: None,
            warmup_steps: DEFAULT_WARMUP_STEPS,
            seed: 0,
            min_frequency: 1,
            target_exact_match: None,
        }
    }
}

/// Either a directory holding `train.jsonl`, `val.jsonl` and `test.jsonl`,
/// or generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise: f64,
    pub feature_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: None,
            seed: 0,
            n_train: 2000,
            n_val: 200,
            n_test: 200,
            noise: DEFAULT_NOISE,
            feature_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub beam_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            beam_size: 1,
            max_len: None,
        }
    }
}

/// Reads a run config. A file without a `model` key is taken to be a bare
/// model config. A relative `data.path` is resolved against the config
/// file's directory and must exist.
pub fn load_run_config(path: &Path) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let is_run = value.get("model").is_some();
    let mut run: RunConfig = if is_run {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|model| RunConfig {
            model,
            train: TrainSection::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
        })
    }
    .map_err(|e| format!("{}: {e}", path.display()))?;
    run.model.validate().map_err(|e| format!("{}: {e}", path.display()))?;
    if let Some(data) = &run.data.path {
        let resolved = match path.parent() {
            Some(dir) if data.is_relative() => dir.join(data),
            _ => data.clone(),
        };
        if !resolved.exists() {
            return Err(format!("{}: data path {} does not exist", path.display(), resolved.display()));
        }
        run.data.path = Some(resolved);
    }
    Ok(run)
}
