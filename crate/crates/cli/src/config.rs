//! JSON run configurations, one schema per subcommand.
//!
//! Every struct rejects unknown keys. Relative paths are resolved against the
//! working directory.

use std::path::{Path, PathBuf};

use mhattnsurv::cv::GridSpec;
use mhattnsurv::data::{FilterConfig, SyntheticConfig};
use mhattnsurv::{Error, ModelKind, Result, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRun {
    pub out: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

impl Default for SynthRun {
    fn default() -> Self {
        Self {
            out: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionName {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub dataset: PathBuf,
    #[serde(default = "default_model")]
    pub model: ModelKind,
    /// The validation set is one of this many stratified folds.
    #[serde(default = "default_validation_folds")]
    pub validation_folds: usize,
    #[serde(default)]
    pub checkpoint_precision: PrecisionName,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    pub dataset: PathBuf,
    /// Model to score patients with; exclusive with `predictions`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// `id,risk` CSV of precomputed scores; exclusive with `checkpoint`.
    #[serde(default)]
    pub predictions: Option<PathBuf>,
    /// Patients to evaluate; all patients when absent.
    #[serde(default)]
    pub patients: Option<Vec<String>>,
    #[serde(default = "default_test_patches")]
    pub test_patches: usize,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvRun {
    pub dataset: PathBuf,
    #[serde(default = "default_model")]
    pub model: ModelKind,
    #[serde(default = "default_outer")]
    pub outer_folds: usize,
    #[serde(default = "default_inner")]
    pub inner_folds: usize,
    /// Seed of the fold plan; the training seed when absent.
    #[serde(default)]
    pub split_seed: Option<u64>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateRun {
    pub dataset: PathBuf,
    #[serde(default = "default_outer")]
    pub outer_folds: usize,
    #[serde(default = "default_inner")]
    pub inner_folds: usize,
    #[serde(default)]
    pub split_seed: Option<u64>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttnmapRun {
    pub checkpoint: PathBuf,
    pub bag: PathBuf,
    /// `patch,row,col` CSV giving each patch's slide grid position.
    #[serde(default)]
    pub coords: Option<PathBuf>,
    /// Write one heatmap per head; defaults to whether coordinates are given.
    #[serde(default)]
    pub images: Option<bool>,
    #[serde(default = "default_passes")]
    pub passes: usize,
    #[serde(default = "default_group")]
    pub group_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterRun {
    /// PPM (P6) files, or directories whose `.ppm` files are all scanned.
    pub inputs: Vec<PathBuf>,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_model() -> ModelKind {
    ModelKind::MhAttn
}
fn default_validation_folds() -> usize {
    5
}
fn default_test_patches() -> usize {
    1000
}
fn default_horizons() -> Vec<f64> {
    mhattnsurv::eval::ANNUAL_HORIZONS.to_vec()
}
fn default_outer() -> usize {
    5
}
fn default_inner() -> usize {
    4
}
fn default_passes() -> usize {
    mhattnsurv::attnmap::DEFAULT_PASSES
}
fn default_group() -> usize {
    mhattnsurv::attnmap::DEFAULT_GROUP_SIZE
}

fn remove_path(value: &mut Value, path: &[String]) -> bool {
    let Some((last, parents)) = path.split_last() else {
        return false;
    };
    let mut cur = value;
    for key in parents {
        cur = match cur {
            Value::Object(map) => match map.get_mut(key) {
                Some(v) => v,
                None => return false,
            },
            Value::Array(items) => match key.parse::<usize>().ok().and_then(|i| items.get_mut(i)) {
                Some(v) => v,
                None => return false,
            },
            _ => return false,
        };
    }
    match cur {
        Value::Object(map) => map.remove(last).is_some(),
        _ => false,
    }
}

/// Parses `text` into `T`. Unknown keys are all collected and reported
/// together, as dotted paths.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut value: Value = serde_json::from_str(text)?;
    let mut unknown = Vec::new();
    loop {
        match serde_path_to_error::deserialize::<_, T>(value.clone()) {
            Ok(v) if unknown.is_empty() => return Ok(v),
            Ok(_) => break,
            Err(e) => {
                let path = e.path().to_string();
                let message = e.inner().to_string();
                if !message.starts_with("unknown field") {
                    if !unknown.is_empty() {
                        break;
                    }
                    return Err(Error::Config(format!("{path}: {message}")));
                }
                let segments: Vec<String> = e
                    .path()
                    .iter()
                    .map(|s| match s {
                        serde_path_to_error::Segment::Seq { index } => index.to_string(),
                        serde_path_to_error::Segment::Map { key } => key.clone(),
                        serde_path_to_error::Segment::Enum { variant } => variant.clone(),
                        serde_path_to_error::Segment::Unknown => "?".into(),
                    })
                    .collect();
                unknown.push(path);
                if !remove_path(&mut value, &segments) {
                    break;
                }
            }
        }
    }
    Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
}

pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_unknown_keys_are_listed() {
        let err = parse_config::<CvRun>(r#"{"dataset": "d", "bogus": 1, "train": {"heads": 4, "lr": 1}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus"), "{err}");
        assert!(err.contains("train.lr"), "{err}");
    }

    #[test]
    fn defaults_fill_missing_keys() {
        let run: CvRun = parse_config(r#"{"dataset": "d"}"#).unwrap();
        assert_eq!(run.outer_folds, 5);
        assert_eq!(run.grid.dropout_rates, vec![0.0, 0.2, 0.5, 0.8, 0.95]);
        assert_eq!(run.train.base_lr, 6e-5);
    }

    #[test]
    fn type_errors_name_the_key() {
        let err = parse_config::<CvRun>(r#"{"dataset": "d", "outer_folds": "five"}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("outer_folds"), "{err}");
    }
}
