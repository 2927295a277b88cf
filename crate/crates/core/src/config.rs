//! Run configuration: a sectioned key-value (TOML) file with a JSON
//! equivalent. Every tunable default is spelled out in the shipped
//! `configs/default.toml` so assumptions stay auditable.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::NoiseSpec;
use crate::backbone::{BackboneSpec, WeightsSource};
use crate::error::{Error, Result};
use crate::objective::{LossPreset, LossWeights, DEFAULT_FOCAL_GAMMA};
use crate::scoring::ScoreConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub id: String,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    /// Seed for the reference extractor; ignored when an archive is given.
    pub seed: u64,
    /// Optional exported weights archive.
    pub weights_archive: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            id: "reference".into(),
            stage_channels: vec![16, 32, 64],
            stage_strides: vec![4, 8, 16],
            seed: 42,
            weights_archive: None,
        }
    }
}

impl BackboneConfig {
    pub fn to_spec(&self) -> BackboneSpec {
        let weights_source = match &self.weights_archive {
            Some(path) => WeightsSource::Archive { path: path.clone() },
            None => WeightsSource::ReferenceSeeded { seed: self.seed },
        };
        BackboneSpec {
            backbone_id: self.id.clone(),
            stage_channels: self.stage_channels.clone(),
            stage_strides: self.stage_strides.clone(),
            weights_source,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Named preset; explicit lambdas below are used when absent.
    pub preset: Option<String>,
    pub lambda_l1: f64,
    pub lambda_js: f64,
    pub lambda_gram: f64,
    pub focal_gamma: f64,
    /// Distribution construction for the JS term; only "softmax" is
    /// implemented.
    pub js_normalization: String,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            preset: Some("full".into()),
            lambda_l1: 0.5,
            lambda_js: 0.5,
            lambda_gram: 0.5,
            focal_gamma: DEFAULT_FOCAL_GAMMA,
            js_normalization: "softmax".into(),
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> Result<LossWeights> {
        if self.js_normalization != "softmax" {
            return Err(Error::InvalidConfig(format!(
                "js_normalization `{}` is not supported (only \"softmax\")",
                self.js_normalization
            )));
        }
        let weights = match &self.preset {
            Some(name) => {
                let mut w = LossWeights::preset(LossPreset::from_name(name)?);
                w.focal_gamma = self.focal_gamma;
                w
            }
            None => LossWeights {
                lambda_l1: self.lambda_l1,
                lambda_js: self.lambda_js,
                lambda_gram: self.lambda_gram,
                lambda_cls: 0.0,
                focal_gamma: self.focal_gamma,
            },
        };
        weights.validate()?;
        Ok(weights)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate_start: f64,
    pub learning_rate_end: f64,
    /// Only "cosine_annealing" is supported.
    pub schedule: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate_start: 1e-3,
            learning_rate_end: 1e-4,
            schedule: "cosine_annealing".into(),
            epochs: 100,
            batch_size: 32,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub root: PathBuf,
    /// Empty means every category found under the root.
    pub categories: Vec<String>,
    /// Category-agnostic training: one model over all categories.
    pub unified: bool,
    /// Square resize target in pixels.
    pub target_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/mvtec"),
            categories: Vec::new(),
            unified: false,
            target_size: crate::data::DEFAULT_TARGET_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Low-resolution view scale in (0, 1].
    pub lr_factor: f64,
    /// 1-based backbone stages feeding the alignment (strictly increasing).
    pub stages: Vec<usize>,
    pub output_dir: PathBuf,
    /// Single-threaded, fixed-order execution for bit-reproducible runs.
    pub strict_determinism: bool,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub score: ScoreConfig,
    pub augment: NoiseSpec,
    pub optimizer: OptimizerConfig,
    pub dataset: DatasetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lr_factor: 0.5,
            stages: vec![1, 2, 3],
            output_dir: PathBuf::from("runs/default"),
            strict_determinism: false,
            backbone: BackboneConfig::default(),
            loss: LossConfig::default(),
            score: ScoreConfig::default(),
            augment: NoiseSpec::default(),
            optimizer: OptimizerConfig::default(),
            dataset: DatasetConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads TOML (default) or JSON (by `.json` extension).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let config: RunConfig = if path.extension().and_then(|e| e.to_str()) == Some("json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_factor must be in (0, 1], got {}",
                self.lr_factor
            )));
        }
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("stage selection is empty".into()));
        }
        if !self.stages.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::InvalidConfig(
                "stage selection must be strictly increasing".into(),
            ));
        }
        let stage_count = self.backbone.stage_channels.len();
        if *self.stages.last().unwrap() > stage_count || self.stages[0] < 1 {
            return Err(Error::InvalidConfig(format!(
                "stage selection {:?} outside 1..={stage_count}",
                self.stages
            )));
        }
        self.backbone.to_spec().validate()?;
        let opt = &self.optimizer;
        if opt.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if opt.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(opt.learning_rate_end > 0.0 && opt.learning_rate_start >= opt.learning_rate_end) {
            return Err(Error::InvalidConfig(
                "need learning_rate_start >= learning_rate_end > 0".into(),
            ));
        }
        if opt.schedule != "cosine_annealing" {
            return Err(Error::InvalidConfig(format!(
                "schedule `{}` is not supported (only \"cosine_annealing\")",
                opt.schedule
            )));
        }
        if self.dataset.target_size < crate::backbone::MIN_IMAGE_SIDE {
            return Err(Error::InvalidConfig(format!(
                "target_size must be at least {}",
                crate::backbone::MIN_IMAGE_SIDE
            )));
        }
        self.loss.weights()?;
        self.score.validate()?;
        self.augment.validate()?;
        Ok(())
    }

    /// Channels of the selected stages, in selection order.
    pub fn selected_channels(&self) -> Vec<usize> {
        self.stages
            .iter()
            .map(|&s| self.backbone.stage_channels[s - 1])
            .collect()
    }
}
