//! Run configuration: paths, model, training, loss, extraction and inference settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::extraction::ExtractionSettings;
use crate::inference::InferenceSettings;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::pipeline::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;
pub const CONFIG_ENV: &str = "PATCHMIL_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    /// Trained checkpoint for inference or resumption.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Encoder weights in timm layout to start from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossValConfig {
    pub k: usize,
}

impl Default for CrossValConfig {
    fn default() -> Self {
        CrossValConfig { k: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub paths: PathsConfig,
    #[serde(default = "ModelConfig::vit_base")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub extraction: ExtractionSettings,
    #[serde(default)]
    pub inference: InferenceSettings,
    #[serde(default)]
    pub crossval: CrossValConfig,
    #[serde(default)]
    pub data: DataConfig,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn new(paths: PathsConfig, model: ModelConfig) -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            paths,
            model,
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            extraction: ExtractionSettings::default(),
            inference: InferenceSettings::default(),
            crossval: CrossValConfig::default(),
            data: DataConfig::default(),
            base_dir: PathBuf::new(),
        }
    }

    /// Parses without touching the filesystem.
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::invalid("config", e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads, parses and validates a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cfg = RunConfig::from_json(&text, base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.resolve(&self.paths.manifest)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.paths.output_dir)
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        self.paths.checkpoint.as_deref().map(|p| self.resolve(p))
    }

    pub fn pretrained_path(&self) -> Option<PathBuf> {
        self.paths.pretrained.as_deref().map(|p| self.resolve(p))
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    /// Checks values and that every input path exists.
    pub fn validate(&self) -> Result<()> {
        self.validate_values()?;
        if !self.manifest_path().is_file() {
            return Err(Error::invalid(
                "paths.manifest",
                format!("{} does not exist", self.manifest_path().display()),
            ));
        }
        for (field, path) in [
            ("paths.checkpoint", self.checkpoint_path()),
            ("paths.pretrained", self.pretrained_path()),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Error::invalid(
                        field,
                        format!("{} does not exist", p.display()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn validate_values(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::invalid(
                "version",
                format!(
                    "{} is not supported (expected {CONFIG_VERSION})",
                    self.version
                ),
            ));
        }
        if self.paths.output_dir.as_os_str().is_empty() {
            return Err(Error::invalid("paths.output_dir", "must not be empty"));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.extraction.validate()?;
        self.inference.validate()?;
        self.data.normalization.validate()?;
        if self.crossval.k < 2 {
            return Err(Error::invalid("crossval.k", "need at least 2 folds"));
        }
        Ok(())
    }
}
