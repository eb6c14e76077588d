//! Versioned TOML run configuration. Unknown keys are rejected and every
//! omitted key takes its default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{CommonAugmentConfig, FurtherAugmentConfig};
use crate::backbone::BackboneConfig;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::trainer::{TrainConfig, TrainSetup};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Dataset directory (holding `dataset.json`).
    pub root: Option<PathBuf>,
    /// Resample to this spacing `(row_mm, col_mm)` when set.
    pub target_spacing: Option<(f64, f64)>,
    /// Center crop/pad to this size when set (requires `target_spacing`).
    pub target_size: Option<(usize, usize)>,
    /// Must match the manifest when set.
    pub num_classes: Option<usize>,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub common: CommonAugmentConfig,
    pub further: FurtherAugmentConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointChoice {
    /// Final-epoch weights.
    #[default]
    Last,
    /// Lowest epoch-mean training pce.
    Best,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub checkpoint: CheckpointChoice,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            checkpoint: CheckpointChoice::Last,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub schema_version: u32,
    pub dataset: DatasetSection,
    pub augment: AugmentSection,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        RunConfigFile {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetSection::default(),
            augment: AugmentSection::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

fn field<T>(section: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidInput(m) | Error::Config(m) => Error::Config(format!("[{section}] {m}")),
        other => other,
    })
}

impl RunConfigFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        field("augment.common", self.augment.common.validate())?;
        field("augment.further", self.augment.further.validate())?;
        field("backbone", self.backbone.validate())?;
        field("train", self.train.validate())?;
        if self.eval.batch_size == 0 {
            return Err(Error::Config("[eval] batch_size must be at least 1".into()));
        }
        let d = &self.dataset;
        if d.target_size.is_some() && d.target_spacing.is_none() {
            return Err(Error::Config("[dataset] target_size requires target_spacing".into()));
        }
        if let Some(sp) = d.target_spacing {
            if !(sp.0 > 0.0 && sp.1 > 0.0) {
                return Err(Error::Config("[dataset] target_spacing must be positive".into()));
            }
        }
        if let Some(k) = d.num_classes {
            if k < 2 {
                return Err(Error::Config("[dataset] num_classes must be at least 2".into()));
            }
        }
        Ok(())
    }

    /// Dataset spec for preprocessing, when both target values are set.
    pub fn dataset_spec(&self, root: &Path, num_classes: usize, class_names: &[String]) -> Option<DatasetSpec> {
        let d = &self.dataset;
        let spacing = d.target_spacing?;
        Some(DatasetSpec {
            root_path: root.to_path_buf(),
            target_spacing: spacing,
            target_size: d.target_size?,
            num_classes,
            class_names: class_names.to_vec(),
        })
    }

    /// Training setup for a dataset with `num_classes` classes.
    pub fn train_setup(&self, num_classes: usize) -> Result<TrainSetup> {
        if let Some(k) = self.dataset.num_classes {
            if k != num_classes {
                return Err(Error::Config(format!(
                    "[dataset] num_classes = {k} but the dataset has {num_classes}"
                )));
            }
        }
        let setup = TrainSetup {
            backbone: BackboneConfig {
                num_classes,
                ..self.backbone.clone()
            },
            common: self.augment.common.clone(),
            further: self.augment.further.clone(),
            train: self.train.clone(),
        };
        field("setup", setup.validate())?;
        Ok(setup)
    }
}
