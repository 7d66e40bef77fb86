//! Run configuration file.
//!
//! A TOML document with one table per stage. Unknown keys are errors.
//!
//! ```toml
//! [ensemble]
//! mode = "uncertainty"
//!
//! [[ensemble.members]]
//! arch = "unet_lite"
//! seed = 1
//!
//! [[ensemble.members]]
//! arch = "unet_lite"
//! seed = 2
//!
//! [train]
//! epochs = 30
//! batch_frames = 2
//! seed = 3
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::EvalConfig;
use crate::train::TrainConfig;
use crate::volume::{AugmentationSpec, PhantomSpec};

/// Preprocessing applied to training data before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Resize every slice to `(height, width)`; `None` keeps the input size.
    pub image_size: Option<(usize, usize)>,
    /// Spatial augmentation of the training set. Empty lists add nothing.
    pub augmentation: AugmentationSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn new(ensemble: EnsembleConfig) -> Self {
        RunConfig {
            phantom: PhantomSpec::default(),
            preprocess: PreprocessConfig::default(),
            ensemble,
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Parses and validates; parse errors carry line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.preprocess.augmentation.validate()?;
        if let Some((h, w)) = self.preprocess.image_size {
            if h < 8 || w < 8 {
                return Err(Error::config("preprocess.image_size must be at least 8x8"));
            }
        }
        self.ensemble.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }
}
