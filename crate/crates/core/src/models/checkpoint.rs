// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON checkpoints: config plus a flat parameter vector.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::train::{TrainConfig, TrainReport};
use super::transformer::Model;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "attn-relevance-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub report: Option<TrainReport>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(model: &Model, train: Option<TrainConfig>, report: Option<TrainReport>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            train,
            report,
            params: model.flat_parameters(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        Model::from_flat(self.config.clone(), &self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
