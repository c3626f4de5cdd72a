//! Self-describing JSON checkpoint: model config, normalizer, every named
//! tensor with its optimizer moments, and the optimizer step counter.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Normalizer;
use crate::diffcore::ParamStore;
use crate::model::{Gstpp, ModelConfig, ModelError};

pub const FORMAT: &str = "gstpp-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot read or write checkpoint: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("not a {FORMAT} v{VERSION} file (found `{0}`)")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub normalizer: Normalizer,
    /// Epoch whose parameters these are (0 = initialization).
    pub epoch: usize,
    pub seed: u64,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Gradient buffers are not stored, so they are cleared here.
    pub fn new(model: ModelConfig, normalizer: Normalizer, mut params: ParamStore, epoch: usize, seed: u64) -> Self {
        params.zero_grad();
        Checkpoint { format: FORMAT.to_string(), version: VERSION, model, normalizer, epoch, seed, params }
    }

    pub fn to_json(&self) -> Result<String, CheckpointError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, CheckpointError> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(CheckpointError::Format(format!("{} v{}", ck.format, ck.version)));
        }
        ck.build()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }

    /// Model handles for the stored parameters; fails if the parameter
    /// layout does not match the stored config.
    pub fn build(&self) -> Result<Gstpp, ModelError> {
        Gstpp::attach(&self.model, &self.params)
    }
}
