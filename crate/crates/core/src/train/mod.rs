//! Stratified splits, AdamW training on cross-entropy, and per-SNR
//! evaluation with confusion matrices and CSV output.

mod eval;
mod split;
mod trainer;

pub use eval::{accuracy, argmax, evaluate, predict, EvalReport, SnrResult, DEFAULT_LOW_SNR_DB};
pub use split::{split_dataset, Split, SplitSpec, MIN_STRATUM};
pub use trainer::{
    batch_gradients, frames_tensor, labels_of, mean_loss, train, train_with, EpochRecord,
    TrainConfig, TrainLog, GRAD_CHUNK,
};

use std::path::Path;

use thiserror::Error;

use crate::model::ModelError;
use crate::sigsynth::SynthError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("split: {0}")]
    Split(String),
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("no training frames")]
    EmptyData,
    #[error("frame index {index} out of range for {len} frames")]
    Index { index: usize, len: usize },
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("json: {0}")]
    Json(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
