//! The recognizer: channel compensation, CNN embedding, inter-antenna
//! transformer, temporal LSTM and classifier, plus the ablation variants,
//! complexity accounting and the checkpoint format.

mod checkpoint;
mod compensation;
mod complexity;
mod config;
mod layers;
mod layout;
mod network;
#[cfg(test)]
mod tests;

pub use checkpoint::{
    checkpoint_scalar_count, decode_checkpoint, encode_checkpoint, load_checkpoint,
    save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use compensation::{cc_apply, CompensationTensor};
pub use complexity::{conv_params, count_params, estimate_flops, linear_params};
pub use config::{ConvLayer, ModelConfig, Variant};
pub use layout::{init_params, param_layout, Init, ParamSpec};
pub use network::{forward_with, Camd, ForwardTrace};

use std::path::Path;

use thiserror::Error;

use crate::diffcore::DiffError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("non-finite input frame")]
    NonFinite,
    #[error("bad input: {0}")]
    Input(String),
    #[error("not a checkpoint (bad magic, expected \"CMDW\")")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("parameter {0:?} is missing")]
    MissingParam(String),
    #[error("parameter {0:?} appears twice")]
    DuplicateParam(String),
    #[error("parameter {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("checkpoint config: {0}")]
    Json(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ModelError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ModelError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
