//! Dual image/text encoder with a trainable temperature, and its checkpoint format.

mod checkpoint;
mod config;
mod encoder;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, TrainMeta, CHECKPOINT_VERSION, MAGIC,
};
pub use config::{EncoderConfig, Pooling, TowerKind};
pub use encoder::{param_shapes, random_unit_rows, similarity_matrix, Bound, DualEncoder, ParamGroup, TAU_PARAM};

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {supported})")]
    VersionSkew { found: u32, supported: u32 },
    #[error("truncated checkpoint {0}")]
    Truncated(String),
    #[error("tensor '{name}' has shape {found:?}, config expects {expected:?}")]
    TensorShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint lacks tensor '{0}'")]
    MissingTensor(String),
    #[error("checkpoint has unexpected tensor '{0}'")]
    UnexpectedTensor(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
