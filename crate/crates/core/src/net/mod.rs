//! A small differentiable array core and the cyclically padded residual
//! embedding network built on it.

mod checkpoint;
pub mod gradcheck;
mod model;
pub mod ops;
mod optim;
mod tensor;

use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use model::{
    build_model, polar_input, similarity, Embedding, Gradients, Model, ModelConfig, Tape, Variant,
    ANGULAR_STRIDE, RADIAL_POOL, STAGES,
};
pub use optim::{Optimizer, OptimizerConfig};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: String },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
