//! Desk-scale captioning stack: procedural paired scenes, a frozen-encoder /
//! trainable-bridge captioner, the training loop, decoding, and checkpoints.
//! Everything is deterministic under a seed, including batch derivation and
//! the optimizer, so whole runs can be replayed bit for bit.

pub mod checkpoint;
pub mod data;
pub mod generate;
pub mod model;
pub mod train;

use thiserror::Error;

use crate::attnpool::AttnError;
use crate::numio::NumioError;
use crate::objective::ObjectiveError;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{make_batch, make_dataset, SceneGenConfig, TripletBatch};
pub use generate::{generate, next_token_logprobs};
pub use model::{forward, ForwardOptions, ForwardPass, ModelConfig, ToyModel};
pub use train::{
    one_cycle_lr, train, train_span, train_with, AdamMoments, Snapshot, StepMetrics,
    TrainMode, TrainOptions, TrainRun, TrainState,
};

#[derive(Debug, Error)]
pub enum ToycapError {
    #[error("model: {0}")]
    Model(String),
    #[error("scene: {0}")]
    Scene(String),
    #[error("image {image} position {pos}: token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { image: usize, pos: usize, id: usize, vocab: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at step {step}: loss {value}")]
    Diverged { step: usize, value: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("beam width must be at least 1")]
    BeamWidth,
    #[error(transparent)]
    Attn(#[from] AttnError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Numio(#[from] NumioError),
}
