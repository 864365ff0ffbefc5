//! Learned synchrony scorer: autodiff tape, model, objectives, optimizer,
//! training loops and checkpoints.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tape;
pub mod train;

use thiserror::Error;

pub use checkpoint::{predict_score, Checkpoint};
pub use loss::{ccc, ccc_loss, contrastive_loss};
pub use model::{BranchOutputs, InputNorm, Mode, Model, ModelConfig};
pub use train::{train_stage1, train_stage2, Example, Init, Stage, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation after layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("non-finite loss in epoch {epoch}")]
    NonFiniteLoss {
        epoch: usize,
        /// Best checkpoint reached before the failure, if any.
        last_finite: Option<Box<Checkpoint>>,
    },
    #[error("checkpoint is stage {actual}, expected stage {expected}")]
    CheckpointStageMismatch { expected: u8, actual: u8 },
    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
