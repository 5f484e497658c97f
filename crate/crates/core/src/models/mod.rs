//! Classifier architectures, losses and the training loop.

pub mod attention;
pub mod chaining;
pub mod cnn;
pub mod config;
pub mod layers;
pub mod loss;
pub mod lstm;
pub mod moe;
pub mod multiscale;
pub mod net;
pub mod train;

use thiserror::Error;

use crate::tensor::TensorError;

pub use attention::{AttentionMode, AttentionPool, Consensus};
pub use chaining::{Chaining, ChainingConfig};
pub use cnn::{CnnConfig, Filter};
pub use config::{matched_mixtures, AttentionModel, CnnModel, InputDims, LstmModel, ModelConfig, MoeModel};
pub use loss::{compute_loss, LossConfig};
pub use lstm::{EncoderConfig, EncoderMode, LstmVariant, Representation};
pub use moe::Moe;
pub use multiscale::{MultiscaleConfig, MultiscaleMode};
pub use net::{Inputs, Model, Output};
pub use train::{predict, train, EvalSet, TrainConfig, TrainReport, TrainSet};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
