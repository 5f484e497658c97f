//! Multi-label video classification toolkit.
//!
//! * [`tensor`]: reverse-mode autodiff over dense f64 tensors, Adam, checkpoints.
//! * [`ingest`]: record-file framing, example decoding, dataset splits, synthetic data.
//! * [`models`]: MoE, LSTM variants, CNN-over-time, Chaining, attention pooling,
//!   temporal multi-scale models, losses and the training loop.
//! * [`metrics`]: GAP@k, PERR, Hit@1.
//! * [`ensemble`]: bagging, boosting, cascade layer, stacking, prediction files.

pub mod ensemble;
pub mod ingest;
pub mod metrics;
pub mod models;
pub mod tensor;
