//! Ensembles: bagging, boosting, the cascade layer, stacking and the
//! prediction files they exchange.

pub mod bagging;
pub mod boosting;
pub mod cascade;
pub mod predfile;
pub mod stacking;

pub use bagging::bootstrap_sample;
pub use boosting::{boosting_update, fill_missing_errors, BoostError, SampleWeights};
pub use cascade::{cascade_forward, donor_average, CascadeProjection};
pub use predfile::{
    decode_predictions, encode_predictions, manifest_path, read_manifest, read_predictions, write_predictions,
    PredFileError, PredManifest,
};
pub use stacking::{
    attention_stack_forward, stack_combine, train_stacker, StackData, StackError, StackMode, StackReport,
    StackShape, StackerConfig, StackerParams,
};
