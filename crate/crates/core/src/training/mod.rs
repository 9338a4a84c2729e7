//! Subject-independent pretraining and KL-regularized single-night
//! personalization, with Adam updates and strategy-based freezing.

mod adam;
mod manifest;
mod personalize;
mod pretrain;
mod session;

use std::collections::BTreeMap;

use seqsleep_autodiff::{AutodiffError, Tensor};
use thiserror::Error;

use crate::evaluation::EvalError;
use crate::losses::LossError;
use crate::model::{Checkpoint, ModelError, ModelParams};
use crate::preprocessing::PreprocessError;

pub use adam::AdamState;
pub use manifest::{sha256_hex, Manifest, ManifestEntry, MANIFEST_SCHEMA_VERSION};
pub use personalize::{finetune_plain, personalize, FinetuneConfig, PersonalizeOutcome, Snapshot};
pub use pretrain::{pretrain, validation_accuracy, EpochLog, PretrainConfig, PretrainOutcome};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("gradient supplied for frozen parameter `{0}`")]
    FrozenGradient(String),
    #[error("no gradient for trainable parameter `{0}`")]
    MissingGradient(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Diverged { epoch: usize, last_good: Box<Checkpoint> },
    #[error("empty training set: {0}")]
    EmptyTrainingSet(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// One Adam update of `params` from `grads`, which must cover exactly the
/// trainable parameters of `state`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainingError> {
    state.update(params, grads, lr)
}

#[cfg(test)]
mod tests;
