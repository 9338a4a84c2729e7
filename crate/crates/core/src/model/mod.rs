//! The sequence-to-sequence staging network: an epoch processing block
//! (filterbank, bidirectional LSTM over spectral columns, attention pooling),
//! a sequence processing block (bidirectional LSTM over epochs) and a softmax
//! layer shared by every position of the sequence.

mod build;
mod checkpoint;
mod forward;
mod params;

pub(crate) use build::{Part, INPUT_OUTPUTS, INPUT_VECTORS};
pub(crate) use forward::argmax_stage;

use std::fmt;
use std::str::FromStr;

use seqsleep_autodiff::AutodiffError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use build::{BuiltModel, Mode, Modes, INPUT_IMAGES};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    batch_images, encode_epochs, epoch_encode, filterbank_forward, forward, forward_batch, sequence_encode, EpochEncoding,
    PosteriorSequence,
};
pub use params::{init_params, select_groups, triangular_filterbank, ModelParams};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("input shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {block} at step {step}")]
    NonFinite { block: &'static str, step: usize },
    #[error("unknown finetuning strategy `{0}` (valid: All, EPB+Softmax, SPB+Softmax, Softmax)")]
    UnknownStrategy(String),
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Frequency bins `F` of the input images.
    pub freq_bins: usize,
    /// Spectral columns `T` of the input images.
    pub frames: usize,
    /// Number of filterbank filters `M`.
    pub filters: usize,
    /// Hidden units per direction of the epoch-level LSTM.
    pub epb_hidden: usize,
    /// Width of the attention projection.
    pub attention_size: usize,
    /// Hidden units per direction of the sequence-level LSTM.
    pub spb_hidden: usize,
    /// Epochs per sequence `L`.
    pub seq_len: usize,
    /// Batch-normalize LSTM gate pre-activations.
    pub recurrent_batch_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            freq_bins: 129,
            frames: 29,
            filters: 32,
            epb_hidden: 64,
            attention_size: 64,
            spb_hidden: 64,
            seq_len: 20,
            recurrent_batch_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let sizes = [
            ("freq_bins", self.freq_bins),
            ("frames", self.frames),
            ("filters", self.filters),
            ("epb_hidden", self.epb_hidden),
            ("attention_size", self.attention_size),
            ("spb_hidden", self.spb_hidden),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.filters >= self.freq_bins {
            return Err(ModelError::InvalidConfig(format!(
                "filters ({}) must be fewer than frequency bins ({})",
                self.filters, self.freq_bins
            )));
        }
        Ok(())
    }
}

/// Parameter groups that finetuning strategies freeze or adapt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Epb,
    Spb,
    Softmax,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Epb, Group::Spb, Group::Softmax];

    /// Group of a parameter or buffer name (`epb.*`, `spb.*`, `softmax.*`).
    pub fn of(name: &str) -> Option<Group> {
        match name.split('.').next()? {
            "epb" => Some(Group::Epb),
            "spb" => Some(Group::Spb),
            "softmax" => Some(Group::Softmax),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Epb => "EPB",
            Group::Spb => "SPB",
            Group::Softmax => "Softmax",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    All,
    EpbSoftmax,
    SpbSoftmax,
    Softmax,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::All, Strategy::EpbSoftmax, Strategy::SpbSoftmax, Strategy::Softmax];

    pub fn trainable_groups(self) -> &'static [Group] {
        match self {
            Strategy::All => &[Group::Epb, Group::Spb, Group::Softmax],
            Strategy::EpbSoftmax => &[Group::Epb, Group::Softmax],
            Strategy::SpbSoftmax => &[Group::Spb, Group::Softmax],
            Strategy::Softmax => &[Group::Softmax],
        }
    }

    pub fn trains(self, group: Group) -> bool {
        self.trainable_groups().contains(&group)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::All => "All",
            Strategy::EpbSoftmax => "EPB+Softmax",
            Strategy::SpbSoftmax => "SPB+Softmax",
            Strategy::Softmax => "Softmax",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "all" => Ok(Strategy::All),
            "epbsoftmax" => Ok(Strategy::EpbSoftmax),
            "spbsoftmax" => Ok(Strategy::SpbSoftmax),
            "softmax" => Ok(Strategy::Softmax),
            _ => Err(ModelError::UnknownStrategy(s.to_string())),
        }
    }
}

impl TryFrom<String> for Strategy {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.name().to_string()
    }
}
