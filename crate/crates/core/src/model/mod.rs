//! The classifier: convolutional LSTM cells, self- and inter-attention, a
//! two-layer encoder over the first day, a forward decoder over the second,
//! and for the variational model a backward decoder over the reversed second
//! day whose states drive a Gaussian posterior over a per-step latent.

mod attention;
mod cells;
mod config;
mod network;
mod params;

pub use attention::{inter_attend, self_attend, Attended, EncoderMemory, Mixer};
pub use cells::{convlstm_step, dense_lstm_step, Cell, ConvLstmParams, DenseLstmParams, LstmState};
pub use config::{ModelConfig, ModelKind};
pub use network::{
    aligned_backward_index, decode_day_backward, encode_day, forward_pass, latent_features, Gaussian, Mode, Model,
    ModelOutput, LOGVAR_BOUND,
};
pub use params::{
    checkpoint_from_str, checkpoint_to_string, layout, load_checkpoint, save_checkpoint, Bound, ParamSpec, ParamStore,
    CHECKPOINT_FORMAT, CHECKPOINT_VERSION, CLASSES, GATES,
};

use thiserror::Error;

use crate::diffcore::DiffError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("unknown model kind `{0}` (expected clvsa, clsa, seq2seq, lstm or cnn)")]
    UnknownKind(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{what} must be a vector, got shape {got:?}")]
    Dimension { what: &'static str, got: Vec<usize> },
    #[error("inter-attention needs at least one encoder state")]
    NoEncoderStates,
    #[error("the backward decoder exists only in the variational model")]
    BackwardDisabled,
    #[error("day pair has no frames")]
    EmptyDay,
    #[error("day B has {forward} frames but its reversal has {backward}")]
    DayLength { forward: usize, backward: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Diff(#[from] DiffError),
}
