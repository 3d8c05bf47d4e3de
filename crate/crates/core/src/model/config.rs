use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::marketdata::{ATTRIBUTES, STEPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    /// Output channels of every recurrent cell.
    pub channels: usize,
    pub kernel_width: usize,
    pub z_dim: usize,
    pub variational: bool,
    pub attention: bool,
    /// Convolutional gates; `false` uses dense gates over flattened grids.
    pub convolutional: bool,
    /// Run an encoder over the first day of each pair.
    pub encoder: bool,
    /// `false` selects the per-frame convolutional classifier.
    pub recurrent: bool,
    /// Let the backward decoder attend to the encoder like the forward one.
    pub backward_inter_attention: bool,
    pub dropout: f64,
    pub classifier_hidden: [usize; 2],
    pub prior_hidden: usize,
    pub posterior_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            channels: 32,
            kernel_width: 3,
            z_dim: 64,
            variational: true,
            attention: true,
            convolutional: true,
            encoder: true,
            recurrent: true,
            backward_inter_attention: true,
            dropout: 0.1,
            classifier_hidden: [200, 50],
            prior_hidden: 512,
            posterior_hidden: 256,
        }
    }
}

impl ModelConfig {
    /// A desk-sized CLVSA: same topology, narrow layers.
    pub fn small() -> Self {
        Self {
            channels: 4,
            z_dim: 8,
            classifier_hidden: [32, 16],
            prior_hidden: 32,
            posterior_hidden: 32,
            ..Self::default()
        }
    }

    /// Length of a flattened hidden grid.
    pub fn hidden_len(&self) -> usize {
        ATTRIBUTES * STEPS * self.channels
    }

    pub fn uses_inter_attention(&self) -> bool {
        self.attention && self.encoder
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.layers == 0 || self.channels == 0 {
            return bad("layers and channels must be positive");
        }
        if self.kernel_width % 2 == 0 {
            return bad("kernel_width must be odd");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.classifier_hidden.contains(&0) {
            return bad("classifier widths must be positive");
        }
        if self.variational && (self.z_dim == 0 || self.prior_hidden == 0 || self.posterior_hidden == 0) {
            return bad("z_dim and Gaussian head widths must be positive");
        }
        if !self.recurrent && (self.variational || self.attention || self.encoder) {
            return bad("the per-frame classifier has no encoder, attention or latent variable");
        }
        if self.encoder && !self.attention {
            return bad("the encoder reaches the decoder only through inter-attention");
        }
        Ok(())
    }
}

/// The five model variants compared in experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Clvsa,
    Clsa,
    Seq2seq,
    Lstm,
    Cnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Clvsa,
        ModelKind::Clsa,
        ModelKind::Seq2seq,
        ModelKind::Lstm,
        ModelKind::Cnn,
    ];

    /// Sets the variant's switches on top of `base`, keeping its sizes.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        let (variational, attention, convolutional, encoder, recurrent) = match self {
            ModelKind::Clvsa => (true, true, true, true, true),
            ModelKind::Clsa => (false, true, true, true, true),
            ModelKind::Seq2seq => (false, true, false, true, true),
            ModelKind::Lstm => (false, false, false, false, true),
            ModelKind::Cnn => (false, false, true, false, false),
        };
        c.variational = variational;
        c.attention = attention;
        c.convolutional = convolutional;
        c.encoder = encoder;
        c.recurrent = recurrent;
        c
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Clvsa => "clvsa",
            ModelKind::Clsa => "clsa",
            ModelKind::Seq2seq => "seq2seq",
            ModelKind::Lstm => "lstm",
            ModelKind::Cnn => "cnn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase();
        let key = key.trim_end_matches("_s");
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| ModelError::UnknownKind(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kind_validates() {
        for k in ModelKind::ALL {
            k.apply(&ModelConfig::default()).validate().unwrap();
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert_eq!("LSTM_s".parse::<ModelKind>().unwrap(), ModelKind::Lstm);
        assert!("transformer".parse::<ModelKind>().is_err());
    }

    #[test]
    fn full_size_hidden_grid() {
        assert_eq!(ModelConfig::default().hidden_len(), 960);
    }

    #[test]
    fn rejects_inconsistent_switches() {
        let c = ModelConfig {
            recurrent: false,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            kernel_width: 4,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
