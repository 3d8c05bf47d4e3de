use std::path::Path;

use serde::{Deserialize, Serialize};

use clvsa::backtest::CostModel;
use clvsa::marketdata::{SynthConfig, WalkForward, DEFAULT_MAX_GAP_DAYS};
use clvsa::model::{ModelConfig, ModelKind};
use clvsa::trainer::{BacktestOptions, DataOptions, TrainConfig};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub frames_per_day: usize,
    pub split: WalkForward,
    /// Pairs whose days are further apart than this are dropped.
    pub max_gap_days: i64,
    pub min_transitions: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let opts = DataOptions::default();
        Self {
            frames_per_day: 48,
            split: WalkForward::default(),
            max_gap_days: DEFAULT_MAX_GAP_DAYS,
            min_transitions: opts.min_transitions,
        }
    }
}

impl DataConfig {
    pub fn options(&self) -> DataOptions {
        DataOptions {
            max_gap_days: self.max_gap_days,
            min_transitions: self.min_transitions,
        }
    }
}

/// The experiment file: one JSON document, every section optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub backtest: BacktestOptions,
    pub synth: SynthConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Training settings with the model section resolved for `kind`.
    pub fn train_config(&self, kind: ModelKind, seed: Option<u64>) -> TrainConfig {
        TrainConfig {
            model: kind.apply(&self.model),
            seed: seed.unwrap_or(self.train.seed),
            ..self.train.clone()
        }
    }
}

/// Everything a command resolved before computing, written first to `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub model_kind: Option<ModelKind>,
    pub config: ExperimentConfig,
    pub cost: CostModel,
    pub inputs: Vec<String>,
    pub out: String,
    pub seeds: Vec<u64>,
}
