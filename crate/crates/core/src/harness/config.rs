use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::harness::synth::SynthConfig;
use crate::server::AggregationMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Eda,
    FedAvg,
    /// all client data pooled into one model
    Centralized,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eda" => Ok(Mode::Eda),
            "fedavg" => Ok(Mode::FedAvg),
            "centralized" => Ok(Mode::Centralized),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_iosp: bool,
    pub no_dgmoe: bool,
    pub no_eda: bool,
}

/// Complete description of a run. Serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub clients: usize,
    pub rounds: usize,
    pub mode: Mode,
    /// write checkpoints every this many rounds; 0 keeps only the final one
    pub checkpoint_every: usize,
    pub ablation: Ablation,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SynthConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            clients: 4,
            rounds: 50,
            mode: Mode::Eda,
            checkpoint_every: 0,
            ablation: Ablation::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: SynthConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Model configuration with the ablation switches applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model;
        m.use_dgmoe = !self.ablation.no_dgmoe;
        m.scene.enabled = !self.ablation.no_iosp;
        m
    }

    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    /// Aggregation rule used by the server; `None` for centralized training.
    pub fn aggregation(&self) -> Option<AggregationMode> {
        match self.mode {
            Mode::Centralized => None,
            Mode::FedAvg => Some(AggregationMode::FedAvg),
            Mode::Eda if self.ablation.no_eda => Some(AggregationMode::FedAvg),
            Mode::Eda => Some(AggregationMode::Eda),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.rounds == 0 {
            return Err(Error::Config("clients and rounds must be >= 1".into()));
        }
        self.effective_model().validate()?;
        self.effective_train().validate()?;
        self.data.validate()
    }
}
