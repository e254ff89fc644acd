//! Experiment driver: configuration, synthetic client tasks, the round loop
//! and metrics export.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod synth;

pub use config::{Ablation, ExperimentConfig, Mode};
pub use experiment::{run_experiment, run_prepared, Experiment, ExperimentRun};
pub use metrics::{export_metrics, read_round_log, summarize, MetricsRecord, MetricsSink, Summary};
pub use synth::{generate_clients, ClientDataset, SynthConfig, SyntheticTaskSpec};
