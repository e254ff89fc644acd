use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::client::{derive_seed, Client, ClientModel, Sample, Trunk};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Mode};
use crate::harness::metrics::{write_summary, MetricsRecord, MetricsSink};
use crate::harness::synth::{generate_clients, ClientDataset};
use crate::scene::{EmbeddingProvider, HashEmbeddingProvider};
use crate::server::{run_round, AggregationMode, ClientRoundMetrics};
use crate::tensor_io;

/// Clients, server state and data of one run.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub datasets: Vec<ClientDataset>,
    /// one client per dataset, or a single pooled client in centralized mode
    pub clients: Vec<Client<f64>>,
    pub global: Trunk<f64>,
    pub round: usize,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = config.effective_model();
        let datasets = generate_clients(config.clients, &model, &config.data, config.seed)?;
        Self::with_datasets(config, datasets)
    }

    pub fn with_datasets(config: ExperimentConfig, datasets: Vec<ClientDataset>) -> Result<Self> {
        config.validate()?;
        if datasets.len() != config.clients {
            return Err(Error::Config(format!(
                "expected {} client datasets, found {}",
                config.clients,
                datasets.len()
            )));
        }
        let model_cfg = config.effective_model();
        let train_cfg = config.effective_train();
        let provider: Arc<dyn EmbeddingProvider<f64>> =
            Arc::new(HashEmbeddingProvider::new(model_cfg.dim, config.seed));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX, 2));
        let global = Trunk::new(&model_cfg, &mut rng)?;

        let build = |id: usize, vocab: Vec<String>, train: Vec<Sample<f64>>, val: Vec<Sample<f64>>| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX, 3));
            let model = ClientModel::new(model_cfg, provider.clone(), vocab, &mut rng)?;
            Client::new(id, model, train, val, train_cfg)
        };
        let clients = match config.mode {
            Mode::Centralized => {
                let mut vocab: Vec<String> = Vec::new();
                for d in &datasets {
                    for w in &d.spec.vocabulary {
                        if !vocab.contains(w) {
                            vocab.push(w.clone());
                        }
                    }
                }
                let train = datasets.iter().flat_map(|d| d.train.clone()).collect();
                let val = datasets.iter().flat_map(|d| d.val.clone()).collect();
                vec![build(0, vocab, train, val)?]
            }
            _ => datasets
                .iter()
                .enumerate()
                .map(|(i, d)| build(i, d.spec.vocabulary.clone(), d.train.clone(), d.val.clone()))
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            config,
            datasets,
            clients,
            global,
            round: 0,
        })
    }

    /// Runs the next round and returns its metrics.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let start = Instant::now();
        let round = self.round + 1;
        let mode = self.config.aggregation().unwrap_or(AggregationMode::Eda);
        let outcome = run_round(&mut self.clients, &self.global, round, mode)?;
        self.global = outcome.global;
        let rec = outcome.record;
        let clients = match self.config.mode {
            Mode::Centralized => {
                let pooled = &rec.clients[0];
                let c = &self.clients[0];
                let delta = c.config.huber_delta;
                self.datasets
                    .iter()
                    .enumerate()
                    .map(|(i, d)| {
                        let val_loss = c.model.evaluate(&d.val, delta).map_err(|e| Error::Client {
                            round,
                            client: i,
                            source: Box::new(e),
                        })?;
                        Ok(ClientRoundMetrics {
                            client_id: i,
                            val_loss,
                            ..pooled.clone()
                        })
                    })
                    .collect::<Result<_>>()?
            }
            _ => rec.clients,
        };
        self.round = round;
        Ok(MetricsRecord {
            round,
            mode: self.config.mode,
            weights: rec.weights,
            similarity: rec.similarity,
            mean_off_diagonal: rec.mean_off_diagonal,
            global_trunk_hash: rec.global_trunk_hash,
            clients,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        })
    }

    /// Writes every client's checkpoint and the global trunk into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        tensor_io::write_file(&dir.join("global_trunk.dgnt"), &self.global.snapshot())?;
        for c in &self.clients {
            c.save_checkpoint(&dir.join(format!("client_{}", c.id)))?;
        }
        Ok(())
    }

    /// Restores a checkpoint written by [`Experiment::save_checkpoint`].
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<()> {
        self.global.load(&tensor_io::read_file(&dir.join("global_trunk.dgnt"))?)?;
        for c in &mut self.clients {
            c.load_checkpoint(&dir.join(format!("client_{}", c.id)))?;
        }
        self.round = self.clients.first().map_or(0, |c| c.round);
        Ok(())
    }

    /// Validation loss per original client dataset.
    pub fn validation_losses(&self) -> Result<Vec<f64>> {
        match self.config.mode {
            Mode::Centralized => {
                let c = &self.clients[0];
                self.datasets
                    .iter()
                    .map(|d| c.model.evaluate(&d.val, c.config.huber_delta))
                    .collect()
            }
            _ => self.clients.iter().map(|c| c.validation_loss()).collect(),
        }
    }
}

pub struct ExperimentRun {
    pub records: Vec<MetricsRecord>,
    pub experiment: Experiment,
}

/// Runs all configured rounds. With `out` set, metrics are written after
/// every round, checkpoints at the configured cadence and at the end, and the
/// effective configuration is echoed to `config.toml`.
pub fn run_experiment(config: ExperimentConfig, out: Option<&Path>) -> Result<ExperimentRun> {
    let exp = Experiment::new(config)?;
    run_prepared(exp, out)
}

pub fn run_prepared(mut exp: Experiment, out: Option<&Path>) -> Result<ExperimentRun> {
    let mut sink = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cfg_path = dir.join("config.toml");
            fs::write(&cfg_path, exp.config.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
            Some(MetricsSink::create(dir)?)
        }
        None => None,
    };
    let mut records = Vec::with_capacity(exp.config.rounds);
    for _ in 0..exp.config.rounds {
        let rec = exp.step()?;
        log::info!(
            "round {}: mean val loss {:.5}",
            rec.round,
            rec.clients.iter().map(|c| c.val_loss).sum::<f64>() / rec.clients.len() as f64
        );
        if let Some(s) = sink.as_mut() {
            s.push(&rec)?;
        }
        if let Some(dir) = out {
            let every = exp.config.checkpoint_every;
            if every > 0 && rec.round % every == 0 {
                exp.save_checkpoint(&dir.join("checkpoints").join(format!("round_{:04}", rec.round)))?;
            }
        }
        records.push(rec);
    }
    if let Some(dir) = out {
        exp.save_checkpoint(&dir.join("checkpoint"))?;
        write_summary(&records, dir)?;
    }
    Ok(ExperimentRun {
        records,
        experiment: exp,
    })
}
