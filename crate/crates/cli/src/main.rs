use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dgfed::harness::{
    export_metrics, generate_clients, read_round_log, run_prepared, ClientDataset, Experiment,
    ExperimentConfig, Mode,
};

#[derive(Parser)]
#[command(name = "dgfed", version, about = "Federated dual-gated MoE policy simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic client datasets as JSON lines.
    Generate {
        #[command(flatten)]
        opts: ConfigOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run federated (or centralized) training.
    Train {
        #[command(flatten)]
        opts: ConfigOpts,
        /// directory written by `generate`; data is regenerated from the seed otherwise
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validation loss of every client from a training output directory.
    Eval {
        /// output directory of `train`
        #[arg(long)]
        run: PathBuf,
        /// checkpoint directory; defaults to `<run>/checkpoint`
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Rebuild `metrics.csv` and `summary.json` from a round log.
    Export {
        /// `rounds.jsonl` written by `train`
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigOpts {
    /// TOML config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    huber_delta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    action_dim: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// eda, fedavg or centralized
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    no_iosp: bool,
    #[arg(long)]
    no_dgmoe: bool,
    #[arg(long)]
    no_eda: bool,
}

impl ConfigOpts {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $($path:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$field { cfg.$($path).+ = v; })*
            };
        }
        set!(
            seed => seed,
            clients => clients,
            rounds => rounds,
            local_epochs => train.local_epochs,
            batch_size => train.batch_size,
            lr => train.lr,
            huber_delta => train.huber_delta,
            lambda => model.lambda,
            layers => model.layers,
            experts => model.experts,
            dim => model.dim,
            heads => model.heads,
            action_dim => model.action_dim,
            horizon => model.horizon,
            checkpoint_every => checkpoint_every,
            mode => mode,
        );
        cfg.ablation.no_iosp |= self.no_iosp;
        cfg.ablation.no_dgmoe |= self.no_dgmoe;
        cfg.ablation.no_eda |= self.no_eda;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_datasets(dir: &Path, n: usize) -> Result<Vec<ClientDataset>> {
    (0..n)
        .map(|i| {
            let d = dir.join(format!("client_{i}"));
            ClientDataset::read(&d).with_context(|| format!("reading {}", d.display()))
        })
        .collect()
}

fn experiment(cfg: ExperimentConfig, data: Option<&Path>) -> Result<Experiment> {
    Ok(match data {
        Some(dir) => {
            let ds = load_datasets(dir, cfg.clients)?;
            Experiment::with_datasets(cfg, ds)?
        }
        None => Experiment::new(cfg)?,
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate { opts, out } => {
            let cfg = opts.resolve()?;
            let ds = generate_clients(cfg.clients, &cfg.effective_model(), &cfg.data, cfg.seed)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            for (i, d) in ds.iter().enumerate() {
                d.write(&out.join(format!("client_{i}")))?;
                println!(
                    "client {i}: cluster {}, {} train / {} val samples, hash {}",
                    d.spec.cluster,
                    d.train.len(),
                    d.val.len(),
                    d.hash()?
                );
            }
        }
        Command::Train { opts, data, out } => {
            let cfg = opts.resolve()?;
            let exp = experiment(cfg, data.as_deref())?;
            let run = run_prepared(exp, Some(&out))?;
            let last = run.records.last().context("no rounds were run")?;
            for c in &last.clients {
                println!(
                    "client {}: val_loss {:.6} density {:.4}",
                    c.client_id, c.val_loss, c.density.overall
                );
            }
            println!("metrics written to {}", out.display());
        }
        Command::Eval { run, checkpoint, data } => {
            let cfg = ExperimentConfig::load(&run.join("config.toml"))?;
            let mut exp = experiment(cfg, data.as_deref())?;
            let ckpt = checkpoint.unwrap_or_else(|| run.join("checkpoint"));
            if !ckpt.exists() {
                bail!("checkpoint {} not found", ckpt.display());
            }
            exp.load_checkpoint(&ckpt)?;
            println!("round {}", exp.round);
            for (i, l) in exp.validation_losses()?.iter().enumerate() {
                println!("client {i}: val_loss {l:.6}");
            }
        }
        Command::Export { log, out } => {
            let records = read_round_log(&log)?;
            export_metrics(&records, &out)?;
            println!("{} rounds exported to {}", records.len(), out.display());
        }
    }
    Ok(())
}
