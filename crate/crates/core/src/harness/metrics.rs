//! Per-round metrics and their CSV / JSON exports.
//!
//! CSV columns, one row per round per client:
//!
//! ```text
//! round, client_id, val_loss, density_overall,
//! density_layer_0 .. density_layer_{L-1},
//! count_l{l}_e{k} for every layer l and expert k (row-major)
//! ```
//!
//! Wall-clock time is kept out of the CSV so that reruns are byte-identical;
//! it is only written to the round log.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::Mode;
use crate::server::{ClientRoundMetrics, LayerSimilarity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub mode: Mode,
    /// per-layer aggregation weights in client-id order
    pub weights: Vec<Vec<f64>>,
    pub similarity: Vec<LayerSimilarity>,
    pub mean_off_diagonal: Vec<f64>,
    pub global_trunk_hash: String,
    pub clients: Vec<ClientRoundMetrics>,
    pub wall_clock_secs: f64,
}

impl MetricsRecord {
    pub fn layers(&self) -> usize {
        self.clients.first().map_or(0, |c| c.density.per_layer.len())
    }

    pub fn experts(&self) -> usize {
        let l = self.layers();
        if l == 0 {
            0
        } else {
            self.clients[0].counts.len() / l
        }
    }

    /// Round-log line without the wall clock, for byte-level comparisons.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.wall_clock_secs = 0.0;
        Ok(serde_json::to_string(&copy)?)
    }
}

pub fn csv_header(layers: usize, experts: usize) -> Vec<String> {
    let mut h: Vec<String> = ["round", "client_id", "val_loss", "density_overall"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..layers).map(|l| format!("density_layer_{l}")));
    for l in 0..layers {
        h.extend((0..experts).map(|k| format!("count_l{l}_e{k}")));
    }
    h
}

pub fn csv_rows(record: &MetricsRecord) -> Vec<Vec<String>> {
    record
        .clients
        .iter()
        .map(|c| {
            let mut row = vec![
                record.round.to_string(),
                c.client_id.to_string(),
                c.val_loss.to_string(),
                c.density.overall.to_string(),
            ];
            row.extend(c.density.per_layer.iter().map(|d| d.to_string()));
            row.extend(c.counts.iter().map(|n| n.to_string()));
            row
        })
        .collect()
}

/// Aggregate view written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: usize,
    pub mode: Mode,
    pub final_val_loss: Vec<f64>,
    pub mean_final_val_loss: f64,
    /// mean of the CSV `density_overall` column
    pub mean_density: f64,
    pub mean_density_per_layer: Vec<f64>,
    /// `[round][layer][client]`
    pub weights: Vec<Vec<Vec<f64>>>,
    pub final_similarity: Vec<LayerSimilarity>,
}

pub fn summarize(records: &[MetricsRecord]) -> Result<Summary> {
    let last = records.last().ok_or(Error::Empty("summarize: no records"))?;
    let final_val_loss: Vec<f64> = last.clients.iter().map(|c| c.val_loss).collect();
    let rows: Vec<&ClientRoundMetrics> = records.iter().flat_map(|r| &r.clients).collect();
    let n = rows.len() as f64;
    let layers = last.layers();
    Ok(Summary {
        rounds: records.len(),
        mode: last.mode,
        mean_final_val_loss: final_val_loss.iter().sum::<f64>() / final_val_loss.len() as f64,
        final_val_loss,
        mean_density: rows.iter().map(|c| c.density.overall).sum::<f64>() / n,
        mean_density_per_layer: (0..layers)
            .map(|l| rows.iter().map(|c| c.density.per_layer[l]).sum::<f64>() / n)
            .collect(),
        weights: records.iter().map(|r| r.weights.clone()).collect(),
        final_similarity: last.similarity.clone(),
    })
}

/// Streams records to `metrics.csv` and `rounds.jsonl` as rounds finish.
pub struct MetricsSink {
    csv: csv::Writer<fs::File>,
    log: fs::File,
    log_path: std::path::PathBuf,
    header_written: bool,
}

impl MetricsSink {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("metrics.csv");
        let log_path = dir.join("rounds.jsonl");
        Ok(Self {
            csv: csv::Writer::from_writer(fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?),
            log: fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
            log_path,
            header_written: false,
        })
    }

    pub fn push(&mut self, record: &MetricsRecord) -> Result<()> {
        if !self.header_written {
            self.csv.write_record(csv_header(record.layers(), record.experts()))?;
            self.header_written = true;
        }
        for row in csv_rows(record) {
            self.csv.write_record(row)?;
        }
        self.csv.flush().map_err(|e| Error::io("metrics.csv", e))?;
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.log.write_all(&line).map_err(|e| Error::io(&self.log_path, e))
    }
}

/// Writes `metrics.csv` and `summary.json` for a complete record stream.
pub fn export_metrics(records: &[MetricsRecord], dir: &Path) -> Result<()> {
    let first = records.first().ok_or(Error::Empty("export_metrics: no records"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_writer(fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?);
    w.write_record(csv_header(first.layers(), first.experts()))?;
    for r in records {
        for row in csv_rows(r) {
            w.write_record(row)?;
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    write_summary(records, dir)
}

pub fn write_summary(records: &[MetricsRecord], dir: &Path) -> Result<()> {
    let path = dir.join("summary.json");
    let text = serde_json::to_vec_pretty(&summarize(records)?)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_round_log(path: &Path) -> Result<Vec<MetricsRecord>> {
    crate::harness::synth::read_jsonl(path)
}
