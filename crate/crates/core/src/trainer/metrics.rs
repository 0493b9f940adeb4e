//! Per-gradient-step metrics (JSONL) and the rolling-window plot export.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of `metrics.jsonl`. Wall-clock quantities live in the separate
/// timing log so this file is a pure function of config and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub global_step: u64,
    pub inner_step: usize,
    pub seed: u64,
    pub method: String,
    pub loss: f64,
    pub grad_norm: f64,
    pub reward_mean: f64,
    pub reward_max: f64,
    pub reward_std: f64,
    pub completion_len_mean: f64,
    pub nfe_sampling: u64,
    pub nfe_likelihood: u64,
}

/// Throughput line for `timing.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimingRecord {
    pub step: u64,
    pub elapsed_secs: f64,
    pub tokens_per_sec: f64,
}

/// Append-only JSONL writer.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(JsonlWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append<S: Serialize>(&mut self, rec: &S) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub const PLOT_WINDOW: usize = 50;

/// Rolling-window plot rows: `(step, reward_mean, reward_std_window50,
/// completion_len_mean)`. Means and std are over the trailing
/// `PLOT_WINDOW` records (fewer at the start); std is the population std of
/// the per-step reward means.
pub fn plot_rows(records: &[MetricsRecord]) -> Vec<(u64, f64, f64, f64)> {
    (0..records.len())
        .map(|i| {
            let win = &records[(i + 1).saturating_sub(PLOT_WINDOW)..=i];
            let n = win.len() as f64;
            let mean = win.iter().map(|r| r.reward_mean).sum::<f64>() / n;
            let var = win
                .iter()
                .map(|r| (r.reward_mean - mean).powi(2))
                .sum::<f64>()
                / n;
            let len = win.iter().map(|r| r.completion_len_mean).sum::<f64>() / n;
            (records[i].step, mean, var.sqrt(), len)
        })
        .collect()
}

pub fn write_plot_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "step",
        "reward_mean",
        "reward_std_window50",
        "completion_len_mean",
    ])
    .map_err(|e| csv_err(path, e))?;
    for (step, mean, std, len) in plot_rows(records) {
        w.write_record([
            step.to_string(),
            format!("{mean:.6}"),
            format!("{std:.6}"),
            format!("{len:.6}"),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Mean of `reward_mean` over records `[from, to)`.
pub fn window_mean(records: &[MetricsRecord], from: usize, to: usize) -> Option<f64> {
    let to = to.min(records.len());
    if from >= to {
        return None;
    }
    Some(records[from..to].iter().map(|r| r.reward_mean).sum::<f64>() / (to - from) as f64)
}
