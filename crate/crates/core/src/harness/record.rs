use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::TaskId;
use crate::sparsity::SparsityMetrics;

use super::config::Mode;

/// Bumped whenever the profile CSV columns change.
pub const CSV_VERSION: u32 = 1;
pub const CSV_HEADER_COMMENT: &str = "# metasparse profile v1";
pub const RECORD_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Supervised training from scratch (dense or with a fixed penalty).
    Train,
    /// Meta-training epochs.
    Meta,
    /// Masked fine-tuning (meta-test or a schedule's training under a mask).
    Finetune,
}

/// One epoch of any phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Position across all phases of the run, starting at 0.
    pub step: usize,
    pub phase: Phase,
    /// Epoch within the phase.
    pub epoch: usize,
    /// Prune event the row follows (schedules), 0 otherwise.
    pub stage: usize,
    /// Combined training loss, or the mean query loss for meta epochs.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Penalty strength in effect; empty for phases without a penalty.
    pub lambda: Option<f64>,
    pub parameter_sparsity: f64,
    pub group_sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: u32,
    pub config_hash: String,
    pub mode: Mode,
    pub label: String,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    pub final_sparsity: SparsityMetrics,
    /// Indices of the all-zero groups of each governed tensor at the end of the run.
    pub zero_groups: BTreeMap<String, Vec<usize>>,
    /// Test-split loss per task.
    pub test: BTreeMap<TaskId, f64>,
    /// Final penalty strength (fixed or meta-learned).
    pub lambda: Option<f64>,
    /// Mask sparsity the schedule realized.
    pub achieved_budget: Option<f64>,
    /// Why meta-training stopped.
    pub stop: Option<String>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn mean_test_loss(&self) -> f64 {
        self.test.values().sum::<f64>() / self.test.len().max(1) as f64
    }

    pub fn max_step(&self) -> usize {
        self.rows.iter().map(|r| r.step).max().unwrap_or(0)
    }
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        // A constant column reports exactly that constant with zero spread.
        if values.iter().all(|&v| v == values[0]) {
            return Self { mean: values[0], std: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Self { mean, std: var.sqrt() }
    }
}

/// Cross-seed aggregate of one config. Contains no timing so it is a pure
/// function of the run results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: u32,
    pub config_hash: String,
    pub mode: Mode,
    pub label: String,
    pub seeds: Vec<u64>,
    pub test: BTreeMap<TaskId, Stat>,
    pub mean_test_loss: Stat,
    pub parameter_sparsity: Stat,
    pub group_sparsity: Stat,
    pub compression_ratio: Option<Stat>,
    pub speed_up: Option<Stat>,
    pub achieved_budget: Option<Stat>,
    pub lambda: Option<Stat>,
    pub epochs: Stat,
}

fn optional(values: Vec<Option<f64>>) -> Option<Stat> {
    values.into_iter().collect::<Option<Vec<f64>>>().map(|v| Stat::of(&v))
}

/// Aggregates records that share a task set.
pub fn summarize(records: &[RunRecord]) -> Result<Summary> {
    let first = records.first().ok_or_else(|| Error::InvalidArgument("nothing to summarize".into()))?;
    check_task_sets(records)?;
    let col = |f: &dyn Fn(&RunRecord) -> f64| -> Stat { Stat::of(&records.iter().map(f).collect::<Vec<_>>()) };
    let test = first
        .test
        .keys()
        .map(|&t| (t, col(&|r: &RunRecord| r.test[&t])))
        .collect();
    Ok(Summary {
        version: RECORD_VERSION,
        config_hash: first.config_hash.clone(),
        mode: first.mode,
        label: first.label.clone(),
        seeds: records.iter().map(|r| r.seed).collect(),
        test,
        mean_test_loss: col(&|r: &RunRecord| r.mean_test_loss()),
        parameter_sparsity: col(&|r: &RunRecord| r.final_sparsity.parameter_sparsity_percent),
        group_sparsity: col(&|r: &RunRecord| r.final_sparsity.group_sparsity_percent),
        compression_ratio: optional(records.iter().map(|r| r.final_sparsity.compression_ratio).collect()),
        speed_up: optional(records.iter().map(|r| r.final_sparsity.speed_up).collect()),
        achieved_budget: optional(records.iter().map(|r| r.achieved_budget).collect()),
        lambda: optional(records.iter().map(|r| r.lambda).collect()),
        epochs: col(&|r: &RunRecord| r.rows.len() as f64),
    })
}

pub(crate) fn check_task_sets(records: &[RunRecord]) -> Result<()> {
    if let Some(first) = records.first() {
        for r in records {
            if !r.test.keys().eq(first.test.keys()) {
                return Err(Error::InvalidArgument(format!(
                    "incompatible task sets: {:?} ({}) vs {:?} ({})",
                    first.test.keys().collect::<Vec<_>>(),
                    first.label,
                    r.test.keys().collect::<Vec<_>>(),
                    r.label
                )));
            }
        }
    }
    Ok(())
}

/// Creates `path` for writing, failing if it already exists.
pub(crate) fn create_new(path: &Path) -> Result<std::fs::File> {
    std::fs::OpenOptions::new().write(true).create_new(true).open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::AlreadyExists {
            Error::ArtifactExists(path.display().to_string())
        } else {
            e.into()
        }
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = create_new(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes the per-epoch rows as CSV preceded by the versioned comment line.
pub fn write_profile_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = create_new(path)?;
    writeln!(f, "{CSV_HEADER_COMMENT}")?;
    let mut w = csv::Writer::from_writer(f);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_profile_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path)?;
    let first = text.lines().next().unwrap_or_default();
    if first != CSV_HEADER_COMMENT {
        return Err(Error::InvalidArgument(format!("{}: expected `{CSV_HEADER_COMMENT}`, found `{first}`", path.display())));
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?)
}
