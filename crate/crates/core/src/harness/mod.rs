//! Run configuration, baseline sparsification schedules, orchestration over
//! seeds, checkpoints and reports.
//!
//! A run is described by a TOML [`RunConfig`]. [`run`] executes every seed,
//! writes the artifacts below a directory named after the config hash and
//! returns the per-seed [`RunRecord`]s and their cross-seed [`Summary`].

mod checkpoint;
mod config;
mod record;
mod report;
mod run;
mod schedules;

#[cfg(test)]
mod tests;

pub use checkpoint::{Checkpoint, RngState, MAGIC, VERSION as CHECKPOINT_VERSION};
pub use config::{seed_path, Budget, BudgetKeyword, MaskSource, Mode, ModelSpec, RunConfig, Schedule};
pub use record::{
    read_json, read_profile_csv, summarize, write_json, write_profile_csv, MetricRow, Phase, RunRecord, Stat, Summary, CSV_HEADER_COMMENT,
    CSV_VERSION,
};
pub use report::{collect_records, report, Report, REPORT_HEADER_COMMENT};
pub use run::{dataset, init_model, meta_run, run, run_dir, run_seed, stream_rng, streams, zero_groups, zero_pattern, MetaRun, RunOutcome, SeedRun};
pub use schedules::{next_mask, schedule_iterative, schedule_one_shot, schedule_progressive, schedule_sparse_training, MaskSpec, ScheduleOutcome};

use crate::error::{Error, Result};

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Divergence(_) => 3,
        _ => 1,
    }
}

/// Sets a possibly dotted key (`train.lr_backbone`) in a parsed config
/// table. The value is read as a TOML value and falls back to a string.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed = parse_value(value);
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty override key `{key}`")))?;
    let mut t = table;
    for p in parts {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    t.insert(last.to_string(), parsed);
    Ok(())
}

fn parse_value(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}
