use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::models::TaskId;

use super::record::{check_task_sets, read_json, summarize, RunRecord, Stat, Summary};

pub const REPORT_HEADER_COMMENT: &str = "# metasparse report v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    /// One aggregate per config, in order of first appearance.
    pub rows: Vec<Summary>,
    pub csv: String,
    pub svg: String,
    /// Largest epoch index drawn on the profile chart.
    pub x_max: usize,
}

fn fmt_stat(s: Option<Stat>) -> [String; 2] {
    match s {
        Some(s) => [format!("{}", s.mean), format!("{}", s.std)],
        None => [String::new(), String::new()],
    }
}

/// Aggregates records per config into a mean ± std table and draws the
/// parameter-sparsity profile of every record. Fails if the records cover
/// different task sets.
pub fn report(records: &[RunRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one record".into()));
    }
    check_task_sets(records)?;
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<RunRecord>> = BTreeMap::new();
    for r in records {
        if !groups.contains_key(r.config_hash.as_str()) {
            order.push(&r.config_hash);
        }
        groups.entry(&r.config_hash).or_default().push(r.clone());
    }
    let rows = order.iter().map(|h| summarize(&groups[h])).collect::<Result<Vec<_>>>()?;
    let tasks: Vec<TaskId> = records[0].test.keys().copied().collect();

    let mut header = vec!["label".to_string(), "config_hash".into(), "seeds".into()];
    for t in &tasks {
        header.push(format!("task{t}_loss_mean"));
        header.push(format!("task{t}_loss_std"));
    }
    for name in ["mean_loss", "parameter_sparsity", "group_sparsity", "achieved_budget", "compression_ratio", "speed_up", "lambda"] {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for s in &rows {
        let mut line = vec![s.label.clone(), s.config_hash[..16.min(s.config_hash.len())].to_string(), s.seeds.len().to_string()];
        for t in &tasks {
            line.extend(fmt_stat(Some(s.test[t])));
        }
        for stat in [
            Some(s.mean_test_loss),
            Some(s.parameter_sparsity),
            Some(s.group_sparsity),
            s.achieved_budget,
            s.compression_ratio,
            s.speed_up,
            s.lambda,
        ] {
            line.extend(fmt_stat(stat));
        }
        w.write_record(&line)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?).expect("csv output is utf-8");
    let csv = format!("{REPORT_HEADER_COMMENT}\n{body}");

    let x_max = records.iter().map(RunRecord::max_step).max().unwrap_or(0);
    let svg = profile_svg(records, x_max);
    Ok(Report { rows, csv, svg, x_max })
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Line chart of parameter sparsity (percent) against the epoch index.
fn profile_svg(records: &[RunRecord], x_max: usize) -> String {
    let (width, height) = (720.0, 420.0);
    let (left, right, top, bottom) = (60.0, 200.0, 20.0, 50.0);
    let pw = width - left - right;
    let ph = height - top - bottom;
    let span = x_max.max(1) as f64;
    let x = |e: usize| left + pw * e as f64 / span;
    let y = |v: f64| top + ph * (1.0 - v / 100.0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" data-x-min="0" data-x-max="{x_max}" data-y-min="0" data-y-max="100">"#
    );
    let _ = writeln!(s, "<title>Parameter sparsity per epoch</title>");
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g stroke="black" fill="none"><line x1="{left}" y1="{}" x2="{}" y2="{}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}"/></g>"#,
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    let _ = writeln!(s, r#"<g font-family="sans-serif" font-size="11">"#);
    for i in 0..=4 {
        let v = 25.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v}</text>"#, left - 6.0, y(v) + 4.0);
        let e = (x_max as f64 * i as f64 / 4.0).round() as usize;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{e}</text>"#, x(e), top + ph + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, left + pw / 2.0, height - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">parameter sparsity (%)</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, r) in records.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = r.rows.iter().map(|p| format!("{:.2},{:.2}", x(p.step), y(p.parameter_sparsity))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, points.join(" "));
        let ly = top + 14.0 * i as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{} (seed {})</text>"#,
            left + pw + 10.0,
            left + pw + 28.0,
            left + pw + 32.0,
            ly + 4.0,
            xml_escape(&r.label),
            r.seed
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Collects every `record.json` below the given run directories, in path order.
pub fn collect_records(dirs: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut paths = Vec::new();
    for d in dirs {
        find_records(d, &mut paths)?;
    }
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no record.json found below the given directories".into()));
    }
    paths.iter().map(|p| read_json(p)).collect()
}

fn find_records(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_records(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "record.json") {
            out.push(p);
        }
    }
    Ok(())
}
