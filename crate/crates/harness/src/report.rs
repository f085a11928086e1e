//! Aggregated tables and their CSV / markdown renderings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use charcom_core::metrics::Stats;
use charcom_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::runner::ExperimentRecord;

pub const METRIC_COLUMNS: [&str; 5] = ["IS", "PFS", "ICS", "T-ICS", "T-ICS_Emb"];

pub const FOOTER: &str = "IP-Adapter baseline omitted: it needs visual cross-attention, which this testbed does not model. \
Scores are embedding proxies, not VLM judgements.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    /// Value of the table's key column (cast size, reference count), if any.
    pub key: Option<String>,
    pub metrics: [Stats; 5],
}

impl Row {
    pub fn is_score(&self) -> Stats {
        self.metrics[0]
    }

    pub fn t_ics_emb(&self) -> Stats {
        self.metrics[4]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub key_name: Option<String>,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn row(&self, label: &str, key: Option<&str>) -> Option<&Row> {
        self.rows.iter().find(|r| r.label == label && r.key.as_deref() == key)
    }
}

/// IS, PFS and ICS over every scored scene; T-ICS and T-ICS_Emb over stories
/// that have a recurring character.
pub fn aggregate(label: &str, key: Option<String>, records: &[ExperimentRecord]) -> Row {
    let scenes: Vec<_> = records.iter().flat_map(|r| &r.report.scenes).collect();
    let is: Vec<f64> = scenes.iter().map(|s| s.scores.is_score).collect();
    let pfs: Vec<f64> = scenes.iter().map(|s| s.scores.pfs_score).collect();
    let ics: Vec<f64> = scenes.iter().map(|s| s.ics).collect();
    let t: Vec<f64> = records.iter().filter_map(|r| r.report.t_ics).collect();
    let te: Vec<f64> = records.iter().filter_map(|r| r.report.t_ics_emb).collect();
    Row { label: label.to_string(), key, metrics: [Stats::of(&is), Stats::of(&pfs), Stats::of(&ics), Stats::of(&t), Stats::of(&te)] }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn to_csv(table: &Table) -> String {
    let mut out = String::from("method");
    if let Some(k) = &table.key_name {
        out.push(',');
        out.push_str(&csv_field(k));
    }
    for m in METRIC_COLUMNS {
        let _ = write!(out, ",{m}_mean,{m}_std");
    }
    out.push_str(",n\n");
    for r in &table.rows {
        out.push_str(&csv_field(&r.label));
        if table.key_name.is_some() {
            out.push(',');
            out.push_str(&csv_field(r.key.as_deref().unwrap_or("")));
        }
        for s in &r.metrics {
            let _ = write!(out, ",{:.6},{:.6}", s.mean, s.std);
        }
        let _ = writeln!(out, ",{}", r.metrics[0].n);
    }
    out
}

pub fn to_markdown(table: &Table) -> String {
    let mut out = format!("## {}\n\n| Method |", table.title);
    let mut rule = String::from("|---|");
    if let Some(k) = &table.key_name {
        let _ = write!(out, " {k} |");
        rule.push_str("---|");
    }
    for m in METRIC_COLUMNS {
        let _ = write!(out, " {m} |");
        rule.push_str("---|");
    }
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    for r in &table.rows {
        let _ = write!(out, "| {} |", r.label);
        if table.key_name.is_some() {
            let _ = write!(out, " {} |", r.key.as_deref().unwrap_or(""));
        }
        for (i, s) in r.metrics.iter().enumerate() {
            let digits = if i == 4 { 4 } else { 3 };
            let _ = write!(out, " {:.*} ± {:.*} |", digits, s.mean, digits, s.std);
        }
        out.push('\n');
    }
    let _ = write!(out, "\n{FOOTER}\n");
    out
}

/// Write `<stem>.csv` and `<stem>.md` under `dir`.
pub fn emit_report(table: &Table, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    if table.rows.is_empty() {
        return Err(Error::InvalidArgument("no rows to report".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::InvalidArgument(format!("cannot create {}: {e}", dir.display())))?;
    let csv = dir.join(format!("{stem}.csv"));
    let md = dir.join(format!("{stem}.md"));
    for (path, body) in [(&csv, to_csv(table)), (&md, to_markdown(table))] {
        std::fs::write(path, body).map_err(|e| Error::InvalidArgument(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok((csv, md))
}
