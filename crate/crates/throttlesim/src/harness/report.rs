//! Experiment output: named tables emitted as RFC-4180-quoted CSV files
//! plus a key/value summary emitted as sorted-key JSON. Emission is fully
//! deterministic — rerunning an experiment with the same config and seed
//! reproduces every output file byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};

/// One rectangular result table.
#[derive(Clone, Debug)]
pub struct Table {
    /// Short snake_case name; becomes part of the CSV file name.
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Table {
        Table {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Append a row; its width must match the header.
    pub fn push_row(&mut self, row: Vec<String>) {
        assert_eq!(
            row.len(),
            self.columns.len(),
            "row width mismatch in table {}",
            self.name
        );
        self.rows.push(row);
    }
}

/// Everything one experiment produces.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub tables: Vec<Table>,
    /// Headline metrics; keys serialize sorted.
    pub summary: BTreeMap<String, serde_json::Value>,
}

impl ExperimentReport {
    pub fn new(experiment: &str, config_hash: &str, seed: u64) -> ExperimentReport {
        ExperimentReport {
            experiment: experiment.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            tables: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    pub fn add_table(&mut self, table: Table) {
        self.tables.push(table);
    }

    pub fn set<V: Into<serde_json::Value>>(&mut self, key: &str, value: V) {
        self.summary.insert(key.to_string(), value.into());
    }
}

/// The summary file's on-disk shape.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryFile {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub summary: BTreeMap<String, serde_json::Value>,
}

/// Which outputs to write; `None` means both.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Summary,
}

impl OutputFormat {
    pub fn parse(s: &str) -> Option<OutputFormat> {
        match s {
            "csv" => Some(OutputFormat::Csv),
            "summary" => Some(OutputFormat::Summary),
            _ => None,
        }
    }
}

/// Write a report under `out_dir` and return the paths written.
///
/// Each table lands in `<experiment>_<table>.csv` (header always present,
/// so an empty table yields a header-only file); the summary lands in
/// `<experiment>_summary.json` with the experiment name, config hash, and
/// seed embedded.
pub fn emit_report(
    report: &ExperimentReport,
    out_dir: &Path,
    format: Option<OutputFormat>,
) -> SimResult<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let want_csv = format != Some(OutputFormat::Summary);
    let want_summary = format != Some(OutputFormat::Csv);

    if want_csv {
        for table in &report.tables {
            let path = out_dir.join(format!("{}_{}.csv", report.experiment, table.name));
            let mut w = csv::Writer::from_path(&path)
                .map_err(|e| SimError::Model(format!("csv write failed: {e}")))?;
            w.write_record(&table.columns)
                .map_err(|e| SimError::Model(format!("csv write failed: {e}")))?;
            for row in &table.rows {
                w.write_record(row)
                    .map_err(|e| SimError::Model(format!("csv write failed: {e}")))?;
            }
            w.flush()?;
            written.push(path);
        }
    }

    if want_summary {
        let file = SummaryFile {
            experiment: report.experiment.clone(),
            config_hash: report.config_hash.clone(),
            seed: report.seed,
            summary: report.summary.clone(),
        };
        let mut text = serde_json::to_string_pretty(&file)
            .map_err(|e| SimError::Model(format!("summary serialization failed: {e}")))?;
        text.push('\n');
        let path = out_dir.join(format!("{}_summary.json", report.experiment));
        std::fs::write(&path, text)?;
        written.push(path);
    }

    Ok(written)
}

/// Load every `*_summary.json` under a directory, sorted by file name.
pub fn read_summaries(out_dir: &Path) -> SimResult<Vec<SummaryFile>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(out_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with("_summary.json"))
        })
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(&p)?;
        let file: SummaryFile = serde_json::from_str(&text).map_err(|e| {
            SimError::Config(format!("unreadable summary {}: {e}", p.display()))
        })?;
        out.push(file);
    }
    Ok(out)
}

/// Fixed-precision float formatting for CSV cells, so output bytes do not
/// depend on shortest-representation quirks.
pub fn f6(x: f64) -> String {
    format!("{x:.6}")
}
