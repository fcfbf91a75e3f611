//! JSON reports and CSV tables.

use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::CliError;

/// Version of the report layout and CSV columns.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    /// Passes when `value ≤ tolerance`.
    pub fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            pass: value <= tolerance,
            value,
            tolerance,
        }
    }

    /// Passes when `value ≥ tolerance`.
    pub fn at_least(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            pass: value >= tolerance,
            value,
            tolerance,
        }
    }

    /// Boolean check recorded as 1 (true) or 0 (false) against 1.
    pub fn holds(name: &str, ok: bool) -> Self {
        Self {
            name: name.into(),
            pass: ok,
            value: f64::from(u8::from(ok)),
            tolerance: 1.0,
        }
    }
}

/// A CSV table with fixed columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(file: &str, header: &[&'static str]) -> Self {
        Self {
            file: file.into(),
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }
}

/// Outcome of one subcommand before it is written out.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub results: serde_json::Value,
    pub checks: Vec<Check>,
    pub tables: Vec<Table>,
}

#[derive(Debug, Serialize)]
pub struct Report<'a> {
    pub schema_version: u32,
    pub command: &'a str,
    pub config: &'a ExperimentConfig,
    pub config_hash: String,
    pub results: &'a serde_json::Value,
    pub invariant_checks: &'a [Check],
    pub pass: bool,
    pub workers: usize,
    pub runtime_seconds: f64,
}

pub fn write_table(dir: &Path, table: &Table) -> Result<(), CliError> {
    let path = dir.join(&table.file);
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    w.write_record(&table.header).map_err(io)?;
    for row in &table.rows {
        w.write_record(row).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn write_report(dir: &Path, report: &Report) -> Result<(), CliError> {
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
