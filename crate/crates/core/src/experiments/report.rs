//! Deterministic report emission: JSON envelope, CSV tables and
//! gnuplot-style plot data.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::Result;

pub const SCHEMA_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
    Plotdata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
}

impl From<f64> for Cell {
    /// Non-finite values become text so JSON output stays round-trippable.
    fn from(v: f64) -> Self {
        if v.is_finite() {
            Cell::Num(v)
        } else {
            Cell::Text(format_float(v))
        }
    }
}
impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Text("nan".into()), Cell::from)
    }
}
impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}
impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}
impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}
impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Int(v as i64)
    }
}
impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}
impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Num(x) => format_float(*x),
            Cell::Text(s) => s.clone(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(i) => Some(*i as f64),
            Cell::Num(x) => Some(*x),
            Cell::Text(_) => None,
        }
    }
}

/// Shortest round-trip representation; non-finite values spelled out.
fn format_float(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:e}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table { name: name.into(), columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j].as_f64().unwrap_or(f64::NAN)).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(Cell::render).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    /// Whitespace columns with a commented header naming each column.
    pub fn to_plotdata(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.name);
        let named: Vec<String> = self.columns.iter().enumerate().map(|(i, c)| format!("{}:{c}", i + 1)).collect();
        let _ = writeln!(s, "# {}", named.join(" "));
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(Cell::render).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s
    }
}

/// A named comparison against a threshold. Gating checks are identities
/// that must hold to tolerance; failing one makes the CLI exit with 4.
/// A missing or non-finite value is recorded as `null` and fails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: Option<f64>,
    pub threshold: f64,
    pub passed: bool,
    pub gating: bool,
}

impl Check {
    fn with(name: &str, value: Option<f64>, threshold: f64, gating: bool, ok: impl Fn(f64) -> bool) -> Self {
        let value = value.filter(|v| v.is_finite());
        Check { name: name.into(), value, threshold, passed: value.is_some_and(ok), gating }
    }

    /// Passes when `value ≤ threshold`.
    pub fn at_most(name: &str, value: impl Into<Option<f64>>, threshold: f64, gating: bool) -> Self {
        Check::with(name, value.into(), threshold, gating, |v| v <= threshold)
    }

    /// Passes when `value ≥ threshold`.
    pub fn at_least(name: &str, value: impl Into<Option<f64>>, threshold: f64, gating: bool) -> Self {
        Check::with(name, value.into(), threshold, gating, |v| v >= threshold)
    }
}

/// Everything one experiment run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub results: serde_json::Value,
    pub checks: Vec<Check>,
    pub series: Table,
    pub ledgers: Vec<Table>,
}

impl Artifacts {
    pub fn gating_failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.gating && !c.passed).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEnvelope {
    pub schema_version: u32,
    pub artifact_version: String,
    pub experiment: String,
    pub config: ExperimentConfig,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub results: serde_json::Value,
}

pub fn envelope(cfg: &ExperimentConfig, art: &Artifacts) -> ReportEnvelope {
    ReportEnvelope {
        schema_version: SCHEMA_VERSION,
        artifact_version: ARTIFACT_VERSION.to_string(),
        experiment: cfg.experiment.name().to_string(),
        config: cfg.clone(),
        checks: art.checks.clone(),
        passed: art.gating_failures().is_empty(),
        results: art.results.clone(),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Write the run's files under `out`. `config.resolved.json` and
/// `report.json` are always written; `format` selects how the series and
/// ledger tables are written.
pub fn emit_report(cfg: &ExperimentConfig, art: &Artifacts, out: &Path, format: OutputFormat) -> Result<()> {
    fs::create_dir_all(out)?;
    write(&out.join("config.resolved.json"), &(serde_json::to_string_pretty(cfg)? + "\n"))?;
    write(&out.join("report.json"), &(serde_json::to_string_pretty(&envelope(cfg, art))? + "\n"))?;
    match format {
        OutputFormat::Csv => {
            write(&out.join("series.csv"), &art.series.to_csv())?;
            for t in &art.ledgers {
                write(&out.join("ledger").join(format!("{}.csv", t.name)), &t.to_csv())?;
            }
        }
        OutputFormat::Json => {
            write(&out.join("series.json"), &(serde_json::to_string_pretty(&art.series)? + "\n"))?;
            for t in &art.ledgers {
                write(&out.join("ledger").join(format!("{}.json", t.name)), &(serde_json::to_string_pretty(t)? + "\n"))?;
            }
        }
        OutputFormat::Plotdata => {
            write(&out.join("plot").join("series.dat"), &art.series.to_plotdata())?;
            for t in &art.ledgers {
                write(&out.join("plot").join(format!("{}.dat", t.name)), &t.to_plotdata())?;
            }
        }
    }
    Ok(())
}
