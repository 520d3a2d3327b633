//! Tables and reports on disk. Numbers in CSV use 17 significant digits so
//! that every f64 round-trips.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Format, RunConfig};
use crate::hierarchy::{HierarchyBasis, RANK_TOL};
use crate::model::Scene;
use crate::solver::IntegratorSettings;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Bool(bool),
    Text(String),
}

impl Cell {
    pub fn csv(&self) -> String {
        match self {
            Cell::Num(x) => fmt_f64(*x),
            Cell::Int(i) => i.to_string(),
            Cell::Bool(b) => b.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }

    pub fn json(&self) -> Value {
        match self {
            Cell::Num(x) if x.is_finite() => json!(x),
            Cell::Num(_) => Value::Null,
            Cell::Int(i) => json!(i),
            Cell::Bool(b) => json!(b),
            Cell::Text(s) => json!(s),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}
impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Bool(b)
    }
}
impl From<usize> for Cell {
    fn from(i: usize) -> Self {
        Cell::Int(i as i64)
    }
}
impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}
impl From<char> for Cell {
    fn from(c: char) -> Self {
        Cell::Text(c.to_string())
    }
}

pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: Vec<String>) -> Self {
        Self { columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::csv))?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Value {
        json!({
            "columns": self.columns,
            "rows": self.rows.iter().map(|r| r.iter().map(Cell::json).collect::<Vec<_>>()).collect::<Vec<_>>(),
        })
    }
}

/// Column name for a mode population, e.g. `n_0_1`.
pub fn mode_column(prefix: &str, m: crate::model::ModeIndex) -> String {
    format!("{prefix}_{}_{}", m.mx, m.my)
}

#[derive(Debug, Clone, Serialize)]
pub struct Representation {
    pub full_field: bool,
    pub depth: Option<usize>,
    pub inner_product: &'static str,
    pub rank_tol: f64,
    pub level_ranks: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridMeta {
    pub side: usize,
    pub bins: usize,
    pub spacing: f64,
    pub cell_area: f64,
    pub extent: f64,
    pub layout: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub artifact: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_hash: String,
    /// Resolved configuration as TOML; parses back to the same RunConfig.
    pub config: String,
    pub tolerances: IntegratorSettings,
    pub representation: Representation,
    pub grid: GridMeta,
    pub partial: bool,
    pub failures: usize,
    pub summary: Value,
}

impl Metadata {
    pub fn new(command: &str, cfg: &RunConfig, scene: &Scene, basis: Option<&HierarchyBasis>) -> Self {
        Self {
            artifact: "dyecav",
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            config_hash: cfg.hash(),
            config: cfg.resolved_toml(),
            tolerances: cfg.solver,
            representation: Representation {
                full_field: basis.is_none(),
                depth: basis.map(|b| b.depth),
                inner_product: "euclidean",
                rank_tol: RANK_TOL,
                level_ranks: basis.map(|b| b.level_ranks()).unwrap_or_default(),
            },
            grid: GridMeta {
                side: scene.grid.side,
                bins: scene.grid.len(),
                spacing: scene.grid.spacing,
                cell_area: scene.grid.cell_area,
                extent: scene.grid.extent,
                layout: "square, odd side, bin centres at k*spacing, midpoint quadrature",
            },
            partial: false,
            failures: 0,
            summary: Value::Null,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> std::io::Error {
    std::io::Error::other(format!("{}: {e}", path.display()))
}

/// Write `name.csv` + `name.meta.json`, or a single `name.json`.
pub fn write_table(dir: &Path, name: &str, table: &Table, meta: &Metadata, format: &Format) -> std::io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    match format {
        Format::Csv => {
            let csv_path = dir.join(format!("{name}.csv"));
            let text = table.to_csv().map_err(|e| io_err(&csv_path, e))?;
            fs::write(&csv_path, text)?;
            let meta_path = dir.join(format!("{name}.meta.json"));
            fs::write(&meta_path, serde_json::to_string_pretty(meta).map_err(|e| io_err(&meta_path, e))?)?;
            Ok(vec![csv_path, meta_path])
        }
        Format::Json => {
            let path = dir.join(format!("{name}.json"));
            let doc = json!({ "metadata": meta, "table": table.to_json() });
            fs::write(&path, serde_json::to_string_pretty(&doc).map_err(|e| io_err(&path, e))?)?;
            Ok(vec![path])
        }
    }
}

/// Nested reports are always JSON.
pub fn write_report(dir: &Path, name: &str, report: &Value, meta: &Metadata) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{name}.json"));
    let doc = json!({ "metadata": meta, "report": report });
    fs::write(&path, serde_json::to_string_pretty(&doc).map_err(|e| io_err(&path, e))?)?;
    Ok(path)
}

/// Read back a CSV written by `write_table`.
pub fn read_csv(path: &Path) -> std::io::Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header = r.headers().map_err(|e| io_err(path, e))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(|e| io_err(path, e))?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip_with_17_digits() {
        for x in [0.1, 1.0 / 3.0, 6.2733e13, -2.5e-300, f64::MIN_POSITIVE, 123456789.123456789] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-');
            assert_eq!(mantissa.chars().filter(|c| c.is_ascii_digit()).count(), 17);
        }
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_f64(f64::NAN), "nan");
    }

    #[test]
    fn csv_quotes_nothing_for_plain_columns() {
        let mut t = Table::new(vec!["P".into(), "converged".into(), "interval".into()]);
        t.push(vec![0.5.into(), true.into(), 'B'.into()]);
        assert_eq!(t.to_csv().unwrap(), "P,converged,interval\n5.0000000000000000e-1,true,B\n");
        assert_eq!(t.to_json()["rows"][0][1], json!(true));
    }
}
