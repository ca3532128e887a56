//! Result tables, CSV emission and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentSpec;
use crate::error::Result;

/// Formats with at most 12 significant digits, shortest round-trip form.
pub fn fmt12(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.11e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(u64),
    Num(f64),
    Text(String),
}

impl Value {
    pub fn render(&self) -> String {
        match self {
            Value::Int(i) => i.to_string(),
            Value::Num(x) => fmt12(*x),
            Value::Text(s) => s.clone(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Num(x) => Some(*x),
            Value::Text(_) => None,
        }
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Num(x)
    }
}

impl From<usize> for Value {
    fn from(i: usize) -> Self {
        Value::Int(i as u64)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

/// A tidy table, one row per metric cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Numeric values of column `name`.
    pub fn numbers(&self, name: &str) -> Vec<f64> {
        match self.column(name) {
            Some(c) => self.rows.iter().filter_map(|r| r[c].as_f64()).collect(),
            None => Vec::new(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Value::render))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest<'a> {
    pub seed: u64,
    pub version: &'a str,
    pub tables: Vec<String>,
    pub summary: &'a BTreeMap<String, f64>,
    pub notes: Vec<String>,
    pub spec: &'a ExperimentSpec,
}

/// Writes every table as `<name>.csv` and a `manifest.toml` into `dir`.
/// Returns the paths written.
pub fn write_outputs(
    dir: &Path,
    spec: &ExperimentSpec,
    tables: &[Table],
    summary: &BTreeMap<String, f64>,
    notes: Vec<String>,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for t in tables {
        let p = dir.join(format!("{}.csv", t.name));
        t.write_csv(&p)?;
        paths.push(p);
    }
    let manifest = Manifest {
        seed: spec.seed,
        version: env!("CARGO_PKG_VERSION"),
        tables: tables.iter().map(|t| format!("{}.csv", t.name)).collect(),
        summary,
        notes,
        spec,
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| crate::error::Error::Io(format!("manifest serialization: {e}")))?;
    let p = dir.join("manifest.toml");
    fs::write(&p, text)?;
    paths.push(p);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(fmt12(0.1 + 0.2), "0.3");
        assert_eq!(fmt12(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt12(-902.123456789012345), "-902.123456789");
        assert_eq!(fmt12(0.0), "0");
        assert_eq!(fmt12(1e-20), "0.00000000000000000001");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new("demo", &["n", "method", "value"]);
        t.push(vec![100usize.into(), "asymptotic".into(), 0.95.into()]);
        let p = dir.path().join("demo.csv");
        t.write_csv(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "n,method,value\n100,asymptotic,0.95\n");
        assert_eq!(t.numbers("value"), vec![0.95]);
    }
}
