//! Tables, artifacts and run manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, CliResult};
use crate::scenario::Format;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    F(f64),
    I(i64),
    S(String),
    B(bool),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::I(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::I(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::B(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::S(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::S(v)
    }
}

/// 17 significant digits, so files round-trip and diff exactly.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::F(v) => fmt_f64(*v),
            Cell::I(v) => v.to_string(),
            Cell::B(v) => v.to_string(),
            Cell::S(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::S(s) => s.clone(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::F(v) if v.is_finite() => json!(v),
            Cell::F(v) => json!(fmt_f64(*v)),
            Cell::I(v) => json!(v),
            Cell::B(v) => json!(v),
            Cell::S(s) => json!(s),
        }
    }
}

/// A tidy table with a fixed column order.
#[derive(Debug, Clone)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width in table {}", self.name);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            let line: Vec<String> = r.iter().map(Cell::csv).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| Value::Array(r.iter().map(Cell::json).collect()))
            .collect();
        json!({ "name": self.name, "columns": self.columns, "rows": rows })
    }
}

/// Everything a command produces; written in one place, single-threaded.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub tables: Vec<Table>,
    pub documents: Vec<(String, Value)>,
}

impl Artifacts {
    pub fn table(&mut self, t: Table) {
        self.tables.push(t);
    }

    pub fn document(&mut self, name: &str, v: Value) {
        self.documents.push((name.into(), v));
    }

    pub fn write(&self, dir: &Path, formats: &[Format]) -> CliResult<Vec<String>> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut written = Vec::new();
        for t in &self.tables {
            for f in formats {
                let (file, body) = match f {
                    Format::Csv => (format!("{}.csv", t.name), t.to_csv()),
                    Format::Json => (format!("{}.json", t.name), pretty(&t.to_json())),
                };
                write_file(&dir.join(&file), &body)?;
                written.push(file);
            }
        }
        for (name, v) in &self.documents {
            let file = format!("{name}.json");
            write_file(&dir.join(&file), &pretty(v))?;
            written.push(file);
        }
        Ok(written)
    }
}

pub fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values always serialize");
    s.push('\n');
    s
}

pub fn write_file(path: &Path, body: &str) -> CliResult<()> {
    std::fs::write(path, body).map_err(io_err(path))
}

pub fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbeddedScenario {
    pub file: String,
    pub sha256: String,
    pub text: String,
}

impl EmbeddedScenario {
    pub fn new(file: &str, text: &str) -> Self {
        Self {
            file: file.into(),
            sha256: sha256_hex(text),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseTime {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub scenarios: Vec<EmbeddedScenario>,
    pub seed_override: Option<u64>,
    pub seeds: BTreeMap<String, u64>,
    pub workers: Option<usize>,
    pub formats: Vec<Format>,
    /// Criterion selection of a `verify` run; empty means all.
    #[serde(default)]
    pub criteria: Vec<u8>,
    pub phases: Vec<PhaseTime>,
    pub constants: BTreeMap<String, f64>,
    pub checks: Vec<CheckRecord>,
    pub warnings: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, scenarios: Vec<EmbeddedScenario>) -> Self {
        Self {
            tool: "bdsde".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            scenarios,
            seed_override: None,
            seeds: BTreeMap::new(),
            workers: None,
            formats: vec![Format::Csv],
            criteria: Vec::new(),
            phases: Vec::new(),
            constants: BTreeMap::new(),
            checks: Vec::new(),
            warnings: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(CheckRecord {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn constant(&mut self, name: &str, v: f64) {
        self.constants.insert(name.into(), v);
    }

    pub fn phase(&mut self, phase: &str, start: Instant) {
        self.phases.push(PhaseTime {
            phase: phase.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    /// Runs `f` and records its wall time.
    pub fn timed<T>(&mut self, phase: &str, f: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
        let start = Instant::now();
        let out = f();
        self.phases.push(PhaseTime {
            phase: phase.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("manifest.json");
        let v = serde_json::to_value(self).map_err(|e| CliError::Config(e.to_string()))?;
        write_file(&path, &pretty(&v))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: not a run manifest: {e}", path.display())))
    }
}

/// Names of the CSV files below `dir`, sorted, with their contents.
pub fn csv_set(dir: &Path) -> CliResult<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(io_err(&d))? {
            let path = entry.map_err(io_err(&d))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                let rel = path.strip_prefix(dir).unwrap_or(&path).to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).map_err(io_err(&path))?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_keep_seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.0), "-2.0000000000000000e0");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        let back: f64 = fmt_f64(std::f64::consts::PI).parse().unwrap();
        assert_eq!(back, std::f64::consts::PI);
    }

    #[test]
    fn csv_quotes_strings_with_commas() {
        let mut t = Table::new("t", &["a", "b"]);
        t.push(vec!["x,y".into(), 3usize.into()]);
        assert_eq!(t.to_csv(), "a,b\n\"x,y\",3\n");
        assert_eq!(t.to_json()["rows"][0][1], json!(3));
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("simulate", vec![EmbeddedScenario::new("a.toml", "name = \"a\"")]);
        m.check("c", true, "ok");
        m.constant("kappa", 1.5);
        let path = m.write(dir.path()).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back.scenarios, m.scenarios);
        assert_eq!(back.constants["kappa"], 1.5);
        assert_eq!(back.scenarios[0].sha256.len(), 64);
    }
}
