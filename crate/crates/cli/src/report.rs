use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::sha256_hex;

#[derive(Clone, Debug)]
pub enum Cell {
    F(f64),
    U(u64),
    S(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            // `{:e}` is the shortest round-trip form, so identical values print identically.
            Cell::F(x) => format!("{x:e}"),
            Cell::U(n) => n.to_string(),
            Cell::S(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::F(x)
    }
}

impl From<usize> for Cell {
    fn from(n: usize) -> Self {
        Cell::U(n as u64)
    }
}

impl From<u64> for Cell {
    fn from(n: u64) -> Self {
        Cell::U(n)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::S(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::S(s)
    }
}

#[macro_export]
macro_rules! row {
    ($($x:expr),* $(,)?) => { vec![$($crate::report::Cell::from($x)),*] };
}

#[derive(Clone, Debug)]
pub struct Table {
    pub file: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(file: &str, header: &[&str]) -> Self {
        Self { file: file.to_string(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Self { name: name.to_string(), pass, detail: detail.into() }
    }
}

/// Everything an experiment produces before it touches the file system.
#[derive(Debug, Default)]
pub struct Outcome {
    pub tables: Vec<Table>,
    pub texts: Vec<(String, String)>,
    pub checks: Vec<Check>,
}

#[derive(Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub experiment: String,
    pub config: String,
    pub config_hash: String,
    pub model: String,
    pub model_hash: String,
    pub seed: u64,
    pub deterministic: bool,
    pub jobs: usize,
    pub files: Vec<FileEntry>,
    pub wall_clock_seconds: f64,
    pub checks: Vec<Check>,
    pub pass: bool,
}

pub fn write_table(dir: &Path, table: &Table) -> Result<PathBuf> {
    let path = dir.join(&table.file);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(&table.header)?;
    for row in &table.rows {
        w.write_record(row.iter().map(Cell::render))?;
    }
    w.flush()?;
    Ok(path)
}

pub fn write_outputs(dir: &Path, outcome: &Outcome) -> Result<Vec<FileEntry>> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let mut files = Vec::new();
    for table in &outcome.tables {
        let path = write_table(dir, table)?;
        files.push(entry(&path, &table.file)?);
    }
    for (name, text) in &outcome.texts {
        let path = dir.join(name);
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        files.push(entry(&path, name)?);
    }
    Ok(files)
}

fn entry(path: &Path, name: &str) -> Result<FileEntry> {
    let bytes = std::fs::read(path)?;
    Ok(FileEntry { path: name.to_string(), sha256: sha256_hex(&bytes) })
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&path, json + "\n").with_context(|| format!("cannot write {}", path.display()))
}
