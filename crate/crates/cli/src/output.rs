//! Deterministic artifact writers and machine-readable error records.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ConfigError;
use fibrekahler::GeomError;

/// Exit statuses of the binary.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INVARIANT: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const SOLVER: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {source}")]
    Geometry {
        context: String,
        #[source]
        source: GeomError,
    },
    #[error("{0} invariant check(s) failed")]
    Invariant(usize),
    #[error("i/o on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => exit::CONFIG,
            RunError::Invariant(_) => exit::INVARIANT,
            RunError::Geometry { .. } | RunError::Io { .. } => exit::SOLVER,
        }
    }

    pub fn record(&self, run: &str) -> ErrorRecord {
        let (kind, key, line, context) = match self {
            RunError::Config(e) => ("config", e.key.clone(), e.line, None),
            RunError::Geometry { source, context } => {
                let kind = if source.is_solver_failure() { "solver" } else { "geometry" };
                (kind, None, None, Some(context.clone()))
            }
            RunError::Invariant(_) => ("invariant", None, None, None),
            RunError::Io { .. } => ("io", None, None, None),
        };
        ErrorRecord {
            run: run.into(),
            kind: kind.into(),
            message: self.to_string(),
            key,
            line,
            context,
            exit_code: self.exit_code(),
        }
    }
}

/// Attaches context to geometry errors.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, RunError>;
}

impl<T> Context<T> for fibrekahler::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, RunError> {
        self.map_err(|source| RunError::Geometry { context: what(), source })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorRecord {
    pub run: String,
    pub kind: String,
    pub message: String,
    pub key: Option<String>,
    pub line: Option<usize>,
    pub context: Option<String>,
    pub exit_code: i32,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| io_err(path, e))
}

/// A CSV cell. Floats use 17 significant digits so they round-trip.
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format!("{v:.16e}"),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.into())
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<Cell>]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(Cell::render)).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
