//! Errors with exit codes, and tables written both as aligned text and CSV.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use feedrank::config::RunConfig;

pub const EXIT_CONTRACT: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Display) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.to_string(),
        }
    }

    pub fn contract(message: impl Display) -> Self {
        Self {
            code: EXIT_CONTRACT,
            message: message.to_string(),
        }
    }
}

impl From<feedrank::Error> for Failure {
    fn from(e: feedrank::Error) -> Self {
        if e.is_contract_violation() {
            Self::contract(e)
        } else {
            Self::config(e)
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::config(e)
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Self::config(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::config(e)
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

pub struct Table {
    pub name: &'static str,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &'static str, header: &[&'static str]) -> Self {
        Self {
            name,
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn text(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.len()).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: Vec<&str>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = format!("{}\n", line(self.header.clone()));
        for row in &self.rows {
            out.push_str(&line(row.iter().map(String::as_str).collect()));
            out.push('\n');
        }
        out
    }

    /// Writes `<dir>/<name>.csv` and prints the text form.
    pub fn emit(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(format!("{}.csv", self.name));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        println!("{}", self.text());
        Ok(path)
    }
}

pub fn fmt(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        String::new()
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

pub fn prepare_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Failure::config(format!("cannot create {}: {e}", dir.display())))
}

/// Writes the resolved configuration next to a command's outputs.
pub fn write_resolved(dir: &Path, cfg: &RunConfig) -> CliResult<PathBuf> {
    let path = dir.join("config.resolved.toml");
    let text = toml::to_string(cfg).map_err(|e| Failure::config(format!("cannot serialise config: {e}")))?;
    fs::write(&path, &text)?;
    eprintln!("# resolved config, also in {}\n{text}", path.display());
    Ok(path)
}
