//! Writers for the machine-readable outputs.
//!
//! CSV tables start with a `# {...}` line holding the run metadata as compact
//! JSON; when written to a file the same metadata also goes to a
//! `<file>.meta.json` sidecar. JSON outputs carry it under `"metadata"`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::Serialize;
use serde_json::{json, Value};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub schema: u32,
    pub command: &'static str,
    pub seed: u64,
    pub config: Value,
}

impl Metadata {
    pub fn new(command: &'static str, seed: u64, config: Value) -> Self {
        Self { tool: env!("CARGO_PKG_NAME"), version: env!("CARGO_PKG_VERSION"), schema: SCHEMA_VERSION, command, seed, config }
    }
}

/// `path` with `suffix` appended to the file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Writes `text` to `out`, or stdout when `out` is `None`.
pub fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("cannot write {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).context("cannot write to stdout")?;
            stdout.flush().context("cannot write to stdout")
        }
    }
}

pub fn json_text<S: Serialize>(value: &S) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).context("cannot serialize output")?;
    s.push('\n');
    Ok(s)
}

pub fn csv_text<R: Serialize>(meta: &Metadata, rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).context("cannot serialize CSV row")?;
    }
    let body = String::from_utf8(w.into_inner().context("cannot flush CSV")?).context("CSV is not UTF-8")?;
    let header = serde_json::to_string(meta).context("cannot serialize metadata")?;
    Ok(format!("# {header}\n{body}"))
}

/// Writes a table as CSV (plus sidecar) or as one JSON document with the rows under `key`.
pub fn write_table<R: Serialize>(out: Option<&Path>, format: Format, meta: &Metadata, key: &str, rows: &[R]) -> Result<()> {
    match format {
        Format::Csv => {
            emit(out, &csv_text(meta, rows)?)?;
            if let Some(path) = out {
                emit(Some(&sibling(path, ".meta.json")), &json_text(meta)?)?;
            }
            Ok(())
        }
        Format::Json => emit(out, &json_text(&json!({ "metadata": meta, key: rows }))?),
    }
}
