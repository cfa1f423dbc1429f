//! JSON and CSV files. JSON floats use the shortest representation that
//! parses back to the same `f64`, so files round-trip exactly.

use std::fs;
use std::path::{Path, PathBuf};

use critembed::landscape::TracePoint;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::CliError;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("schema error in {}: {e}", path.display())))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serializable report");
    text.push('\n');
    text
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_text(path, &to_json(value))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

/// `iteration,risk,grad_inf_norm` rows.
pub fn write_trace_csv(path: &Path, trace: &[TracePoint]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in trace {
        w.serialize(p).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    write_text(path, &String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Columns given by `header`, one row per entry of `rows`.
pub fn write_table_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    for row in rows {
        w.write_record(row.iter().map(f64::to_string))
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    write_text(path, &String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Resolves `path` against the directory of the file that referenced it.
pub fn relative_to(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(path)
    }
}
