use std::fs;
use std::path::{Path, PathBuf};

use land_core::{DataMatrix, LabeledDataset};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Reads a `x1,...,xD[,label]` CSV and returns the dataset and the SHA-256
/// of the file bytes.
pub fn read_dataset(path: &Path) -> Result<(LabeledDataset, String), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let hash = sha256_hex(&bytes);
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let header = reader.headers().map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?.clone();
    let names: Vec<&str> = header.iter().collect();
    let has_label = names.last() == Some(&"label");
    let dim = names.len() - usize::from(has_label);
    if dim == 0 || names[..dim].iter().enumerate().any(|(i, n)| *n != format!("x{}", i + 1)) {
        return Err(CliError::usage(format!("{}: header must be x1,...,xD[,label]", path.display())));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let bad = |field: &str| CliError::usage(format!("{}: row {}: bad value {field:?}", path.display(), line + 1));
        for f in rec.iter().take(dim) {
            values.push(f.trim().parse::<f64>().map_err(|_| bad(f))?);
        }
        if has_label {
            let f = &rec[dim];
            labels.push(f.trim().parse::<i64>().map_err(|_| bad(f))?);
        }
    }
    let n = values.len() / dim;
    let points = DataMatrix::new(n, dim, values)?;
    Ok((LabeledDataset::new(points, has_label.then_some(labels))?, hash))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_dataset(path: &Path, ds: &LabeledDataset) -> Result<(), CliError> {
    let d = ds.points.dim();
    let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    if ds.labels.is_some() {
        header.push("label".into());
    }
    let mut rows = Vec::with_capacity(ds.points.n_rows());
    for (i, x) in ds.points.rows().enumerate() {
        let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        if let Some(l) = &ds.labels {
            row.push(l[i].to_string());
        }
        rows.push(row);
    }
    write_csv(path, &header, &rows)
}

pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[S], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let io = |e: csv::Error| CliError::io(e.to_string());
    w.write_record(header.iter().map(|h| h.as_ref())).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io(e.to_string()))?;
    write_bytes(path, &bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// `<path>.config.json`, holding the resolved configuration of a CSV output.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}
