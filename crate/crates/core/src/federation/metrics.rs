use std::fs;
use std::path::Path;

use super::run::{RoundLog, RoundMetrics};
use crate::error::{Error, Result};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Metrics rows as CSV text. Floats use the shortest exact representation,
/// and nothing time-dependent is included, so equal runs give equal bytes.
pub fn metrics_csv(rows: &[RoundMetrics]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

pub fn write_metrics_csv(path: &Path, rows: &[RoundMetrics]) -> Result<()> {
    fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<RoundMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

/// Full per-round log, wall-clock times and audits included.
pub fn write_round_log(path: &Path, log: &[RoundLog]) -> Result<()> {
    let text = serde_json::to_string_pretty(log).expect("log serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_round_log(path: &Path) -> Result<Vec<RoundLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}
