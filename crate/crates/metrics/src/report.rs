use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MetricsError, Result};

/// One evaluated configuration. Field order is the column order of
/// `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_id: String,
    pub mode: String,
    pub w: f64,
    pub queries: u64,
    pub fd: f64,
    pub kld: f64,
    pub clap_a: f64,
    pub clap_t: f64,
    pub is: f64,
    /// Only filled by seed-diversity evaluations.
    pub diversity_std: Option<f64>,
    /// Sampling seeds joined with `;`.
    pub seeds: String,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn seed_set(seeds: &[u64]) -> String {
        seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";")
    }

    /// Checks the range invariants every row must satisfy.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| MetricsError::Shape(format!("{what} = {v} is out of range"));
        if !(self.fd >= 0.0) {
            return Err(bad("fd", self.fd));
        }
        for (name, v) in [("clap_a", self.clap_a), ("clap_t", self.clap_t)] {
            if !(0.0..=100.0).contains(&v) {
                return Err(bad(name, v));
            }
        }
        if !(self.is >= 1.0) {
            return Err(bad("is", self.is));
        }
        if let Some(d) = self.diversity_std {
            if !(d >= 0.0) {
                return Err(bad("diversity_std", d));
            }
        }
        Ok(())
    }
}

/// Appends rows to a CSV file, writing the header only when the file is new
/// or empty.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsReport]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        r.validate()?;
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsReport>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(MetricsError::from)).collect()
}

/// Writes the full row set as a JSON array, replacing any previous file.
pub fn write_metrics_json(path: &Path, rows: &[MetricsReport]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(rows)?)?;
    Ok(())
}
