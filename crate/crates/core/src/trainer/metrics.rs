//! Per-step metric records, mirrored to NDJSON and CSV.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::trainer::TrainError;

pub const NDJSON_NAME: &str = "metrics.ndjson";
pub const CSV_NAME: &str = "metrics.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub val_loss: Option<f64>,
    pub chunks: Option<Vec<f64>>,
    /// Seconds since the run (or resumed run) started.
    pub wallclock_s: f64,
    /// Cumulative training FLOPs, `6 * trainable params * tokens`.
    pub flops: f64,
}

impl MetricRecord {
    /// Equality on every field except wallclock.
    pub fn same_values(&self, other: &Self) -> bool {
        let strip = |r: &Self| Self {
            wallclock_s: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }

    pub fn csv_header(chunks: usize) -> String {
        let mut h = String::from("step,lr,loss,grad_norm,val_loss");
        for c in 0..chunks {
            h.push_str(&format!(",chunk_{c}"));
        }
        h
    }

    /// CSV row; wallclock is left out so rows are reproducible.
    pub fn csv_row(&self, chunks: usize) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut row = format!(
            "{},{},{},{},{}",
            self.step,
            self.lr,
            self.loss,
            self.grad_norm,
            opt(self.val_loss)
        );
        for c in 0..chunks {
            row.push(',');
            row.push_str(&opt(self.chunks.as_ref().and_then(|v| v.get(c).copied())));
        }
        row
    }
}

/// Writes both metric files from scratch and appends one record at a time.
pub struct MetricsWriter {
    ndjson: BufWriter<File>,
    csv: BufWriter<File>,
    chunks: usize,
}

impl MetricsWriter {
    pub fn create(dir: &Path, chunks: usize, prior: &[MetricRecord]) -> Result<Self, TrainError> {
        std::fs::create_dir_all(dir)?;
        let mut w = Self {
            ndjson: BufWriter::new(File::create(dir.join(NDJSON_NAME))?),
            csv: BufWriter::new(File::create(dir.join(CSV_NAME))?),
            chunks,
        };
        writeln!(w.csv, "{}", MetricRecord::csv_header(chunks))?;
        for r in prior {
            w.append(r)?;
        }
        Ok(w)
    }

    pub fn append(&mut self, r: &MetricRecord) -> Result<(), TrainError> {
        serde_json::to_writer(&mut self.ndjson, r)?;
        self.ndjson.write_all(b"\n")?;
        writeln!(self.csv, "{}", r.csv_row(self.chunks))?;
        self.ndjson.flush()?;
        self.csv.flush()?;
        Ok(())
    }
}

pub fn ndjson_path(dir: &Path) -> PathBuf {
    dir.join(NDJSON_NAME)
}

/// Reads an NDJSON metric stream.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>, TrainError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
