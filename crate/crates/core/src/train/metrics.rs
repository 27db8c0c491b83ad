use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::store::HISTOGRAM_BUCKETS;

pub const METRICS_CSV_HEADER: &str = "ts,epoch,bound,workers,lookahead_depth,samples,samples_per_second,\
train_logloss,holdout_auc,holdout_logloss,disk_reads_per_sample,gate_waits,staleness_histogram";

/// One row per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// Seconds since the start of training.
    pub timestamp: f64,
    pub epoch: usize,
    pub samples: u64,
    pub samples_per_second: f64,
    pub train_logloss: f64,
    /// `NaN` when evaluation is disabled.
    pub holdout_auc: f64,
    pub holdout_logloss: f64,
    /// Pre-acquire staleness of every read in the epoch; bucket 0 holds 0,
    /// bucket `i` holds `[2^(i-1), 2^i)`.
    pub staleness_histogram: [u64; HISTOGRAM_BUCKETS],
    pub disk_reads_per_sample: f64,
    pub gate_waits: u64,
}

/// Run-level context written next to every record.
#[derive(Debug, Clone)]
pub struct RunLabel {
    pub bound: String,
    pub workers: usize,
    pub lookahead_depth: usize,
}

impl MetricsRecord {
    pub fn csv_row(&self, label: &RunLabel) -> String {
        let hist: Vec<String> = self.staleness_histogram.iter().map(u64::to_string).collect();
        format!(
            "{:.3},{},{},{},{},{},{:.1},{:.6},{:.6},{:.6},{:.4},{},{}",
            self.timestamp,
            self.epoch,
            label.bound,
            label.workers,
            label.lookahead_depth,
            self.samples,
            self.samples_per_second,
            self.train_logloss,
            self.holdout_auc,
            self.holdout_logloss,
            self.disk_reads_per_sample,
            self.gate_waits,
            hist.join(";")
        )
    }
}

/// Appends records to `path`, writing the header when the file is new.
pub fn append_csv(path: &Path, label: &RunLabel, records: &[MetricsRecord]) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{METRICS_CSV_HEADER}")?;
    }
    for r in records {
        writeln!(f, "{}", r.csv_row(label))?;
    }
    Ok(())
}
