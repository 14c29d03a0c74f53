use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::{write_staleness_csv, StalenessStats, Timestamp, VectorClockRecord};
use crate::error::{Error, Result};
use crate::harness::csvio::{fmt_f64, read_rows, write_rows, write_rows_to_path, CsvRow};
use crate::model::Weights;

pub const EPOCHS_CSV_HEADER: [&str; 5] = [
    "epoch",
    "train_error",
    "test_error",
    "samples_seen",
    "wall_or_virtual_time",
];

pub const TIMING_CSV_HEADER: [&str; 5] =
    ["learner_id", "batch_index", "compute_t", "pull_wait_t", "push_wait_t"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: u64,
    pub train_error: f64,
    pub test_error: f64,
    pub samples_seen: u64,
    pub wall_or_virtual_time: f64,
}

impl CsvRow for EpochRow {
    fn fields(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            fmt_f64(self.train_error),
            fmt_f64(self.test_error),
            self.samples_seen.to_string(),
            fmt_f64(self.wall_or_virtual_time),
        ]
    }
}

/// Where one batch's time went, from the learner's point of view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub learner_id: usize,
    pub batch_index: u64,
    pub compute_t: f64,
    /// Blocked waiting for weights before the batch.
    pub pull_wait_t: f64,
    /// Blocked after the batch until its gradient could be handed off.
    pub push_wait_t: f64,
}

impl CsvRow for TimingSample {
    fn fields(&self) -> Vec<String> {
        vec![
            self.learner_id.to_string(),
            self.batch_index.to_string(),
            fmt_f64(self.compute_t),
            fmt_f64(self.pull_wait_t),
            fmt_f64(self.push_wait_t),
        ]
    }
}

/// Percentage of learner time spent computing:
/// `100 * compute / (compute + blocked)`.
pub fn communication_overlap(samples: &[TimingSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Precondition("communication overlap needs timing samples".into()));
    }
    let compute: f64 = samples.iter().map(|s| s.compute_t).sum();
    let blocked: f64 = samples.iter().map(|s| s.pull_wait_t + s.push_wait_t).sum();
    let total = compute + blocked;
    if total <= 0.0 {
        return Err(Error::Precondition("timing samples record no time".into()));
    }
    Ok(100.0 * compute / total)
}

/// Everything a run recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    /// One vector clock per update, in update order.
    pub records: Vec<VectorClockRecord>,
    pub epochs: Vec<EpochRow>,
    pub timing: Vec<TimingSample>,
    pub final_weights: Weights,
    pub final_timestamp: Timestamp,
    pub updates: u64,
    pub gradients_consumed: u64,
    /// Gradients that reached the root, including any that arrived after
    /// shutdown began and were discarded.
    pub gradients_received: u64,
    /// Gradients discarded at any server after shutdown began.
    pub gradients_discarded: u64,
    /// Batches computed over all learners.
    pub batches_computed: u64,
    pub samples_consumed: u64,
    /// Virtual or wall-clock seconds until the root stopped.
    pub total_time: f64,
    pub initial_loss: f64,
    pub final_test_error: f64,
    pub diverged: bool,
    /// Why the run stopped early, if it did.
    pub abort: Option<String>,
    pub learners: usize,
    pub gradients_per_update: usize,
    pub skipped_pulls: u64,
    pub pulls: u64,
}

impl RunLog {
    pub fn staleness_stats(&self) -> Result<StalenessStats> {
        StalenessStats::from_records(&self.records)
    }

    pub fn staleness_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_staleness_csv(&mut buf, &self.records)?;
        Ok(buf)
    }

    pub fn epochs_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_rows(&mut buf, &EPOCHS_CSV_HEADER, &self.epochs)?;
        Ok(buf)
    }

    pub fn timing_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_rows(&mut buf, &TIMING_CSV_HEADER, &self.timing)?;
        Ok(buf)
    }

    /// Writes `staleness.csv`, `epochs.csv` and `timing.csv` into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(dir.join("staleness.csv"))?;
        write_staleness_csv(std::io::BufWriter::new(f), &self.records)?;
        write_rows_to_path(&dir.join("epochs.csv"), &EPOCHS_CSV_HEADER, &self.epochs)?;
        write_rows_to_path(&dir.join("timing.csv"), &TIMING_CSV_HEADER, &self.timing)?;
        Ok(())
    }

    /// Hex SHA-256 of the serialized final weights.
    pub fn weights_checksum(&self) -> String {
        hex_digest(&self.final_weights.to_bytes())
    }

    /// Hex SHA-256 over the final weights and all three CSV tables.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.final_weights.to_bytes());
        h.update(self.final_timestamp.0.to_le_bytes());
        h.update(self.staleness_csv_bytes()?);
        h.update(self.epochs_csv_bytes()?);
        h.update(self.timing_csv_bytes()?);
        Ok(to_hex(&h.finalize()))
    }

    pub fn communication_overlap(&self) -> Result<f64> {
        communication_overlap(&self.timing)
    }
}

pub fn read_epochs_csv(path: &Path) -> Result<Vec<EpochRow>> {
    read_rows(path, &EPOCHS_CSV_HEADER)
}

pub fn read_timing_csv(path: &Path) -> Result<Vec<TimingSample>> {
    read_rows(path, &TIMING_CSV_HEADER)
}

fn hex_digest(bytes: &[u8]) -> String {
    to_hex(&Sha256::digest(bytes))
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
