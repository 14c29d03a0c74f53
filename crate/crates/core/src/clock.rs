//! Scalar weight timestamps, per-update vector clocks and staleness
//! statistics.
//!
//! The server's timestamp starts at 0 and advances by exactly one per weight
//! update. A gradient inherits the timestamp of the weights it was computed
//! from; its staleness is the server timestamp at application time minus
//! that value.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn next(self) -> Timestamp {
        Timestamp(self.0 + 1)
    }
}

impl std::fmt::Display for Timestamp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// `server_ts - gradient_ts`; a gradient from the future is a transport bug.
pub fn staleness(gradient_ts: Timestamp, server_ts: Timestamp) -> Result<u64> {
    server_ts
        .0
        .checked_sub(gradient_ts.0)
        .ok_or(Error::ClockViolation {
            gradient: gradient_ts.0,
            server: server_ts.0,
        })
}

/// The contributors behind the update that moved the weights to
/// `update_index`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VectorClockRecord {
    pub update_index: Timestamp,
    pub contributors: Vec<Timestamp>,
    pub learners: Vec<usize>,
}

impl VectorClockRecord {
    pub fn new(
        update_index: Timestamp,
        contributors: Vec<Timestamp>,
        learners: Vec<usize>,
    ) -> Result<Self> {
        if contributors.is_empty() {
            return Err(Error::Precondition("a vector clock needs at least one contributor".into()));
        }
        if contributors.len() != learners.len() {
            return Err(Error::Shape(format!(
                "{} contributor timestamps but {} learner ids",
                contributors.len(),
                learners.len()
            )));
        }
        if let Some(bad) = contributors.iter().find(|t| **t >= update_index) {
            return Err(Error::ClockViolation {
                gradient: bad.0,
                server: update_index.0.saturating_sub(1),
            });
        }
        Ok(Self {
            update_index,
            contributors,
            learners,
        })
    }

    /// Per-gradient staleness relative to the pre-update timestamp `i-1`.
    pub fn stalenesses(&self) -> impl Iterator<Item = u64> + '_ {
        let base = self.update_index.0 - 1;
        self.contributors.iter().map(move |t| base - t.0)
    }

    pub fn max_staleness(&self) -> u64 {
        self.stalenesses().max().unwrap_or(0)
    }
}

/// `(i-1) - mean(contributors)`.
pub fn average_staleness(rec: &VectorClockRecord) -> Result<f64> {
    if rec.contributors.is_empty() {
        return Err(Error::Precondition("average staleness of an empty vector clock".into()));
    }
    let mean =
        rec.contributors.iter().map(|t| t.0 as f64).sum::<f64>() / rec.contributors.len() as f64;
    Ok((rec.update_index.0 as f64 - 1.0) - mean)
}

/// Distribution of per-gradient staleness values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StalenessHistogram {
    pub counts: BTreeMap<u64, u64>,
}

impl StalenessHistogram {
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Fraction of gradients with staleness strictly greater than `threshold`.
    pub fn tail(&self, threshold: u64) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let over: u64 = self.counts.range(threshold + 1..).map(|(_, c)| c).sum();
        over as f64 / total as f64
    }

    pub fn support(&self) -> Vec<u64> {
        self.counts.keys().copied().collect()
    }

    pub fn max(&self) -> Option<u64> {
        self.counts.keys().next_back().copied()
    }

    pub fn mean(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.counts.iter().map(|(s, c)| *s as f64 * *c as f64).sum::<f64>() / total as f64
    }
}

/// Run-level staleness summary built from update records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StalenessStats {
    /// Per-update `<sigma>`, in update order.
    pub per_update_mean: Vec<f64>,
    pub histogram: StalenessHistogram,
    /// Mean of per-gradient staleness over the whole run.
    pub run_mean: f64,
}

impl StalenessStats {
    pub fn from_records(records: &[VectorClockRecord]) -> Result<Self> {
        let mut per_update_mean = Vec::with_capacity(records.len());
        let mut histogram = StalenessHistogram::default();
        for r in records {
            per_update_mean.push(average_staleness(r)?);
            for s in r.stalenesses() {
                *histogram.counts.entry(s).or_insert(0) += 1;
            }
        }
        let run_mean = histogram.mean();
        Ok(Self {
            per_update_mean,
            histogram,
            run_mean,
        })
    }

    pub fn gradient_count(&self) -> u64 {
        self.histogram.total()
    }
}

/// Histogram of every gradient recorded in `records`, plus the tail
/// fraction beyond `threshold`.
pub fn staleness_histogram(
    records: &[VectorClockRecord],
    threshold: u64,
) -> Result<(StalenessHistogram, f64)> {
    if records.is_empty() {
        return Err(Error::Precondition("staleness histogram needs at least one update".into()));
    }
    let stats = StalenessStats::from_records(records)?;
    let tail = stats.histogram.tail(threshold);
    Ok((stats.histogram, tail))
}

pub const STALENESS_CSV_HEADER: [&str; 5] = [
    "update_index",
    "server_ts",
    "num_contributors",
    "mean_staleness",
    "max_staleness",
];

/// One row of the per-update staleness table. `update_index` counts updates
/// from 0; `server_ts` is the timestamp the update produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StalenessRow {
    pub update_index: u64,
    pub server_ts: u64,
    pub num_contributors: usize,
    pub mean_staleness: f64,
    pub max_staleness: u64,
}

impl StalenessRow {
    pub fn from_record(ordinal: u64, rec: &VectorClockRecord) -> Result<Self> {
        Ok(Self {
            update_index: ordinal,
            server_ts: rec.update_index.0,
            num_contributors: rec.contributors.len(),
            mean_staleness: average_staleness(rec)?,
            max_staleness: rec.max_staleness(),
        })
    }
}

pub fn write_staleness_csv<W: Write>(out: W, records: &[VectorClockRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STALENESS_CSV_HEADER)?;
    for (i, r) in records.iter().enumerate() {
        let row = StalenessRow::from_record(i as u64, r)?;
        w.write_record([
            row.update_index.to_string(),
            row.server_ts.to_string(),
            row.num_contributors.to_string(),
            row.mean_staleness.to_string(),
            row.max_staleness.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_staleness_csv(path: &Path) -> Result<Vec<StalenessRow>> {
    crate::harness::csvio::read_rows(path, &STALENESS_CSV_HEADER)
}
