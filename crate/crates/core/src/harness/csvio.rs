//! Schema-checked CSV reading and writing shared by every table the crate
//! emits.
//!
//! Floats are written with Rust's shortest round-trip formatting so that a
//! table read back parses to the identical values.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

/// A row that can be written as CSV fields in header order.
pub trait CsvRow {
    fn fields(&self) -> Vec<String>;
}

/// Write `header` followed by every row.
pub fn write_rows<W: Write, R: CsvRow>(out: W, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        let f = r.fields();
        if f.len() != header.len() {
            return Err(Error::Shape(format!(
                "row has {} fields, header has {}",
                f.len(),
                header.len()
            )));
        }
        w.write_record(&f)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rows_to_path<R: CsvRow>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    write_rows(std::io::BufWriter::new(f), header, rows)
}

/// Appends rows one at a time, flushing after each so partial results
/// survive an interrupted sweep.
pub struct IncrementalWriter<W: Write> {
    inner: csv::Writer<W>,
    width: usize,
}

impl<W: Write> IncrementalWriter<W> {
    pub fn new(out: W, header: &[&str]) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(header)?;
        inner.flush()?;
        Ok(Self {
            inner,
            width: header.len(),
        })
    }

    pub fn push<R: CsvRow>(&mut self, row: &R) -> Result<()> {
        let f = row.fields();
        if f.len() != self.width {
            return Err(Error::Shape(format!("row has {} fields, header has {}", f.len(), self.width)));
        }
        self.inner.write_record(&f)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Parse a CSV whose header must equal `header` exactly.
pub fn read_rows<T: DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_rows_from(f, header)
}

pub fn read_rows_from<R: std::io::Read, T: DeserializeOwned>(input: R, header: &[&str]) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_reader(input);
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {:?}, found {:?}", header.join(","), found.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Shortest round-trip text for a float.
pub fn fmt_f64(x: f64) -> String {
    x.to_string()
}
