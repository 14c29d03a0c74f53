//! Synthetic Gaussian-cluster datasets and a CSV loader.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::tensor::{Matrix, RngStream};

const STREAM_CENTERS: u64 = 10;
const STREAM_POINTS: u64 = 11;

/// Gaussian class clusters: class centres are drawn from
/// `N(0, separation^2 I)` and every point is its centre plus `N(0, I)`
/// noise. With probability `label_noise` a point's label is replaced by a
/// uniformly drawn class (possibly the original one).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub classes: usize,
    pub dims: usize,
    pub samples_per_class: usize,
    pub separation: f64,
    pub label_noise: f64,
    /// Fraction of the shuffled examples held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dims: 32,
            samples_per_class: 600,
            separation: 0.5,
            label_noise: 0.0,
            test_fraction: 1.0 / 6.0,
            seed: 1,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dims == 0 || self.samples_per_class == 0 {
            return Err(Error::Config(
                "synthetic data needs >= 2 classes, >= 1 dimension and >= 1 sample per class".into(),
            ));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Config("separation must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config("label noise must be in [0, 1]".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test fraction must be in (0, 1)".into()));
        }
        let total = self.classes * self.samples_per_class;
        let test = split_point(total, self.test_fraction);
        if test == 0 || test == total {
            return Err(Error::Config("split leaves an empty train or test set".into()));
        }
        Ok(())
    }
}

fn split_point(total: usize, test_fraction: f64) -> usize {
    ((total as f64) * test_fraction).round() as usize
}

/// Deterministic `(train, test)` pair; the split is disjoint.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut crng = RngStream::new(spec.seed, STREAM_CENTERS);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dims).map(|_| spec.separation * crng.gaussian()).collect())
        .collect();
    let mut rng = RngStream::new(spec.seed, STREAM_POINTS);
    let total = spec.classes * spec.samples_per_class;
    let mut rows = Vec::with_capacity(total);
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let x: Vec<f64> = c.iter().map(|m| m + rng.gaussian()).collect();
            let y = if spec.label_noise > 0.0 && rng.uniform() < spec.label_noise {
                rng.index(spec.classes)
            } else {
                k
            };
            rows.push((x, y));
        }
    }
    // Fisher-Yates with the same stream
    for i in (1..rows.len()).rev() {
        let j = rng.index(i + 1);
        rows.swap(i, j);
    }
    let n_test = split_point(total, spec.test_fraction);
    let test_rows = rows.split_off(total - n_test);
    Ok((to_dataset(rows, spec.dims, spec.classes)?, to_dataset(test_rows, spec.dims, spec.classes)?))
}

fn to_dataset(rows: Vec<(Vec<f64>, usize)>, dims: usize, classes: usize) -> Result<Dataset> {
    let mut data = Vec::with_capacity(rows.len() * dims);
    let mut labels = Vec::with_capacity(rows.len());
    for (x, y) in rows {
        data.extend(x);
        labels.push(y);
    }
    Dataset::new(Matrix::from_vec(labels.len(), dims, data)?, labels, classes)
}

/// How to read a labelled CSV file: a header row, one integer label column
/// named `label_column`, every other column a numeric feature.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub label_column: String,
    /// Class count; inferred as `max label + 1` when `None`.
    pub classes: Option<usize>,
    /// The last `round(test_fraction * rows)` rows become the test set.
    pub test_fraction: f64,
    /// Subtract the per-feature training mean from both splits.
    pub mean_subtract: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: "label".into(),
            classes: None,
            test_fraction: 0.0,
            mean_subtract: true,
        }
    }
}

/// Load a CSV dataset. With `test_fraction = 0` the test set is a copy of
/// the training set.
pub fn load_csv_dataset(path: &Path, schema: &CsvSchema) -> Result<(Dataset, Dataset)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_csv_dataset(&text, schema)
}

pub fn parse_csv_dataset(text: &str, schema: &CsvSchema) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&schema.test_fraction) {
        return Err(Error::Config("test fraction must be in [0, 1)".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing label column '{}'", schema.label_column),
        })?;
    let dims = headers.len() - 1;
    if dims == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "no feature columns".into(),
        });
    }
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        for (i, field) in rec.iter().enumerate() {
            if i == label_idx {
                let y: usize = field.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("label '{field}' is not a non-negative integer"),
                })?;
                labels.push(y);
            } else {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("feature '{field}' in column '{}' is not a number", &headers[i]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: format!("non-finite feature in column '{}'", &headers[i]),
                    });
                }
                feats.push(v);
            }
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Validation("dataset has no rows".into()));
    }
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let classes = match schema.classes {
        Some(c) => {
            if max_label >= c {
                return Err(Error::Validation(format!("label {max_label} out of range for {c} classes")));
            }
            c
        }
        None => (max_label + 1).max(2),
    };
    let n_test = if schema.test_fraction > 0.0 {
        split_point(n, schema.test_fraction)
    } else {
        0
    };
    let n_train = n - n_test;
    if n_train == 0 {
        return Err(Error::Validation("split leaves no training rows".into()));
    }
    if schema.mean_subtract {
        let mut mean = vec![0.0; dims];
        for row in feats[..n_train * dims].chunks(dims) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n_train as f64;
        }
        for row in feats.chunks_mut(dims) {
            for (v, m) in row.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
    }
    let test_feats = feats.split_off(n_train * dims);
    let test_labels = labels.split_off(n_train);
    let train = Dataset::new(Matrix::from_vec(n_train, dims, feats)?, labels, classes)?;
    let test = if n_test == 0 {
        train.clone()
    } else {
        Dataset::new(Matrix::from_vec(n_test, dims, test_feats)?, test_labels, classes)?
    };
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_split() {
        let spec = SyntheticDatasetSpec {
            samples_per_class: 30,
            ..Default::default()
        };
        let (a, b) = generate_synthetic(&spec).unwrap();
        let (c, d) = generate_synthetic(&spec).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, d);
        assert_eq!(a.len() + b.len(), 300);
        assert_eq!(b.len(), 50);
        let other = generate_synthetic(&SyntheticDatasetSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(other.0, a);
    }

    #[test]
    fn default_split_sizes() {
        let (tr, te) = generate_synthetic(&SyntheticDatasetSpec::default()).unwrap();
        assert_eq!((tr.len(), te.len()), (5000, 1000));
        assert_eq!(tr.dims(), 32);
    }

    #[test]
    fn csv_toy_file() {
        let text = "a,b,label\n1,2,0\n3,4,1\n5,6,1\n7,8,0\n";
        let schema = CsvSchema {
            mean_subtract: false,
            ..Default::default()
        };
        let (tr, _) = parse_csv_dataset(text, &schema).unwrap();
        assert_eq!(tr.len(), 4);
        assert_eq!(tr.inputs.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(tr.labels, vec![0, 1, 1, 0]);
    }

    #[test]
    fn csv_mean_subtraction() {
        let text = "x,label,y\n1.5,0,10\n2.5,1,-3\n-7,0,4.25\n";
        let (tr, _) = parse_csv_dataset(text, &CsvSchema::default()).unwrap();
        for c in 0..2 {
            let m: f64 = (0..3).map(|r| tr.inputs.get(r, c)).sum::<f64>() / 3.0;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn csv_errors() {
        let missing = parse_csv_dataset("a,b\n1,2\n", &CsvSchema::default()).unwrap_err();
        assert!(missing.to_string().contains("label"));
        let bad = parse_csv_dataset("a,label\n1,0\nx,1\n", &CsvSchema::default()).unwrap_err();
        assert!(matches!(bad, Error::Parse { line: 3, .. }), "{bad:?}");
        let schema = CsvSchema {
            classes: Some(2),
            ..Default::default()
        };
        let range = parse_csv_dataset("a,label\n1,0\n2,5\n", &schema).unwrap_err();
        assert!(matches!(range, Error::Validation(_)));
    }
}
