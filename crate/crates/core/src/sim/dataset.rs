//! Owner-partitioned binary classification data.
//!
//! Every feature matrix carries a trailing constant `1.0` column so the
//! logistic model gets an intercept without special casing.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::market::uniform;

/// Rows of features with binary labels, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
}

impl Partition {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be at least 1".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                context: "partition features",
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        if let Some(&y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Domain {
                what: "label",
                constraint: "y in {0, 1}",
                value: y,
            });
        }
        Ok(Self { dim, features, labels })
    }

    fn from_rows(dim: usize, rows: &[(Vec<f64>, f64)]) -> Self {
        Self {
            dim,
            features: rows.iter().flat_map(|(x, _)| x.iter().copied()).collect(),
            labels: rows.iter().map(|(_, y)| *y).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.features[j * self.dim..(j + 1) * self.dim]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.features.chunks(self.dim).zip(self.labels.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    partitions: Vec<Partition>,
    test: Partition,
}

impl Dataset {
    /// Shuffles with `seed`, sets aside `holdout` of the rows for testing,
    /// truncates the rest to a multiple of `n_owners` and deals it out in
    /// equal consecutive blocks.
    pub fn from_rows(mut rows: Vec<(Vec<f64>, f64)>, n_owners: usize, seed: u64, holdout: f64) -> Result<Self> {
        if n_owners == 0 {
            return Err(Error::Config("at least one owner is required".into()));
        }
        if !(0.0..1.0).contains(&holdout) {
            return Err(Error::Domain {
                what: "holdout fraction",
                constraint: "0 <= f < 1",
                value: holdout,
            });
        }
        let dim = rows.first().map(|r| r.0.len()).ok_or(Error::EmptyData("dataset rows"))?;
        if let Some(r) = rows.iter().find(|r| r.0.len() != dim) {
            return Err(Error::DimensionMismatch {
                context: "dataset row",
                expected: dim,
                actual: r.0.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rows.shuffle(&mut rng);
        let test_rows = (holdout * rows.len() as f64).round() as usize;
        let train = rows.split_off(test_rows);
        let per_owner = train.len() / n_owners;
        if per_owner == 0 {
            return Err(Error::EmptyData("owner partitions"));
        }
        let partitions = train
            .chunks(per_owner)
            .take(n_owners)
            .map(|c| Partition::from_rows(dim, c))
            .collect::<Vec<_>>();
        let test = Partition::from_rows(dim, &rows);
        for p in partitions.iter().chain(std::iter::once(&test)) {
            Partition::new(dim, p.features.clone(), p.labels.clone())?;
        }
        Ok(Self { partitions, test })
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn test(&self) -> &Partition {
        &self.test
    }

    pub fn n_owners(&self) -> usize {
        self.partitions.len()
    }

    /// Feature dimension including the intercept column.
    pub fn dim(&self) -> usize {
        self.test.dim
    }

    /// All training rows pooled in owner order.
    pub fn pooled_training(&self) -> Partition {
        let dim = self.dim();
        Partition {
            dim,
            features: self.partitions.iter().flat_map(|p| p.features.iter().copied()).collect(),
            labels: self.partitions.iter().flat_map(|p| p.labels.iter().copied()).collect(),
        }
    }
}

pub const HOLDOUT_FRACTION: f64 = 0.2;

fn with_intercept(mut x: Vec<f64>) -> Vec<f64> {
    x.push(1.0);
    x
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; 1 - u keeps the log argument in (0, 1].
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Two unit-variance Gaussian blobs in `d = 8`, class means `-0.5` and
/// `+0.5` in every coordinate, balanced labels.
pub fn synthetic_blobs(n_owners: usize, rows_per_owner: usize, seed: u64) -> Result<Dataset> {
    const DIM: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = n_owners * rows_per_owner;
    let total = (train as f64 / (1.0 - HOLDOUT_FRACTION)).round() as usize;
    let rows = (0..total)
        .map(|j| {
            let y = (j % 2) as f64;
            let mean = y - 0.5;
            let x = (0..DIM).map(|_| mean + standard_normal(&mut rng)).collect();
            (with_intercept(x), y)
        })
        .collect();
    Dataset::from_rows(rows, n_owners, seed, HOLDOUT_FRACTION)
}

/// Points uniform in `[-1, 1]^d` labelled by a random hyperplane through the
/// origin, with the band `|w.x| < margin` left empty.
pub fn separable_dataset(n_owners: usize, rows_per_owner: usize, dim: usize, margin: f64, seed: u64) -> Result<Dataset> {
    if dim == 0 {
        return Err(Error::Config("dimension must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let total = ((n_owners * rows_per_owner) as f64 / (1.0 - HOLDOUT_FRACTION)).round() as usize;
    let mut rows = Vec::with_capacity(total);
    while rows.len() < total {
        let x: Vec<f64> = (0..dim).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let s = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / norm;
        if s.abs() < margin {
            continue;
        }
        rows.push((with_intercept(x), if s > 0.0 { 1.0 } else { 0.0 }));
    }
    Dataset::from_rows(rows, n_owners, seed, HOLDOUT_FRACTION)
}

enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

fn parse_label(raw: &str, line: usize) -> Result<f64> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "1.0" | "yes" | "true" => Ok(1.0),
        "0" | "0.0" | "no" | "false" => Ok(0.0),
        other => Err(Error::Parse {
            line,
            message: format!("label {other:?} is not binary"),
        }),
    }
}

/// Reads a comma-separated file with a header row. Numeric columns are
/// min-max scaled to `[0, 1]` (a constant column becomes all zeros), every
/// other column is one-hot encoded over its sorted distinct values.
pub fn load_csv_dataset(path: &Path, label_column: &str, n_owners: usize, seed: u64) -> Result<Dataset> {
    load_csv_dataset_with_holdout(path, label_column, n_owners, seed, HOLDOUT_FRACTION)
}

pub fn load_csv_dataset_with_holdout(
    path: &Path,
    label_column: &str,
    n_owners: usize,
    seed: u64,
    holdout: f64,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Config(format!("label column {label_column:?} not in header")))?;

    let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    let mut labels = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (c, field) in record.iter().enumerate() {
            if c == label_idx {
                labels.push(parse_label(field, line)?);
            } else {
                raw[c].push(field.trim().to_string());
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyData("csv rows"));
    }

    let columns: Vec<Column> = raw
        .into_iter()
        .enumerate()
        .filter(|(c, _)| *c != label_idx)
        .map(|(_, vals)| {
            let parsed: Option<Vec<f64>> = vals.iter().map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite())).collect();
            match parsed {
                Some(nums) => Column::Numeric(nums),
                None => Column::Categorical(vals),
            }
        })
        .collect();

    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); labels.len()];
    for col in &columns {
        match col {
            Column::Numeric(v) => {
                let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for (row, &x) in rows.iter_mut().zip(v) {
                    row.push(if hi > lo { (x - lo) / (hi - lo) } else { 0.0 });
                }
            }
            Column::Categorical(v) => {
                let levels: Vec<&String> = v.iter().collect::<BTreeSet<_>>().into_iter().collect();
                for (row, x) in rows.iter_mut().zip(v) {
                    row.extend(levels.iter().map(|l| if *l == x { 1.0 } else { 0.0 }));
                }
            }
        }
    }
    let rows = rows.into_iter().map(with_intercept).zip(labels).collect();
    Dataset::from_rows(rows, n_owners, seed, holdout)
}
