//! Regression datasets: CSV ingestion, synthetic generators and
//! deterministic train/test splitting.
//!
//! Features are continuous; categorical inputs must be encoded numerically
//! before ingestion. Missing or non-finite values are rejected.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot open {path}: {source}")]
    Open { path: String, source: io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("empty file: no header or no data rows")]
    Empty,
    #[error("response column `{0}` not found in header")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a finite number")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("row {row}: expected {expected} fields, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// `N` rows of `(y, x)` with `x` a `p`-vector, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    responses: Vec<f64>,
    features: Vec<f64>,
    feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        responses: Vec<f64>,
        features: Vec<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self, DataError> {
        let p = feature_names.len();
        if p == 0 {
            return Err(DataError::Invalid("at least one feature is required".into()));
        }
        if responses.is_empty() {
            return Err(DataError::Invalid("at least one row is required".into()));
        }
        if features.len() != responses.len() * p {
            return Err(DataError::Invalid(format!(
                "feature matrix has {} values, expected {} rows x {} features",
                features.len(),
                responses.len(),
                p
            )));
        }
        if let Some(i) = responses.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!("response at row {i} is not finite")));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!(
                "feature value at row {}, column {} is not finite",
                i / p,
                i % p
            )));
        }
        Ok(Self { responses, features, feature_names })
    }

    pub fn n_rows(&self) -> usize {
        self.responses.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    /// Row-major `N x p` feature matrix.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_features();
        &self.features[i * p..(i + 1) * p]
    }

    pub fn response(&self, i: usize) -> f64 {
        self.responses[i]
    }

    /// Copy of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let p = self.n_features();
        let mut features = Vec::with_capacity(rows.len() * p);
        let mut responses = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            responses.push(self.responses[r]);
        }
        Dataset { responses, features, feature_names: self.feature_names.clone() }
    }

    /// Row count plus a content hash over names, responses and features.
    pub fn fingerprint(&self) -> DatasetFingerprint {
        let mut h = Sha256::new();
        h.update((self.n_rows() as u64).to_le_bytes());
        h.update((self.n_features() as u64).to_le_bytes());
        for name in &self.feature_names {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
        }
        for v in &self.responses {
            h.update(v.to_le_bytes());
        }
        for v in &self.features {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        DatasetFingerprint { rows: self.n_rows() as u64, hash: u64::from_le_bytes(head) }
    }

    /// Writes the dataset as CSV with the response as the last column.
    pub fn write_csv<W: Write>(&self, out: W, response_column: &str) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push(response_column);
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(self.n_features() + 1);
        for i in 0..self.n_rows() {
            record.clear();
            // `Display` for f64 is the shortest representation that parses
            // back to the same bits.
            record.extend(self.row(i).iter().map(|v| v.to_string()));
            record.push(self.responses[i].to_string());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, response_column: &str) -> Result<(), DataError> {
        let path = path.as_ref();
        let f = File::create(path)
            .map_err(|source| DataError::Open { path: path.display().to_string(), source })?;
        self.write_csv(io::BufWriter::new(f), response_column)
    }
}

/// Identifies the exact data a forest was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DatasetFingerprint {
    pub rows: u64,
    pub hash: u64,
}

/// Loads a CSV file with a header row. `response_column` becomes `y`; every
/// other column becomes a feature, in header order.
pub fn load_csv(path: impl AsRef<Path>, response_column: &str) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let f = File::open(path)
        .map_err(|source| DataError::Open { path: path.display().to_string(), source })?;
    read_csv(io::BufReader::new(f), response_column)
}

/// Parses CSV text from any reader. Row numbers in errors are 1-based and
/// count data rows only (the header is not row 1).
pub fn read_csv<R: io::Read>(input: R, response_column: &str) -> Result<Dataset, DataError> {
    let table = read_table(input, response_column, true)?;
    Dataset::new(table.responses.unwrap_or_default(), table.features, table.feature_names)
}

/// Reads only the feature columns of a CSV file: `response_column` is
/// dropped when present and every other column must be numeric.
pub fn load_features_csv(
    path: impl AsRef<Path>,
    response_column: &str,
) -> Result<(Vec<f64>, Vec<String>), DataError> {
    let path = path.as_ref();
    let f = File::open(path)
        .map_err(|source| DataError::Open { path: path.display().to_string(), source })?;
    let table = read_table(io::BufReader::new(f), response_column, false)?;
    Ok((table.features, table.feature_names))
}

struct Table {
    responses: Option<Vec<f64>>,
    features: Vec<f64>,
    feature_names: Vec<String>,
}

fn read_table<R: io::Read>(
    input: R,
    response_column: &str,
    require_response: bool,
) -> Result<Table, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(DataError::Empty);
    }
    let response_idx = header.iter().position(|h| h == response_column);
    if require_response && response_idx.is_none() {
        return Err(DataError::MissingColumn(response_column.to_owned()));
    }
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| Some(i) != response_idx)
        .map(|(_, h)| h.clone())
        .collect();
    if feature_names.is_empty() {
        return Err(DataError::Invalid("no feature columns besides the response".into()));
    }

    let mut responses = Vec::new();
    let mut features = Vec::new();
    let mut rows = 0;
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let row = idx + 1;
        if record.len() != header.len() {
            return Err(DataError::RaggedRow { row, expected: header.len(), found: record.len() });
        }
        for (col, field) in record.iter().enumerate() {
            let value = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::NonNumeric {
                    row,
                    column: header[col].clone(),
                    value: field.to_owned(),
                })?;
            if Some(col) == response_idx {
                responses.push(value);
            } else {
                features.push(value);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DataError::Empty);
    }
    Ok(Table { responses: response_idx.map(|_| responses), features, feature_names })
}

fn default_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

/// The Friedman #1 benchmark:
/// `y = 10 sin(pi x1 x2) + 20 (x3 - 0.5)^2 + 10 x4 + 5 x5 + eps`, with ten
/// uniform features of which only the first five are informative.
pub fn gen_friedman1(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::InvalidParameter("n must be at least 1".into()));
    }
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(DataError::InvalidParameter(format!(
            "noise_sd must be a finite non-negative number, got {noise_sd}"
        )));
    }
    const P: usize = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xF1, 0));
    let mut features = Vec::with_capacity(n * P);
    let mut responses = Vec::with_capacity(n);
    for _ in 0..n {
        let start = features.len();
        features.extend((0..P).map(|_| rng.gen::<f64>()));
        let eps: f64 = rng.sample(StandardNormal);
        responses.push(friedman1_mean(&features[start..start + P]) + noise_sd * eps);
    }
    Dataset::new(responses, features, default_names(P))
}

/// Noise-free Friedman #1 response.
pub fn friedman1_mean(x: &[f64]) -> f64 {
    10.0 * (std::f64::consts::PI * x[0] * x[1]).sin()
        + 20.0 * (x[2] - 0.5).powi(2)
        + 10.0 * x[3]
        + 5.0 * x[4]
}

/// One axis-aligned cut: `x[feature] <= cutpoint` versus `> cutpoint`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisThreshold {
    pub feature: usize,
    pub cutpoint: f64,
}

/// A piecewise-constant regression function over `[0,1]^p`.
///
/// The `t` thresholds split space into `2^t` cells. A point's cell index
/// reads the threshold sides as binary digits, first threshold most
/// significant, with `> cutpoint` as digit 1. With one threshold,
/// `leaf_values[0]` is the `<=` side.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisPartition {
    pub n_features: usize,
    pub thresholds: Vec<AxisThreshold>,
    pub leaf_values: Vec<f64>,
    /// Points closer than this to any cutpoint are redrawn.
    pub margin: f64,
}

impl AxisPartition {
    pub fn new(thresholds: Vec<AxisThreshold>, leaf_values: Vec<f64>) -> Self {
        let n_features = thresholds.iter().map(|t| t.feature + 1).max().unwrap_or(1);
        Self { n_features, thresholds, leaf_values, margin: 0.0 }
    }

    pub fn with_features(mut self, p: usize) -> Self {
        self.n_features = p;
        self
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn n_cells(&self) -> usize {
        1usize << self.thresholds.len()
    }

    pub fn cell(&self, x: &[f64]) -> usize {
        self.thresholds
            .iter()
            .fold(0, |acc, t| (acc << 1) | usize::from(x[t.feature] > t.cutpoint))
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.leaf_values[self.cell(x)]
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.thresholds.is_empty() {
            return Err(DataError::InvalidParameter("at least one threshold is required".into()));
        }
        if self.thresholds.len() > 20 {
            return Err(DataError::InvalidParameter("at most 20 thresholds are supported".into()));
        }
        if self.leaf_values.len() != self.n_cells() {
            return Err(DataError::InvalidParameter(format!(
                "{} thresholds induce {} cells but {} leaf values were given",
                self.thresholds.len(),
                self.n_cells(),
                self.leaf_values.len()
            )));
        }
        if self.n_features == 0 {
            return Err(DataError::InvalidParameter("need at least one feature".into()));
        }
        for t in &self.thresholds {
            if t.feature >= self.n_features {
                return Err(DataError::InvalidParameter(format!(
                    "threshold feature {} out of range for {} features",
                    t.feature, self.n_features
                )));
            }
            if !(t.cutpoint > 0.0 && t.cutpoint < 1.0) {
                return Err(DataError::InvalidParameter(format!(
                    "cutpoint {} must lie inside (0, 1)",
                    t.cutpoint
                )));
            }
            if t.cutpoint - self.margin <= 0.0 || t.cutpoint + self.margin >= 1.0 {
                return Err(DataError::InvalidParameter(format!(
                    "margin {} leaves no room on one side of cutpoint {}",
                    self.margin, t.cutpoint
                )));
            }
        }
        if !(self.margin >= 0.0) || self.leaf_values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::InvalidParameter("margin and leaf values must be finite, margin >= 0".into()));
        }
        Ok(())
    }
}

/// Noiseless data whose regression function is exactly `partition`;
/// features are uniform on `[0,1]^p`.
pub fn gen_axis_partition(
    n: usize,
    partition: &AxisPartition,
    seed: u64,
) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::InvalidParameter("n must be at least 1".into()));
    }
    partition.validate()?;
    let p = partition.n_features;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xA7, 0));
    let mut features = Vec::with_capacity(n * p);
    let mut responses = Vec::with_capacity(n);
    let mut x = vec![0.0; p];
    for _ in 0..n {
        loop {
            x.iter_mut().for_each(|v| *v = rng.gen::<f64>());
            let clear = partition
                .thresholds
                .iter()
                .all(|t| (x[t.feature] - t.cutpoint).abs() >= partition.margin);
            if clear {
                break;
            }
        }
        responses.push(partition.value(&x));
        features.extend_from_slice(&x);
    }
    Dataset::new(responses, features, default_names(p))
}

/// A disjoint train/test partition of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair {
    pub train: Dataset,
    pub test: Dataset,
    /// Source row indices, ascending.
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

/// Seeded shuffle; the test part gets `round(N * test_fraction)` rows.
/// Each part keeps the source row order.
pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<SplitPair, DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::InvalidParameter(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = dataset.n_rows();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(DataError::InvalidParameter(format!(
            "splitting {n} rows with fraction {test_fraction} leaves an empty part"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5B, 0));
    order.shuffle(&mut rng);
    let mut test_rows = order[..n_test].to_vec();
    let mut train_rows = order[n_test..].to_vec();
    test_rows.sort_unstable();
    train_rows.sort_unstable();
    Ok(SplitPair {
        train: dataset.select_rows(&train_rows),
        test: dataset.select_rows(&test_rows),
        train_rows,
        test_rows,
    })
}
