//! Matrix files, synthetic data and preprocessing.
//!
//! Two on-disk formats are supported:
//!
//! - CSV: a header line, then one sample per row with the integer label in
//!   the first column and the features after it.
//! - Binary (`RFAM`): the magic bytes `RFAM`, `d` and `N` as little-endian
//!   `u32`, `d * N` little-endian `f64` in column-major order, then `N`
//!   little-endian `u32` labels.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::DataMatrix;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RFAM";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatrixFormat {
    Csv,
    #[default]
    Bin,
}

impl MatrixFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Csv => "csv",
            MatrixFormat::Bin => "bin",
        }
    }

    /// Guesses the format from a file extension, defaulting to binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => MatrixFormat::Csv,
            _ => MatrixFormat::Bin,
        }
    }
}

impl FromStr for MatrixFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(MatrixFormat::Csv),
            "bin" => Ok(MatrixFormat::Bin),
            other => Err(Error::invalid(format!("unknown format {other:?}, expected csv or bin"))),
        }
    }
}

/// A `d x N` matrix (one sample per column) with one class id per column.
///
/// Files may hold shapes a fit would reject (a single column, non-finite
/// values); [`LabeledDataset::data_matrix`] validates.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub values: DMatrix<f64>,
    pub labels: Vec<u32>,
    pub name: String,
}

impl LabeledDataset {
    pub fn new(values: DMatrix<f64>, labels: Vec<u32>, name: impl Into<String>) -> Result<Self> {
        if labels.len() != values.ncols() {
            return Err(Error::invalid(format!(
                "{} labels for {} columns",
                labels.len(),
                values.ncols()
            )));
        }
        Ok(Self {
            values,
            labels,
            name: name.into(),
        })
    }

    /// Wraps a matrix whose columns carry no class information.
    pub fn unlabeled(values: DMatrix<f64>, name: impl Into<String>) -> Self {
        let labels = vec![0; values.ncols()];
        Self {
            values,
            labels,
            name: name.into(),
        }
    }

    pub fn data_matrix(&self) -> Result<DataMatrix> {
        DataMatrix::new(self.values.clone())
    }

    pub fn samples(&self) -> usize {
        self.values.ncols()
    }

    /// Sorted distinct class ids.
    pub fn classes(&self) -> Vec<u32> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Keeps the columns whose label is in `classes`, in their original order.
    pub fn restrict_to(&self, classes: &[u32]) -> LabeledDataset {
        let keep: Vec<usize> = (0..self.samples())
            .filter(|&j| classes.contains(&self.labels[j]))
            .collect();
        LabeledDataset {
            values: self.values.select_columns(&keep),
            labels: keep.iter().map(|&j| self.labels[j]).collect(),
            name: self.name.clone(),
        }
    }
}

pub fn load_matrix(path: &Path, format: MatrixFormat) -> Result<LabeledDataset> {
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    match format {
        MatrixFormat::Bin => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_binary(&bytes, path, name)
        }
        MatrixFormat::Csv => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            decode_csv(file, path, name)
        }
    }
}

pub fn save_matrix(dataset: &LabeledDataset, path: &Path, format: MatrixFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    match format {
        MatrixFormat::Bin => out
            .write_all(&encode_binary(dataset)?)
            .map_err(|e| Error::io(path, e))?,
        MatrixFormat::Csv => write_csv(dataset, &mut out)?,
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn encode_binary(dataset: &LabeledDataset) -> Result<Vec<u8>> {
    let (d, n) = dataset.values.shape();
    let dims = |v: usize| u32::try_from(v).map_err(|_| Error::invalid(format!("dimension {v} exceeds u32")));
    let mut buf = Vec::with_capacity(12 + 8 * d * n + 4 * n);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&dims(d)?.to_le_bytes());
    buf.extend_from_slice(&dims(n)?.to_le_bytes());
    // nalgebra storage is column-major
    for v in dataset.values.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for l in &dataset.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_binary(bytes: &[u8], path: &Path, name: String) -> Result<LabeledDataset> {
    let err = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        location: format!("byte {offset}"),
        message,
    };
    let take = |offset: usize, len: usize, what: &str| -> Result<&[u8]> {
        bytes
            .get(offset..offset + len)
            .ok_or_else(|| err(offset, format!("truncated payload while reading {what}")))
    };
    if take(0, 4, "magic")? != MAGIC {
        return Err(err(0, "bad magic, expected RFAM".into()));
    }
    let u32_at = |offset: usize, what: &str| -> Result<u32> {
        Ok(u32::from_le_bytes(take(offset, 4, what)?.try_into().unwrap()))
    };
    let d = u32_at(4, "row count")? as usize;
    let n = u32_at(8, "column count")? as usize;
    let mut offset = 12;
    let count = d
        .checked_mul(n)
        .ok_or_else(|| err(4, format!("dimensions {d}x{n} overflow")))?;
    let payload = take(offset, count * 8, "matrix entries")?;
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    offset += count * 8;
    let labels: Vec<u32> = take(offset, n * 4, "labels")?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    offset += n * 4;
    if offset != bytes.len() {
        return Err(err(offset, format!("{} trailing bytes", bytes.len() - offset)));
    }
    LabeledDataset::new(DMatrix::from_vec(d, n, values), labels, name)
}

fn write_csv<W: Write>(dataset: &LabeledDataset, sink: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(sink);
    let d = dataset.values.nrows();
    let header = std::iter::once("label".to_string()).chain((0..d).map(|i| format!("x{i}")));
    out.write_record(header)?;
    for (j, col) in dataset.values.column_iter().enumerate() {
        let row = std::iter::once(dataset.labels[j].to_string()).chain(col.iter().map(|v| v.to_string()));
        out.write_record(row)?;
    }
    out.flush().map_err(|e| Error::io("csv sink", e))
}

pub fn decode_csv<R: std::io::Read>(source: R, path: &Path, name: String) -> Result<LabeledDataset> {
    let parse_err = |line: u64, col: Option<usize>, message: String| Error::Parse {
        path: path.to_path_buf(),
        location: match col {
            Some(c) => format!("line {line}, column {}", c + 1),
            None => format!("line {line}"),
        },
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let width = rdr
        .headers()
        .map_err(|e| parse_err(1, None, e.to_string()))?
        .len();
    if width < 2 {
        return Err(parse_err(1, None, "header needs a label column and at least one feature".into()));
    }
    let d = width - 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, None, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let label = record[0]
            .trim()
            .parse::<u32>()
            .map_err(|_| parse_err(line, Some(0), format!("label {:?} is not a class id", &record[0])))?;
        labels.push(label);
        for (c, cell) in record.iter().enumerate().skip(1) {
            let v = cell
                .trim()
                .parse::<f64>()
                .map_err(|_| parse_err(line, Some(c), format!("{cell:?} is not a number")))?;
            values.push(v);
        }
    }
    if labels.is_empty() {
        return Err(parse_err(1, None, "no samples".into()));
    }
    // rows were samples, so the buffer is already column-major for d x N
    LabeledDataset::new(DMatrix::from_vec(d, labels.len(), values), labels, name)
}

const MAX_MEAN_TRIES: usize = 1000;

/// Gaussian blobs around nonnegative class means.
///
/// Means are uniform on `[0, 255)^d` (a gray-value scale) with pairwise
/// distance at least `4 * spread`, enforced by rejection. Samples are the mean
/// plus isotropic noise of standard deviation `spread`, clamped at zero, and are
/// grouped by class.
pub fn synth_blobs(d: usize, n_per_class: usize, k: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    if k == 0 || n_per_class == 0 {
        return Err(Error::invalid("need at least one class and one sample per class"));
    }
    if d < k {
        return Err(Error::invalid(format!("dimension {d} smaller than class count {k}")));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::invalid(format!("spread must be finite and >= 0, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<DVector<f64>> = Vec::with_capacity(k);
    while means.len() < k {
        let mut tries = 0;
        loop {
            let cand = DVector::from_fn(d, |_, _| rng.random_range(0.0..255.0));
            if means.iter().all(|m| (m - &cand).norm() >= 4.0 * spread) {
                means.push(cand);
                break;
            }
            tries += 1;
            if tries >= MAX_MEAN_TRIES {
                return Err(Error::invalid(format!(
                    "could not place {k} class means {} apart after {MAX_MEAN_TRIES} tries; spread too large",
                    4.0 * spread
                )));
            }
        }
    }
    let n = n_per_class * k;
    let mut values = DMatrix::zeros(d, n);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for s in 0..n_per_class {
            let j = c * n_per_class + s;
            for i in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                values[(i, j)] = (mean[i] + spread * z).max(0.0);
            }
            labels.push(c as u32);
        }
    }
    LabeledDataset::new(values, labels, format!("blobs_k{k}_d{d}"))
}

/// Adds Gaussian noise of the given variance to a random subset of
/// `floor(pixel_fraction * d)` coordinates of every sample, clamping results
/// to the range of the input.
///
/// For a fixed seed the selected coordinates and the unit noise draws do not
/// depend on `variance`, so a sweep over variances scales the same noise.
pub fn corrupt_gaussian(dataset: &LabeledDataset, variance: f64, pixel_fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(variance.is_finite() && variance >= 0.0) {
        return Err(Error::invalid(format!("variance must be finite and >= 0, got {variance}")));
    }
    if !(0.0..=1.0).contains(&pixel_fraction) {
        return Err(Error::invalid(format!("pixel fraction must lie in [0, 1], got {pixel_fraction}")));
    }
    let mut out = dataset.clone();
    let d = dataset.values.nrows();
    let count = (pixel_fraction * d as f64).floor() as usize;
    if variance == 0.0 || count == 0 || dataset.values.is_empty() {
        return Ok(out);
    }
    let lo = dataset.values.min();
    let hi = dataset.values.max();
    let sd = variance.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for mut col in out.values.column_iter_mut() {
        for i in index::sample(&mut rng, d, count) {
            let z: f64 = StandardNormal.sample(&mut rng);
            col[i] = (col[i] + sd * z).clamp(lo, hi);
        }
    }
    Ok(out)
}

/// Scales every nonzero column to unit Euclidean norm.
pub fn normalize_columns(dataset: &LabeledDataset) -> LabeledDataset {
    let mut out = dataset.clone();
    for mut col in out.values.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    out
}
