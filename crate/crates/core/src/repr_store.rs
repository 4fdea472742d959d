//! Representation matrices, labeled datasets and their on-disk formats.
//!
//! Two matrix encodings are supported:
//!
//! * CSV: one sample per line, comma-separated decimals, optional leading
//!   lines starting with `#`. Ragged rows are rejected.
//! * Binary: `b"PIDN"`, `u32` version (1), `u64` rows, `u64` cols, then
//!   `rows * cols` row-major `f64` values. All integers and floats are
//!   little-endian.
//!
//! Label files are CSV with `sample_index,class_id` rows. A third
//! `sample_id` column is accepted (and written for cleaned datasets) so that
//! sample identity survives row removal.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"PIDN";
pub const BINARY_VERSION: u32 = 1;
const BINARY_HEADER_LEN: usize = 4 + 4 + 8 + 8;

/// Minimum norm of a centered sample before it is considered degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Opaque class identifier. Ordering is lexicographic on the token.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(String);

impl ClassId {
    pub fn new(id: impl Into<String>) -> Self {
        ClassId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClassId {
    fn from(s: &str) -> Self {
        ClassId(s.to_owned())
    }
}

/// An `m x n` matrix of finite activations, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationMatrix {
    data: DMatrix<f64>,
}

impl RepresentationMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidDataset(format!(
                "matrix must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        for col in 0..data.ncols() {
            for row in 0..data.nrows() {
                if !data[(row, col)].is_finite() {
                    return Err(Error::NonFiniteEntry { row, col });
                }
            }
        }
        Ok(RepresentationMatrix { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::MalformedFile(format!(
                "row {i} has {} values, expected {n}",
                r.len()
            )));
        }
        Self::new(DMatrix::from_fn(m, n, |i, j| rows[i][j]))
    }

    /// Builds from a row-major buffer of length `rows * cols`.
    pub fn from_row_major(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: values.len(),
            });
        }
        Self::new(DMatrix::from_row_slice(rows, cols, values))
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.data.row(i).iter().copied().collect()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[(row, col)]
    }

    /// Rows in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.nrows()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: self.nrows(),
            });
        }
        Self::new(self.data.select_rows(indices))
    }

    /// Row-major copy of the entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.nrows() * self.ncols());
        for i in 0..self.nrows() {
            out.extend(self.data.row(i).iter());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    Csv,
    #[default]
    Binary,
}

impl MatrixFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Csv => "csv",
            MatrixFormat::Binary => "bin",
        }
    }
}

impl FromStr for MatrixFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(MatrixFormat::Csv),
            "binary" | "bin" => Ok(MatrixFormat::Binary),
            other => Err(Error::InvalidArgument(format!("unknown matrix format `{other}`"))),
        }
    }
}

pub fn read_csv<R: BufRead>(reader: R) -> Result<RepresentationMatrix> {
    let mut values = Vec::new();
    let mut cols: Option<usize> = None;
    let mut rows = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let before = values.len();
        for (col, field) in line.split(',').enumerate() {
            let field = field.trim();
            let v: f64 = field.parse().map_err(|_| {
                Error::MalformedFile(format!(
                    "line {}: cannot parse `{field}` as a number",
                    lineno + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteEntry { row: rows, col });
            }
            values.push(v);
        }
        let width = values.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(Error::MalformedFile(format!(
                    "line {}: {width} values, expected {c}",
                    lineno + 1
                )))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::MalformedFile("no data rows".into()))?;
    RepresentationMatrix::from_row_major(rows, cols, &values)
}

/// Writes shortest round-trip decimal representations, so CSV output
/// reloads bit-exactly.
pub fn write_csv<W: Write>(mut writer: W, matrix: &RepresentationMatrix) -> Result<()> {
    let mut line = String::new();
    for i in 0..matrix.nrows() {
        line.clear();
        for j in 0..matrix.ncols() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&matrix.get(i, j).to_string());
        }
        line.push('\n');
        writer.write_all(line.as_bytes())?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut reader: R) -> Result<RepresentationMatrix> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    decode_binary(&bytes)
}

pub fn decode_binary(bytes: &[u8]) -> Result<RepresentationMatrix> {
    if bytes.len() < BINARY_HEADER_LEN {
        return Err(Error::MalformedFile(format!(
            "binary header truncated ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[0..4] != BINARY_MAGIC {
        return Err(Error::MalformedFile("bad magic, expected PIDN".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BINARY_VERSION {
        return Err(Error::MalformedFile(format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let count = rows
        .checked_mul(cols)
        .and_then(|c| usize::try_from(c).ok())
        .filter(|c| c.checked_mul(8).is_some())
        .ok_or_else(|| Error::MalformedFile(format!("shape {rows}x{cols} overflows")))?;
    let payload = &bytes[BINARY_HEADER_LEN..];
    if payload.len() != count * 8 {
        return Err(Error::MalformedFile(format!(
            "shape {rows}x{cols} needs {count} values, payload holds {} bytes",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (rows, cols) = (rows as usize, cols as usize);
    if rows == 0 || cols == 0 {
        return Err(Error::MalformedFile(format!("empty shape {rows}x{cols}")));
    }
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEntry {
            row: pos / cols,
            col: pos % cols,
        });
    }
    RepresentationMatrix::from_row_major(rows, cols, &values)
}

pub fn encode_binary(matrix: &RepresentationMatrix) -> Vec<u8> {
    let (rows, cols) = (matrix.nrows(), matrix.ncols());
    let mut out = Vec::with_capacity(BINARY_HEADER_LEN + rows * cols * 8);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for i in 0..rows {
        for j in 0..cols {
            out.extend_from_slice(&matrix.get(i, j).to_le_bytes());
        }
    }
    out
}

pub fn write_binary<W: Write>(mut writer: W, matrix: &RepresentationMatrix) -> Result<()> {
    writer.write_all(&encode_binary(matrix))?;
    writer.flush()?;
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>, format: MatrixFormat) -> Result<RepresentationMatrix> {
    let file = File::open(path.as_ref())?;
    match format {
        MatrixFormat::Csv => read_csv(BufReader::new(file)),
        MatrixFormat::Binary => read_binary(file),
    }
}

pub fn save_matrix(
    path: impl AsRef<Path>,
    matrix: &RepresentationMatrix,
    format: MatrixFormat,
) -> Result<()> {
    let file = BufWriter::new(File::create(path.as_ref())?);
    match format {
        MatrixFormat::Csv => write_csv(file, matrix),
        MatrixFormat::Binary => write_binary(file, matrix),
    }
}

/// Representations with per-row class labels and unique sample identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    matrix: RepresentationMatrix,
    labels: Vec<ClassId>,
    sample_ids: Vec<String>,
}

impl LabeledDataset {
    pub fn new(
        matrix: RepresentationMatrix,
        labels: Vec<ClassId>,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        let m = matrix.nrows();
        if labels.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: labels.len(),
            });
        }
        if sample_ids.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: sample_ids.len(),
            });
        }
        let mut seen = HashSet::with_capacity(m);
        if let Some(dup) = sample_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidDataset(format!("duplicate sample id `{dup}`")));
        }
        Ok(LabeledDataset {
            matrix,
            labels,
            sample_ids,
        })
    }

    /// Sample ids default to the row index.
    pub fn with_index_ids(matrix: RepresentationMatrix, labels: Vec<ClassId>) -> Result<Self> {
        let ids = (0..matrix.nrows()).map(|i| i.to_string()).collect();
        Self::new(matrix, labels, ids)
    }

    pub fn matrix(&self) -> &RepresentationMatrix {
        &self.matrix
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sorted distinct class identifiers.
    pub fn class_ids(&self) -> Vec<ClassId> {
        let mut ids: Vec<ClassId> = self.labels.clone();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Keeps the given rows in order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let matrix = self.matrix.select_rows(rows)?;
        let labels = rows.iter().map(|&i| self.labels[i].clone()).collect();
        let ids = rows.iter().map(|&i| self.sample_ids[i].clone()).collect();
        Self::new(matrix, labels, ids)
    }
}

/// Parses a label file for a matrix with `m` rows. Every row index must
/// appear exactly once.
pub fn read_labels<R: BufRead>(reader: R, m: usize) -> Result<(Vec<ClassId>, Vec<String>)> {
    let mut labels: Vec<Option<ClassId>> = vec![None; m];
    let mut ids: Vec<Option<String>> = vec![None; m];
    let mut first = true;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if std::mem::take(&mut first) && fields[0] == "sample_index" {
            continue;
        }
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::MalformedFile(format!(
                "label line {}: expected `sample_index,class_id[,sample_id]`",
                lineno + 1
            )));
        }
        let idx: usize = fields[0].parse().map_err(|_| {
            Error::MalformedFile(format!(
                "label line {}: bad sample index `{}`",
                lineno + 1,
                fields[0]
            ))
        })?;
        if idx >= m {
            return Err(Error::IndexOutOfRange { index: idx, len: m });
        }
        if labels[idx].is_some() {
            return Err(Error::MalformedFile(format!(
                "label line {}: sample index {idx} listed twice",
                lineno + 1
            )));
        }
        if fields[1].is_empty() {
            return Err(Error::MalformedFile(format!(
                "label line {}: empty class id",
                lineno + 1
            )));
        }
        labels[idx] = Some(ClassId::new(fields[1]));
        ids[idx] = Some(fields.get(2).map_or_else(|| idx.to_string(), |s| s.to_string()));
    }
    if let Some(missing) = labels.iter().position(Option::is_none) {
        return Err(Error::MalformedFile(format!(
            "no label for sample index {missing}"
        )));
    }
    Ok((
        labels.into_iter().map(Option::unwrap).collect(),
        ids.into_iter().map(Option::unwrap).collect(),
    ))
}

pub fn write_labels<W: Write>(mut writer: W, ds: &LabeledDataset) -> Result<()> {
    writeln!(writer, "sample_index,class_id,sample_id")?;
    for (i, (label, id)) in ds.labels.iter().zip(&ds.sample_ids).enumerate() {
        writeln!(writer, "{i},{label},{id}")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_dataset(
    matrix_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    format: MatrixFormat,
) -> Result<LabeledDataset> {
    let matrix = load_matrix(matrix_path, format)?;
    let (labels, ids) = read_labels(BufReader::new(File::open(labels_path)?), matrix.nrows())?;
    LabeledDataset::new(matrix, labels, ids)
}

/// Writes `<stem>.<ext>` and `<stem>.labels.csv` next to each other.
pub fn save_dataset(
    dir: impl AsRef<Path>,
    stem: &str,
    ds: &LabeledDataset,
    format: MatrixFormat,
) -> Result<()> {
    let dir = dir.as_ref();
    save_matrix(dir.join(format!("{stem}.{}", format.extension())), &ds.matrix, format)?;
    write_labels(
        BufWriter::new(File::create(dir.join(format!("{stem}.labels.csv")))?),
        ds,
    )
}

/// Per-feature mean of clean held-out representations.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanReference {
    mean: DVector<f64>,
    count: usize,
}

impl CleanReference {
    pub fn new(mean: DVector<f64>, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidDataset("clean reference needs count >= 1".into()));
        }
        if let Some(col) = mean.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEntry { row: 0, col });
        }
        Ok(CleanReference { mean, count })
    }

    /// Zero reference for `n` features (centering becomes a no-op).
    pub fn zeros(n: usize) -> Self {
        CleanReference {
            mean: DVector::zeros(n),
            count: 1,
        }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn compute_clean_mean(clean: &RepresentationMatrix) -> CleanReference {
    let m = clean.nrows();
    let data = clean.as_matrix();
    let mean = DVector::from_fn(clean.ncols(), |j, _| data.column(j).sum() / m as f64);
    CleanReference { mean, count: m }
}

/// Rows of one class with their positions in the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPartition {
    pub class_id: ClassId,
    pub matrix: RepresentationMatrix,
    pub row_map: Vec<usize>,
}

impl ClassPartition {
    /// Treats a whole matrix as a single class.
    pub fn whole(class_id: ClassId, matrix: RepresentationMatrix) -> Self {
        let row_map = (0..matrix.nrows()).collect();
        ClassPartition {
            class_id,
            matrix,
            row_map,
        }
    }
}

/// Groups rows by label, preserving the original row order within a class.
pub fn partition_by_class(ds: &LabeledDataset) -> BTreeMap<ClassId, ClassPartition> {
    let mut rows: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, label) in ds.labels.iter().enumerate() {
        rows.entry(label.clone()).or_default().push(i);
    }
    rows.into_iter()
        .map(|(class_id, row_map)| {
            let matrix = RepresentationMatrix {
                data: ds.matrix.data.select_rows(&row_map),
            };
            (
                class_id.clone(),
                ClassPartition {
                    class_id,
                    matrix,
                    row_map,
                },
            )
        })
        .collect()
}

/// A class whose rows are centered on the clean mean and scaled to unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedClass {
    class_id: ClassId,
    matrix: RepresentationMatrix,
    row_map: Vec<usize>,
}

impl PreprocessedClass {
    pub fn class_id(&self) -> &ClassId {
        &self.class_id
    }

    /// `m x n`, unit-norm rows.
    pub fn matrix(&self) -> &RepresentationMatrix {
        &self.matrix
    }

    pub fn row_map(&self) -> &[usize] {
        &self.row_map
    }

    pub fn nsamples(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn nfeatures(&self) -> usize {
        self.matrix.ncols()
    }

    /// `n x m` copy with one sample per column.
    pub fn samples_as_columns(&self) -> DMatrix<f64> {
        self.matrix.data.transpose()
    }
}

pub fn preprocess(part: &ClassPartition, reference: &CleanReference) -> Result<PreprocessedClass> {
    let n = part.matrix.ncols();
    if reference.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: reference.dim(),
        });
    }
    let mut data = part.matrix.data.clone();
    for i in 0..data.nrows() {
        let mut row = data.row_mut(i);
        row -= reference.mean.transpose();
        let norm = row.norm();
        if norm < DEGENERATE_NORM {
            return Err(Error::DegenerateSample {
                row: part.row_map.get(i).copied().unwrap_or(i),
            });
        }
        row /= norm;
    }
    Ok(PreprocessedClass {
        class_id: part.class_id.clone(),
        matrix: RepresentationMatrix { data },
        row_map: part.row_map.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> RepresentationMatrix {
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        RepresentationMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn csv_parses_simple_matrix() {
        let m = read_csv("1,0,0\n0,1,0".as_bytes()).unwrap();
        assert_eq!(m.nrows(), 2);
        assert_eq!(m.ncols(), 3);
        assert_eq!(m.row(0), vec![1.0, 0.0, 0.0]);
        assert_eq!(m.row(1), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn csv_skips_header_and_widens_integers() {
        let m = read_csv("# a,b\n1,2\n3,4.5\n".as_bytes()).unwrap();
        assert_eq!(m.row(1), vec![3.0, 4.5]);
    }

    #[test]
    fn csv_rejects_nan_with_position() {
        match read_csv("1,2\n3,nan\n".as_bytes()) {
            Err(Error::NonFiniteEntry { row, col }) => assert_eq!((row, col), (1, 1)),
            other => panic!("expected NonFiniteEntry, got {other:?}"),
        }
        assert!(matches!(
            read_csv("inf,2\n".as_bytes()),
            Err(Error::NonFiniteEntry { row: 0, col: 0 })
        ));
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        assert!(matches!(
            read_csv("1,2\n3\n".as_bytes()),
            Err(Error::MalformedFile(_))
        ));
        assert!(matches!(read_csv("".as_bytes()), Err(Error::MalformedFile(_))));
    }

    #[test]
    fn binary_truncated_payload_is_malformed() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(BINARY_MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&3u64.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        for v in 0..5 {
            bytes.extend_from_slice(&(v as f64).to_le_bytes());
        }
        assert!(matches!(decode_binary(&bytes), Err(Error::MalformedFile(_))));
        bytes.extend_from_slice(&5f64.to_le_bytes());
        let m = decode_binary(&bytes).unwrap();
        assert_eq!(m.row(2), vec![4.0, 5.0]);
    }

    #[test]
    fn binary_rejects_bad_magic_and_version() {
        let m = RepresentationMatrix::from_rows(&[vec![1.0]]).unwrap();
        let mut bytes = encode_binary(&m);
        bytes[0] = b'X';
        assert!(matches!(decode_binary(&bytes), Err(Error::MalformedFile(_))));
        let mut bytes = encode_binary(&m);
        bytes[4] = 2;
        assert!(matches!(decode_binary(&bytes), Err(Error::MalformedFile(_))));
    }

    #[test]
    fn binary_reports_non_finite_position() {
        let mut bytes = encode_binary(&RepresentationMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let off = BINARY_HEADER_LEN + 3 * 8;
        bytes[off..off + 8].copy_from_slice(&f64::NEG_INFINITY.to_le_bytes());
        assert!(matches!(
            decode_binary(&bytes),
            Err(Error::NonFiniteEntry { row: 1, col: 1 })
        ));
    }

    #[test]
    fn clean_mean_small_cases() {
        let r = compute_clean_mean(&RepresentationMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap());
        assert_eq!(r.mean().as_slice(), &[1.0, 1.0]);
        assert_eq!(r.count(), 2);
        let r = compute_clean_mean(&RepresentationMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap());
        assert_eq!(r.mean().as_slice(), &[3.0, 4.0]);
        assert_eq!(r.count(), 1);
    }

    #[test]
    fn clean_mean_matches_column_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 100, 7);
        let r = compute_clean_mean(&m);
        for j in 0..7 {
            let mut s = 0.0;
            for row in m.to_row_major().chunks(7) {
                s += row[j];
            }
            assert!((r.mean()[j] - s / 100.0).abs() < 1e-14);
        }
    }

    #[test]
    fn preprocess_three_four_five() {
        let part = ClassPartition::whole("a".into(), RepresentationMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let p = preprocess(&part, &CleanReference::zeros(2)).unwrap();
        assert!((p.matrix().get(0, 0) - 0.6).abs() < 1e-15);
        assert!((p.matrix().get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn preprocess_rejects_sample_at_mean() {
        let part = ClassPartition {
            class_id: "a".into(),
            matrix: RepresentationMatrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 5.0]]).unwrap(),
            row_map: vec![7, 9],
        };
        let reference = CleanReference::new(DVector::from_vec(vec![2.0, 5.0]), 3).unwrap();
        assert!(matches!(
            preprocess(&part, &reference),
            Err(Error::DegenerateSample { row: 9 })
        ));
        let short = CleanReference::zeros(3);
        assert!(matches!(
            preprocess(&part, &short),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn preprocess_rows_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(&mut rng, 50, 8);
        let reference = compute_clean_mean(&random_matrix(&mut rng, 20, 8));
        let p = preprocess(&ClassPartition::whole("c".into(), x), &reference).unwrap();
        for i in 0..50 {
            let norm: f64 = p.matrix().row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        // direction is preserved under a second pass with a zero mean
        let again = preprocess(
            &ClassPartition::whole("c".into(), p.matrix().clone()),
            &CleanReference::zeros(8),
        )
        .unwrap();
        for (a, b) in again.matrix().to_row_major().iter().zip(p.matrix().to_row_major()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_groups_rows_in_order() {
        let m = RepresentationMatrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let labels = ["a", "b", "a", "b"].iter().map(|&s| ClassId::from(s)).collect();
        let ds = LabeledDataset::with_index_ids(m, labels).unwrap();
        let parts = partition_by_class(&ds);
        assert_eq!(parts[&ClassId::from("a")].row_map, vec![0, 2]);
        assert_eq!(parts[&ClassId::from("b")].row_map, vec![1, 3]);
        assert_eq!(parts[&ClassId::from("b")].matrix.row(1), vec![3.0]);
    }

    #[test]
    fn partition_single_label_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 12, 3);
        let ds = LabeledDataset::with_index_ids(m.clone(), vec![ClassId::from("z"); 12]).unwrap();
        let parts = partition_by_class(&ds);
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[&ClassId::from("z")].matrix, m);
    }

    #[test]
    fn partition_counts_sum_to_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_matrix(&mut rng, 1000, 2);
        let labels: Vec<ClassId> = (0..1000)
            .map(|_| ClassId::new(format!("k{}", rng.random_range(0..43))))
            .collect();
        let mut oracle: BTreeMap<ClassId, usize> = BTreeMap::new();
        for l in &labels {
            *oracle.entry(l.clone()).or_default() += 1;
        }
        let ds = LabeledDataset::with_index_ids(m, labels).unwrap();
        let parts = partition_by_class(&ds);
        let total: usize = parts.values().map(|p| p.matrix.nrows()).sum();
        assert_eq!(total, 1000);
        for (id, p) in &parts {
            assert_eq!(p.row_map.len(), oracle[id]);
        }
    }

    #[test]
    fn dataset_rejects_duplicate_ids() {
        let m = RepresentationMatrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let err = LabeledDataset::new(m, vec!["a".into(), "a".into()], vec!["x".into(), "x".into()]);
        assert!(matches!(err, Err(Error::InvalidDataset(_))));
    }

    #[test]
    fn labels_parse_with_header_and_ids() {
        let (labels, ids) = read_labels("sample_index,class_id\n1,b\n0,a\n".as_bytes(), 2).unwrap();
        assert_eq!(labels, vec![ClassId::from("a"), ClassId::from("b")]);
        assert_eq!(ids, vec!["0".to_string(), "1".to_string()]);
        let (_, ids) = read_labels("0,a,s-17\n".as_bytes(), 1).unwrap();
        assert_eq!(ids, vec!["s-17".to_string()]);
        assert!(read_labels("0,a\n".as_bytes(), 2).is_err());
        assert!(read_labels("0,a\n0,b\n".as_bytes(), 1).is_err());
        assert!(matches!(
            read_labels("5,a\n".as_bytes(), 1),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    proptest! {
        #[test]
        fn binary_and_csv_round_trip(
            rows in 1usize..6,
            cols in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..rows * cols)
                .map(|_| rng.random_range(-1e6..1e6) * 10f64.powi(rng.random_range(-12..12)))
                .collect();
            let m = RepresentationMatrix::from_row_major(rows, cols, &values).unwrap();
            let back = decode_binary(&encode_binary(&m)).unwrap();
            prop_assert_eq!(back.to_row_major(), m.to_row_major());
            let mut buf = Vec::new();
            write_csv(&mut buf, &m).unwrap();
            let back = read_csv(buf.as_slice()).unwrap();
            for (a, b) in back.to_row_major().iter().zip(m.to_row_major()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs());
            }
        }
    }
}
