//! Feature matrices, the `TFS1` binary format, and dataset manifests.
//!
//! A feature file is a 24-byte header followed by `n * d` little-endian
//! values in row-major order:
//!
//! | offset | size | content                          |
//! |--------|------|----------------------------------|
//! | 0      | 4    | magic `TFS1`                     |
//! | 4      | 1    | dtype (0 = f32, 1 = f64)         |
//! | 5      | 3    | reserved, zero                   |
//! | 8      | 8    | row count `n` (u64 LE)           |
//! | 16     | 8    | column count `d` (u64 LE)        |
//! | 24     | ...  | values                           |
//!
//! Sample ids live in a JSON sidecar `<name>.manifest.json` next to the
//! binary file so the payload stays a flat array.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TFS1";
pub const HEADER_LEN: usize = 24;
/// Largest row count accepted by the CSV ingestion path.
pub const CSV_MAX_ROWS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Dense `n x d` matrix of per-sample features with stable sample ids.
///
/// Values are held as `f64` regardless of the storage dtype; `f32` values
/// widen exactly, so writing back with the original dtype is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f64>,
    ids: Vec<String>,
    dtype: Dtype,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f64>, ids: Vec<String>, dtype: Dtype) -> Result<Self> {
        let (n, d) = data.dim();
        if n == 0 || d == 0 {
            return Err(Error::shape("feature matrix", "n >= 1 and d >= 1", format!("{n}x{d}")));
        }
        if ids.len() != n {
            return Err(Error::IdCount {
                ids: ids.len(),
                rows: n,
                path: None,
            });
        }
        check_unique(&ids)?;
        check_finite(data.view(), None)?;
        if dtype == Dtype::F32 {
            if let Some(((row, col), &value)) =
                data.indexed_iter().find(|(_, &v)| (v as f32) as f64 != v)
            {
                return Err(Error::InvalidArgument(format!(
                    "value {value} at ({row}, {col}) is not representable as f32"
                )));
            }
        }
        Ok(Self { data, ids, dtype })
    }

    /// Builds an f64 matrix with ids `"0"`, `"1"`, ...
    pub fn from_array(data: Array2<f64>) -> Result<Self> {
        let ids = default_ids(data.nrows());
        Self::new(data, ids, Dtype::F64)
    }

    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn into_parts(self) -> (Array2<f64>, Vec<String>, Dtype) {
        (self.data, self.ids, self.dtype)
    }

    /// Rows `indices` in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let data = self.data.select(Axis(0), indices);
        let ids = indices.iter().map(|&i| self.ids[i].clone()).collect();
        Self::new(data, ids, self.dtype)
    }

    /// SHA-256 over dtype, shape, values (as f64 LE) and ids; independent of
    /// how the matrix reached memory.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.dtype.code()]);
        h.update((self.nrows() as u64).to_le_bytes());
        h.update((self.ncols() as u64).to_le_bytes());
        for v in self.data.iter() {
            h.update(v.to_le_bytes());
        }
        for id in &self.ids {
            h.update((id.len() as u64).to_le_bytes());
            h.update(id.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn default_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId { id: id.clone() });
        }
    }
    Ok(())
}

fn check_finite(data: ArrayView2<'_, f64>, width: Option<usize>) -> Result<()> {
    let d = data.ncols();
    for ((row, col), &value) in data.indexed_iter() {
        if !value.is_finite() {
            let offset = width.map(|w| (HEADER_LEN + (row * d + col) * w) as u64);
            return Err(Error::NonFinite {
                row,
                col,
                value,
                offset,
            });
        }
    }
    Ok(())
}

/// Role of a dataset in a selection run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Candidate,
    Target,
}

/// JSON sidecar describing a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    /// One feature file per checkpoint; summed on load.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

/// `dir/name.tfs` -> `dir/name.manifest.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.manifest.json"))
}

/// Parses a TFS payload. `path` is used for error context only.
pub fn decode_tfs(bytes: &[u8], path: &Path) -> Result<(Array2<f64>, Dtype)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedHeader {
            path: path.into(),
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            found: magic,
        });
    }
    let dtype = Dtype::from_code(bytes[4]).ok_or(Error::BadDtype {
        path: path.into(),
        found: bytes[4],
    })?;
    if bytes[5..8] != [0, 0, 0] {
        return Err(Error::BadReserved { path: path.into() });
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(dtype.width() as u64));
    let expected = match expected {
        Some(e) if rows > 0 && cols > 0 => e,
        _ => {
            return Err(Error::BadShape {
                path: path.into(),
                rows,
                cols,
            })
        }
    };
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found < expected {
        return Err(Error::TruncatedPayload {
            path: path.into(),
            offset: HEADER_LEN as u64 + found,
            expected,
            found,
        });
    }
    if found > expected {
        return Err(Error::TrailingBytes {
            path: path.into(),
            offset: HEADER_LEN as u64 + expected,
            extra: found - expected,
        });
    }
    let payload = &bytes[HEADER_LEN..];
    let values: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let data = Array2::from_shape_vec((rows as usize, cols as usize), values)
        .expect("length checked against header");
    check_finite(data.view(), Some(dtype.width()))?;
    Ok((data, dtype))
}

pub fn encode_tfs(data: ArrayView2<'_, f64>, dtype: Dtype) -> Vec<u8> {
    let (n, d) = data.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + n * d * dtype.width());
    out.extend_from_slice(&MAGIC);
    out.push(dtype.code());
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for &v in data.iter() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

/// Reads a bare TFS matrix without consulting any sidecar.
pub fn read_tfs(path: &Path) -> Result<(Array2<f64>, Dtype)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tfs(&bytes, path)
}

pub fn write_tfs(data: ArrayView2<'_, f64>, dtype: Dtype, path: &Path) -> Result<()> {
    let bytes = encode_tfs(data, dtype);
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Loads a feature file. Sample ids come from the sidecar manifest when one
/// exists, otherwise they default to row numbers.
pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
    let (data, dtype) = read_tfs(path)?;
    let sidecar = sidecar_path(path);
    let ids = if sidecar.exists() {
        let manifest: DatasetManifest = read_json(&sidecar)?;
        if manifest.ids.len() != data.nrows() {
            return Err(Error::IdCount {
                ids: manifest.ids.len(),
                rows: data.nrows(),
                path: Some(sidecar),
            });
        }
        manifest.ids
    } else {
        default_ids(data.nrows())
    };
    FeatureMatrix::new(data, ids, dtype)
}

/// Writes the TFS file and an id-only sidecar manifest.
pub fn write_features(m: &FeatureMatrix, path: &Path) -> Result<()> {
    write_tfs(m.data(), m.dtype(), path)?;
    let manifest = DatasetManifest {
        ids: m.ids.clone(),
        role: None,
        checkpoints: Vec::new(),
        feature_file: None,
        count: None,
    };
    write_json(&manifest, &sidecar_path(path))
}

/// Writes a dataset (TFS + manifest tagged with `role`).
pub fn write_dataset(m: &FeatureMatrix, role: Role, path: &Path) -> Result<PathBuf> {
    write_tfs(m.data(), m.dtype(), path)?;
    let manifest_path = sidecar_path(path);
    let manifest = DatasetManifest {
        ids: m.ids.clone(),
        role: Some(role),
        checkpoints: Vec::new(),
        feature_file: path.file_name().map(PathBuf::from),
        count: Some(m.nrows()),
    };
    write_json(&manifest, &manifest_path)?;
    Ok(manifest_path)
}

/// Ingests `id,dim0,dim1,...` CSV (header row required). Limited to
/// [`CSV_MAX_ROWS`] rows.
pub fn load_csv(path: &Path) -> Result<FeatureMatrix> {
    let csv_err = |message: String| Error::Csv {
        path: path.into(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(e.to_string()))?;
    let dims = reader
        .headers()
        .map_err(|e| csv_err(e.to_string()))?
        .len()
        .checked_sub(1)
        .filter(|&d| d > 0)
        .ok_or_else(|| csv_err("header needs an id column and at least one dimension".into()))?;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(e.to_string()))?;
        if ids.len() == CSV_MAX_ROWS {
            return Err(csv_err(format!(
                "more than {CSV_MAX_ROWS} rows; convert to TFS"
            )));
        }
        if record.len() != dims + 1 {
            return Err(csv_err(format!(
                "record {} has {} fields, expected {}",
                line + 1,
                record.len(),
                dims + 1
            )));
        }
        ids.push(record[0].to_string());
        for field in record.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| csv_err(format!("record {}: bad number {field:?}", line + 1)))?;
            values.push(v);
        }
    }
    let n = ids.len();
    let data = Array2::from_shape_vec((n, dims), values)
        .map_err(|e| csv_err(e.to_string()))?;
    FeatureMatrix::new(data, ids, Dtype::F64)
}

/// Sums per-checkpoint feature matrices elementwise.
///
/// Accumulation is compensated (Neumaier) in f64, so the result does not
/// depend on list order beyond the last bit.
pub fn aggregate_checkpoints(mats: &[FeatureMatrix]) -> Result<FeatureMatrix> {
    let first = mats
        .first()
        .ok_or_else(|| Error::InvalidArgument("aggregate_checkpoints needs at least one matrix".into()))?;
    let shape = first.data.dim();
    for m in &mats[1..] {
        if m.data.dim() != shape {
            return Err(Error::shape(
                "aggregate_checkpoints",
                format!("{}x{}", shape.0, shape.1),
                format!("{}x{}", m.nrows(), m.ncols()),
            ));
        }
        if let Some(row) = (0..shape.0).find(|&r| m.ids[r] != first.ids[r]) {
            return Err(Error::IdMismatch {
                context: "aggregate_checkpoints",
                row,
                left: first.ids[row].clone(),
                right: m.ids[row].clone(),
            });
        }
    }
    let mut sum = Array2::<f64>::zeros(shape);
    let mut comp = Array2::<f64>::zeros(shape);
    for m in mats {
        ndarray::Zip::from(&mut sum)
            .and(&mut comp)
            .and(&m.data)
            .for_each(|s, c, &x| {
                let t = *s + x;
                if s.abs() >= x.abs() {
                    *c += (*s - t) + x;
                } else {
                    *c += (x - t) + *s;
                }
                *s = t;
            });
    }
    sum += &comp;
    FeatureMatrix::new(sum, first.ids.clone(), Dtype::F64)
}

/// Loads the dataset a manifest describes: the checkpoint files summed when
/// present, the named feature file otherwise, or `<stem>.tfs` next to the
/// manifest as a last resort.
pub fn load_dataset(manifest_path: &Path) -> Result<(FeatureMatrix, DatasetManifest)> {
    let manifest: DatasetManifest = read_json(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { dir.join(p) };
    let with_ids = |data: Array2<f64>, dtype: Dtype, file: &Path| -> Result<FeatureMatrix> {
        if data.nrows() != manifest.ids.len() {
            return Err(Error::IdCount {
                ids: manifest.ids.len(),
                rows: data.nrows(),
                path: Some(file.to_path_buf()),
            });
        }
        FeatureMatrix::new(data, manifest.ids.clone(), dtype)
    };
    let matrix = if !manifest.checkpoints.is_empty() {
        let mut mats = Vec::with_capacity(manifest.checkpoints.len());
        for ckpt in &manifest.checkpoints {
            let file = resolve(ckpt);
            let (data, dtype) = read_tfs(&file)?;
            if let Some(prev) = mats.first().map(|m: &FeatureMatrix| m.ncols()) {
                if prev != data.ncols() {
                    return Err(Error::shape("checkpoint feature dimension", prev, data.ncols()));
                }
            }
            mats.push(with_ids(data, dtype, &file)?);
        }
        aggregate_checkpoints(&mats)?
    } else {
        let file = match &manifest.feature_file {
            Some(f) => resolve(f),
            None => {
                let name = manifest_path
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let stem = name.strip_suffix(".manifest.json").unwrap_or(&name);
                dir.join(format!("{stem}.tfs"))
            }
        };
        let (data, dtype) = read_tfs(&file)?;
        with_ids(data, dtype, &file)?
    };
    if let Some(count) = manifest.count {
        if count != matrix.nrows() {
            return Err(Error::IdCount {
                ids: count,
                rows: matrix.nrows(),
                path: Some(manifest_path.to_path_buf()),
            });
        }
    }
    Ok((matrix, manifest))
}
