//! BVOL tensor files and cohort manifests.
//!
//! BVOL layout (all integers and floats little-endian):
//!
//! ```text
//! magic  : b"BVOL1\0"            6 bytes
//! ndim   : u32                    4 bytes, 1..=5
//! dims   : ndim x u32             slowest-varying first, each >= 1
//! data   : prod(dims) x f32       row-major, last dim fastest
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::tensor::Tensor;

pub const MAGIC: [u8; 6] = *b"BVOL1\0";
pub const MAX_NDIM: usize = 5;
pub const MAX_ELEMENTS: u64 = 1 << 31;
pub const MANIFEST_HEADER: [&str; 3] = ["subject_id", "age_years", "volume_path"];

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: Vec<u8> },
    #[error("{path}: truncated, expected {expected} bytes after the header, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("{path}: {extra} trailing bytes after the data block")]
    TrailingData { path: PathBuf, extra: u64 },
    #[error("{path}: extent product {dims:?} exceeds 2^31 elements")]
    ExtentOverflow { path: PathBuf, dims: Vec<u64> },
    #[error("invalid BVOL shape {shape:?}: {reason}")]
    InvalidShape {
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{path}: NaN at element {index}")]
    NanPayload { path: PathBuf, index: usize },
    #[error("{path}:{line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: duplicate subject_id {id:?}")]
    DuplicateId { path: PathBuf, id: String },
    #[error("{path}:{line}: age {age} outside (0, 130)")]
    AgeRange {
        path: PathBuf,
        line: usize,
        age: f64,
    },
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: PathBuf, column: &'static str },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Checks a shape against the header invariants.
pub fn validate_shape(shape: &[usize]) -> Result<(), IoError> {
    let invalid = |reason| IoError::InvalidShape {
        shape: shape.to_vec(),
        reason,
    };
    if shape.is_empty() || shape.len() > MAX_NDIM {
        return Err(invalid("ndim must be in 1..=5"));
    }
    if shape.contains(&0) {
        return Err(invalid("every extent must be >= 1"));
    }
    if shape.iter().any(|&d| d as u64 > u32::MAX as u64) {
        return Err(invalid("extent does not fit in u32"));
    }
    let total = shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
    match total {
        Some(n) if n <= MAX_ELEMENTS => Ok(()),
        _ => Err(invalid("extent product exceeds 2^31")),
    }
}

pub fn encode_bvol(tensor: &Tensor<f32>) -> Result<Vec<u8>, IoError> {
    validate_shape(tensor.shape())?;
    let mut buf = Vec::with_capacity(6 + 4 + 4 * tensor.ndim() + 4 * tensor.len());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn write_bvol(path: impl AsRef<Path>, tensor: &Tensor<f32>) -> Result<(), IoError> {
    let path = path.as_ref();
    let bytes = encode_bvol(tensor)?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_bvol(path: impl AsRef<Path>) -> Result<Tensor<f32>, IoError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    decode_bvol(path, &bytes)
}

/// Parses an in-memory BVOL image. `path` is only used for diagnostics.
pub fn decode_bvol(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>, IoError> {
    let truncated = |expected: usize, found: usize| IoError::Truncated {
        path: path.to_path_buf(),
        expected: expected as u64,
        found: found as u64,
    };
    if bytes.len() < 6 || bytes[..6] != MAGIC {
        return Err(IoError::BadMagic {
            path: path.to_path_buf(),
            found: bytes[..bytes.len().min(6)].to_vec(),
        });
    }
    let rest = &bytes[6..];
    if rest.len() < 4 {
        return Err(truncated(4, rest.len()));
    }
    let ndim = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(IoError::InvalidShape {
            shape: vec![],
            reason: "ndim must be in 1..=5",
        });
    }
    let rest = &rest[4..];
    if rest.len() < 4 * ndim {
        return Err(truncated(4 * ndim, rest.len()));
    }
    let dims: Vec<u64> = rest[..4 * ndim]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as u64)
        .collect();
    if dims.contains(&0) {
        return Err(IoError::InvalidShape {
            shape: dims.iter().map(|&d| d as usize).collect(),
            reason: "every extent must be >= 1",
        });
    }
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| IoError::ExtentOverflow {
            path: path.to_path_buf(),
            dims: dims.clone(),
        })? as usize;
    let payload = &rest[4 * ndim..];
    if payload.len() < 4 * count {
        return Err(truncated(4 * count, payload.len()));
    }
    if payload.len() > 4 * count {
        return Err(IoError::TrailingData {
            path: path.to_path_buf(),
            extra: (payload.len() - 4 * count) as u64,
        });
    }
    let mut data = Vec::with_capacity(count);
    for (index, c) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if v.is_nan() {
            return Err(IoError::NanPayload {
                path: path.to_path_buf(),
                index,
            });
        }
        data.push(v);
    }
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    Ok(Tensor::from_vec(&shape, data).expect("length checked"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub age_years: f64,
    pub volume_path: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CohortManifest {
    pub records: Vec<SubjectRecord>,
    /// Generator seed when known; the CSV itself does not carry it.
    pub seed: u64,
}

impl CohortManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ages(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.age_years).collect()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.subject_id.as_str()).collect()
    }
}

/// Resolves a manifest's `volume_path` relative to the manifest's directory.
pub fn resolve_volume_path(manifest_path: &Path, record: &SubjectRecord) -> PathBuf {
    let p = Path::new(&record.volume_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(p)
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<CohortManifest, IoError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let headers = reader.headers().map_err(|e| IoError::Manifest {
        path: path.to_path_buf(),
        line: 1,
        reason: e.to_string(),
    })?;
    let mut cols = [0usize; 3];
    for (slot, name) in cols.iter_mut().zip(MANIFEST_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or(IoError::MissingColumn {
                path: path.to_path_buf(),
                column: name,
            })?;
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| IoError::Manifest {
            path: path.to_path_buf(),
            line,
            reason: e.to_string(),
        })?;
        let field = |c: usize, name: &'static str| {
            row.get(c).map(str::trim).ok_or(IoError::MissingColumn {
                path: path.to_path_buf(),
                column: name,
            })
        };
        let id = field(cols[0], MANIFEST_HEADER[0])?;
        let age_text = field(cols[1], MANIFEST_HEADER[1])?;
        let volume_path = field(cols[2], MANIFEST_HEADER[2])?;
        if id.is_empty() {
            return Err(IoError::Manifest {
                path: path.to_path_buf(),
                line,
                reason: "empty subject_id".into(),
            });
        }
        let age: f64 = age_text.parse().map_err(|_| IoError::Manifest {
            path: path.to_path_buf(),
            line,
            reason: format!("age {age_text:?} is not a number"),
        })?;
        if !(age > 0.0 && age < 130.0) {
            return Err(IoError::AgeRange {
                path: path.to_path_buf(),
                line,
                age,
            });
        }
        if !seen.insert(id.to_string()) {
            return Err(IoError::DuplicateId {
                path: path.to_path_buf(),
                id: id.to_string(),
            });
        }
        records.push(SubjectRecord {
            subject_id: id.to_string(),
            age_years: age,
            volume_path: volume_path.to_string(),
        });
    }
    Ok(CohortManifest { records, seed: 0 })
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &CohortManifest) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| IoError::Manifest {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })?;
    let to_err = |e: csv::Error| IoError::Manifest {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    };
    w.write_record(MANIFEST_HEADER).map_err(to_err)?;
    for r in &manifest.records {
        w.write_record([
            r.subject_id.as_str(),
            &format_age(r.age_years),
            r.volume_path.as_str(),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Shortest decimal that parses back to the same `f64`.
fn format_age(age: f64) -> String {
    format!("{age}")
}
