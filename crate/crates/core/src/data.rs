//! IDX ingestion (MNIST family), pixel normalisation, and seeded splits.
//!
//! IDX layout: two zero bytes, an element-type byte (`0x08` = unsigned byte),
//! a rank byte, `rank` big-endian `u32` dimension sizes, then the payload in
//! row-major order. Gzip-wrapped files are detected by their magic bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndmath::{Matrix, Rng};

/// Magic number of a rank-3 unsigned-byte file (images).
pub const IMAGE_MAGIC: u32 = 0x0000_0803;
/// Magic number of a rank-1 unsigned-byte file (labels).
pub const LABEL_MAGIC: u32 = 0x0000_0801;
const UBYTE: u8 = 0x08;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdxError {
    #[error("header truncated at byte {offset}: need {needed} bytes, stream has {available}")]
    HeaderTruncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("bad magic number 0x{found:08x} at byte 0")]
    BadMagic { found: u32 },
    #[error("unsupported element type 0x{found:02x} at byte 2 (only unsigned byte is supported)")]
    UnsupportedType { found: u8 },
    #[error("rank {rank} at byte 3 is not supported")]
    UnsupportedRank { rank: u8 },
    #[error("dimension product overflows at byte {offset}")]
    DimOverflow { offset: usize },
    #[error("payload truncated at byte {offset}: expected {expected} payload bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("{extra} unexpected trailing bytes starting at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("expected a rank-{expected} file, found rank {found}")]
    RankMismatch { expected: usize, found: usize },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Idx {
        path: PathBuf,
        #[source]
        source: IdxError,
    },
    #[error(transparent)]
    Format(#[from] IdxError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Mismatch(String),
    #[error("expected {expected_rows}x{expected_cols} images, found {rows}x{cols}")]
    ImageShape {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("class {class} has {available} eligible samples, {needed} required")]
    InsufficientClass {
        class: usize,
        needed: usize,
        available: usize,
    },
    #[error("invalid split: {0}")]
    Split(String),
}

/// A parsed IDX file: dimension sizes plus raw unsigned-byte payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn magic(&self) -> u32 {
        (u32::from(UBYTE) << 8) | self.dims.len() as u32
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::HeaderTruncated {
            offset: bytes.len(),
            needed: 4,
            available: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(IdxError::BadMagic { found: magic });
    }
    if bytes[2] != UBYTE {
        return Err(IdxError::UnsupportedType { found: bytes[2] });
    }
    let rank = bytes[3];
    if rank == 0 {
        return Err(IdxError::UnsupportedRank { rank });
    }
    let header_len = 4 + 4 * rank as usize;
    if bytes.len() < header_len {
        return Err(IdxError::HeaderTruncated {
            offset: bytes.len(),
            needed: header_len,
            available: bytes.len(),
        });
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut total: usize = 1;
    for d in 0..rank as usize {
        let at = 4 + 4 * d;
        let size = u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize;
        total = total
            .checked_mul(size)
            .filter(|t| t.checked_add(header_len).is_some())
            .ok_or(IdxError::DimOverflow { offset: at })?;
        dims.push(size);
    }
    let payload = &bytes[header_len..];
    if payload.len() < total {
        return Err(IdxError::Truncated {
            offset: bytes.len(),
            expected: total,
            found: payload.len(),
        });
    }
    if payload.len() > total {
        return Err(IdxError::TrailingBytes {
            offset: header_len + total,
            extra: payload.len() - total,
        });
    }
    Ok(IdxTensor {
        dims,
        data: payload.to_vec(),
    })
}

/// Serialises a tensor back to IDX bytes.
pub fn encode_idx(tensor: &IdxTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * tensor.dims.len() + tensor.data.len());
    out.extend_from_slice(&tensor.magic().to_be_bytes());
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&tensor.data);
    out
}

/// Reads a whole file, gunzipping when it starts with the gzip magic.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io_err)?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_idx_file(path: &Path) -> Result<IdxTensor, DataError> {
    let bytes = read_maybe_gzip(path)?;
    parse_idx(&bytes).map_err(|source| DataError::Idx {
        path: path.to_path_buf(),
        source,
    })
}

/// Pixel bytes to `[0, 1]`, one flattened image per row.
pub fn normalize(raw: &IdxTensor) -> Result<Matrix, IdxError> {
    if raw.rank() != 3 {
        return Err(IdxError::RankMismatch {
            expected: 3,
            found: raw.rank(),
        });
    }
    let (n, width) = (raw.dims[0], raw.dims[1] * raw.dims[2]);
    let data = raw.data.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Matrix::from_vec(n, width, data).expect("payload length checked by parse_idx"))
}

/// Inverse of [`normalize`] for values produced by it.
pub fn denormalize(images: &Matrix) -> Vec<u8> {
    images
        .as_slice()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Normalised images with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub image_shape: (usize, usize),
}

impl Dataset {
    pub fn from_idx(name: &str, images: &IdxTensor, labels: &IdxTensor) -> Result<Self, DataError> {
        if labels.rank() != 1 {
            return Err(IdxError::RankMismatch {
                expected: 1,
                found: labels.rank(),
            }
            .into());
        }
        let matrix = normalize(images)?;
        if matrix.rows() != labels.dims[0] {
            return Err(DataError::Mismatch(format!(
                "{name}: {} images but {} labels",
                matrix.rows(),
                labels.dims[0]
            )));
        }
        let labels: Vec<usize> = labels.data.iter().map(|&b| b as usize).collect();
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            name: name.to_string(),
            images: matrix,
            labels,
            n_classes,
            image_shape: (images.dims[1], images.dims[2]),
        })
    }

    /// Loads an image file and a label file (either may be gzipped).
    pub fn load(name: &str, images: &Path, labels: &Path) -> Result<Self, DataError> {
        let img = read_idx_file(images)?;
        let lab = read_idx_file(labels)?;
        if img.rank() != 3 {
            return Err(DataError::Idx {
                path: images.to_path_buf(),
                source: IdxError::RankMismatch {
                    expected: 3,
                    found: img.rank(),
                },
            });
        }
        if lab.rank() != 1 {
            return Err(DataError::Idx {
                path: labels.to_path_buf(),
                source: IdxError::RankMismatch {
                    expected: 1,
                    found: lab.rank(),
                },
            });
        }
        Self::from_idx(name, &img, &lab)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            image_shape: self.image_shape,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn require_shape(&self, rows: usize, cols: usize) -> Result<(), DataError> {
        if self.image_shape != (rows, cols) {
            return Err(DataError::ImageShape {
                expected_rows: rows,
                expected_cols: cols,
                rows: self.image_shape.0,
                cols: self.image_shape.1,
            });
        }
        Ok(())
    }
}

/// Loads any 28x28 IDX dataset to serve as an out-of-distribution probe.
pub fn load_ood_probe(name: &str, images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let ds = Dataset::load(name, images, labels)?;
    ds.require_shape(28, 28)?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Pool size drawn from the training file; `None` keeps every non-validation sample.
    pub pool_size: Option<usize>,
    pub val_size: usize,
    /// Test subset drawn from the test file; `None` keeps the whole file.
    pub test_size: Option<usize>,
    pub seed: u64,
}

/// Index sets: `pool` and `val` into the training file, `test` into the test file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub pool: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Draws the validation set uniformly from the training file, the pool from
/// what remains, and the test set from the test file. All index lists are
/// sorted.
pub fn make_splits(n_train: usize, n_test: usize, spec: &SplitSpec) -> Result<Splits, DataError> {
    if spec.val_size == 0 {
        return Err(DataError::Split("val_size must be positive".into()));
    }
    if spec.pool_size == Some(0) || spec.test_size == Some(0) {
        return Err(DataError::Split("split sizes must be positive".into()));
    }
    let pool_size = spec.pool_size.unwrap_or(n_train.saturating_sub(spec.val_size));
    if spec.val_size + pool_size > n_train || pool_size == 0 {
        return Err(DataError::Split(format!(
            "pool {pool_size} + val {} exceeds {n_train} training samples",
            spec.val_size
        )));
    }
    let test = test_indices(n_test, spec.test_size, spec.seed)?;
    let root = Rng::new(spec.seed);
    let mut order: Vec<usize> = (0..n_train).collect();
    root.split(0).shuffle(&mut order);
    let mut val = order[..spec.val_size].to_vec();
    let mut pool = order[spec.val_size..spec.val_size + pool_size].to_vec();
    val.sort_unstable();
    pool.sort_unstable();
    Ok(Splits { pool, val, test })
}

/// The test part of [`make_splits`]; depends only on the test-file size.
pub fn test_indices(n_test: usize, test_size: Option<usize>, seed: u64) -> Result<Vec<usize>, DataError> {
    if test_size == Some(0) {
        return Err(DataError::Split("test_size must be positive".into()));
    }
    let test_size = test_size.unwrap_or(n_test);
    if test_size > n_test || test_size == 0 {
        return Err(DataError::Split(format!(
            "test size {test_size} exceeds {n_test} test samples"
        )));
    }
    let mut test = if test_size == n_test {
        (0..n_test).collect()
    } else {
        let all: Vec<usize> = (0..n_test).collect();
        Rng::new(seed).split(1).choose_distinct(&all, test_size)
    };
    test.sort_unstable();
    Ok(test)
}

/// Exactly `per_class` indices of each class from `candidates`, drawn
/// uniformly without replacement. Output is sorted.
pub fn balanced_sample(
    labels: &[usize],
    candidates: &[usize],
    n_classes: usize,
    per_class: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>, DataError> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = (0..n_classes).map(|c| (c, Vec::new())).collect();
    for &i in candidates {
        let y = labels[i];
        if y >= n_classes {
            return Err(DataError::Mismatch(format!(
                "label {y} at index {i} exceeds {n_classes} classes"
            )));
        }
        by_class.get_mut(&y).expect("pre-filled").push(i);
    }
    let mut out = Vec::with_capacity(per_class * n_classes);
    for (class, members) in &mut by_class {
        if members.len() < per_class {
            return Err(DataError::InsufficientClass {
                class: *class,
                needed: per_class,
                available: members.len(),
            });
        }
        members.sort_unstable();
        out.extend(rng.choose_distinct(members, per_class));
    }
    out.sort_unstable();
    Ok(out)
}
