//! Binary feature container and its JSON manifest.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `SMPXFT01`                        |
//! | 8      | 2    | version (`u16`, 1)                      |
//! | 10     | 1    | content kind (1 probabilities, 2 raw)   |
//! | 11     | 1    | dtype (1 `f32`, 2 `f64`)                |
//! | 12     | 1    | has labels (0 or 1)                     |
//! | 13     | 3    | reserved, zero                          |
//! | 16     | 8    | `n_samples` (`u64`)                     |
//! | 24     | 8    | `dim` (`u64`)                           |
//! | 32     | ...  | row-major payload, then `n_samples` `u32` labels |
//!
//! The manifest lives next to the container at `<path>.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ContentKind, FeatureSet};

pub const MAGIC: [u8; 8] = *b"SMPXFT01";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
/// Row-sum tolerance for probability content in containers.
pub const CONTAINER_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

fn kind_code(kind: ContentKind) -> u8 {
    match kind {
        ContentKind::SimplexProbabilities => 1,
        ContentKind::RawEmbeddings => 2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Header {
    pub version: u16,
    pub kind: ContentKind,
    pub dtype: Dtype,
    pub has_labels: bool,
    pub n_samples: u64,
    pub dim: u64,
}

impl Header {
    /// Total file length implied by the header.
    pub fn file_len(&self) -> u64 {
        let labels = if self.has_labels { 4 * self.n_samples } else { 0 };
        HEADER_LEN as u64 + self.n_samples * self.dim * self.dtype.width() as u64 + labels
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..8].copy_from_slice(&MAGIC);
        out[8..10].copy_from_slice(&self.version.to_le_bytes());
        out[10] = kind_code(self.kind);
        out[11] = self.dtype.code();
        out[12] = self.has_labels as u8;
        out[16..24].copy_from_slice(&self.n_samples.to_le_bytes());
        out[24..32].copy_from_slice(&self.dim.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 8 && bytes[..8] != MAGIC {
                return Err(Error::NotAContainer {
                    found: bytes[..8].try_into().expect("8 bytes"),
                });
            }
            return Err(Error::SizeMismatch {
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        let magic: [u8; 8] = bytes[..8].try_into().expect("8 bytes");
        if magic != MAGIC {
            return Err(Error::NotAContainer { found: magic });
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != VERSION {
            return Err(Error::UnsupportedField {
                field: "version",
                value: version.into(),
            });
        }
        let kind = match bytes[10] {
            1 => ContentKind::SimplexProbabilities,
            2 => ContentKind::RawEmbeddings,
            v => {
                return Err(Error::UnsupportedField {
                    field: "content kind",
                    value: v.into(),
                })
            }
        };
        let dtype = match bytes[11] {
            1 => Dtype::F32,
            2 => Dtype::F64,
            v => {
                return Err(Error::UnsupportedField {
                    field: "dtype",
                    value: v.into(),
                })
            }
        };
        let has_labels = match bytes[12] {
            0 => false,
            1 => true,
            v => {
                return Err(Error::UnsupportedField {
                    field: "has_labels",
                    value: v.into(),
                })
            }
        };
        if let Some(&v) = bytes[13..16].iter().find(|&&b| b != 0) {
            return Err(Error::UnsupportedField {
                field: "reserved",
                value: v.into(),
            });
        }
        Ok(Self {
            version,
            kind,
            dtype,
            has_labels,
            n_samples: u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")),
            dim: u64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes")),
        })
    }
}

/// Provenance of a container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub class_names: Vec<String>,
    /// Softmax temperature used at extraction; absent for synthetic data.
    pub temperature: Option<f64>,
    pub encoder: String,
    pub prompt_template: String,
    /// RFC 3339 timestamp.
    pub created_at: String,
}

impl Manifest {
    fn check(&self, kind: ContentKind, dim: usize, n_classes: Option<usize>) -> Result<()> {
        let k = self.class_names.len();
        if kind == ContentKind::SimplexProbabilities && k != dim {
            return Err(Error::Manifest(format!(
                "{k} class names for probability dimension {dim}"
            )));
        }
        if let Some(n) = n_classes {
            if n != k {
                return Err(Error::Manifest(format!("{k} class names for {n} classes")));
            }
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Manifest(format!("temperature must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// `<path>.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Serializes `features` into container bytes.
pub fn encode_container(features: &FeatureSet, dtype: Dtype) -> Result<Vec<u8>> {
    let rows = features.rows();
    if features.kind() == ContentKind::SimplexProbabilities {
        check_row_sums(rows)?;
    }
    let header = Header {
        version: VERSION,
        kind: features.kind(),
        dtype,
        has_labels: features.labels().is_some(),
        n_samples: rows.rows() as u64,
        dim: rows.cols() as u64,
    };
    let mut out = Vec::with_capacity(header.file_len() as usize);
    out.extend_from_slice(&header.encode());
    for &v in rows.as_slice() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    if let Some(labels) = features.labels() {
        for &l in labels {
            let l = u32::try_from(l).map_err(|_| Error::invalid(format!("label {l} exceeds u32")))?;
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses container bytes. Raw-embedding content takes its class count from
/// `class_names` when given, else from the largest label.
pub fn decode_container(bytes: &[u8], class_names: Option<Vec<String>>) -> Result<FeatureSet> {
    let header = Header::decode(bytes)?;
    let expected = header.file_len();
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let n = header.n_samples as usize;
    let d = header.dim as usize;
    let width = header.dtype.width();
    let payload = &bytes[HEADER_LEN..HEADER_LEN + n * d * width];
    let data: Vec<f64> = match header.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let rows = Matrix::from_vec(n, d, data).expect("sized by header");
    let labels = header.has_labels.then(|| {
        bytes[HEADER_LEN + n * d * width..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect::<Vec<_>>()
    });
    if header.kind == ContentKind::SimplexProbabilities {
        check_row_sums(&rows)?;
    }
    let n_classes = class_names.as_ref().map(Vec::len);
    FeatureSet::with_tolerance(header.kind, rows, labels, n_classes, class_names, CONTAINER_TOL)
}

fn check_row_sums(rows: &Matrix) -> Result<()> {
    for (i, row) in rows.iter_rows().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&v| v < 0.0) || !((sum - 1.0).abs() <= CONTAINER_TOL) {
            return Err(Error::RowSum { row: i, sum });
        }
    }
    Ok(())
}

/// Writes the container at `path` and the manifest at `<path>.json`.
pub fn write_container(features: &FeatureSet, manifest: &Manifest, path: &Path, dtype: Dtype) -> Result<()> {
    manifest.check(features.kind(), features.dim(), Some(features.n_classes()))?;
    let bytes = encode_container(features, dtype)?;
    std::fs::write(path, bytes)?;
    std::fs::write(manifest_path(path), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read(manifest_path(path))?;
    Ok(serde_json::from_slice(&text)?)
}

/// Reads and validates a container and its manifest.
pub fn read_container(path: &Path) -> Result<(FeatureSet, Manifest)> {
    let manifest = read_manifest(path)?;
    let bytes = std::fs::read(path)?;
    let header = Header::decode(&bytes)?;
    manifest.check(header.kind, header.dim as usize, None)?;
    let features = decode_container(&bytes, Some(manifest.class_names.clone()))?;
    Ok((features, manifest))
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<Header> {
    use std::io::Read;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    std::fs::File::open(path)?
        .take(HEADER_LEN as u64)
        .read_to_end(&mut buf)?;
    Header::decode(&buf)
}
