//! On-disk formats.
//!
//! Everything is little-endian regardless of host order.
//!
//! **FCBT tensor**
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FCBT"
//! 4       4     version (u32) = 1
//! 8       8     rows (u64)
//! 16      8     cols (u64)
//! 24      4·r·c payload, f32 row-major
//! ```
//!
//! **FCBM container** (checkpoints and projectors)
//!
//! ```text
//! 0       4     magic "FCBM"
//! 4       4     version (u32) = 1
//! 8       8     header length L (u64)
//! 16      L     UTF-8 JSON header: {"kind", "meta", "blobs": [{"name","rows","cols"}]}
//! 16+L    ...   f32 blobs concatenated in header order
//! ```
//!
//! Concept names are UTF-8, one per line; labels are one decimal integer per
//! line; a dataset manifest is a JSON document whose paths are resolved
//! relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{dim_err, FcbmError, Result};
use crate::numeric::Matrix;

pub const TENSOR_MAGIC: &[u8; 4] = b"FCBT";
pub const CONTAINER_MAGIC: &[u8; 4] = b"FCBM";
pub const FORMAT_VERSION: u32 = 1;

const TENSOR_HEADER_LEN: usize = 24;

/// Dense `f32` matrix exactly as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim_err!(
                "tensor {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Rounds to `f32`.
    pub fn from_matrix(m: &Matrix) -> Self {
        Tensor {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::new(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| x as f64).collect(),
        )
        .expect("tensor invariant: data length = rows × cols")
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TENSOR_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < TENSOR_HEADER_LEN {
            return Err(FcbmError::Format(format!(
                "tensor header truncated: {} bytes",
                bytes.len()
            )));
        }
        if &bytes[0..4] != TENSOR_MAGIC {
            return Err(FcbmError::Format(format!(
                "bad tensor magic {:?}",
                String::from_utf8_lossy(&bytes[0..4])
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(FcbmError::Format(format!(
                "unsupported tensor version {version}"
            )));
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| FcbmError::Format(format!("tensor shape {rows}x{cols} overflows")))?;
        let payload = &bytes[TENSOR_HEADER_LEN..];
        if payload.len() as u64 != expected {
            return Err(FcbmError::Format(format!(
                "tensor {rows}x{cols} expects {expected} payload bytes, found {}",
                payload.len()
            )));
        }
        let data = decode_f32(payload)?;
        Tensor::new(rows as usize, cols as usize, data)
    }
}

fn decode_f32(payload: &[u8]) -> Result<Vec<f32>> {
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(FcbmError::Data(format!(
            "non-finite value at flat index {i}"
        )));
    }
    Ok(data)
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_bytes()).map_err(|e| FcbmError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FcbmError::io(path, e))?;
    Tensor::from_bytes(&bytes).map_err(|e| with_path(e, path))
}

pub fn write_matrix(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    write_tensor(&Tensor::from_matrix(m), path)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    Ok(read_tensor(path)?.to_matrix())
}

fn with_path(err: FcbmError, path: &Path) -> FcbmError {
    let p = path.display();
    match err {
        FcbmError::Format(msg) => FcbmError::Format(format!("{p}: {msg}")),
        FcbmError::Data(msg) => FcbmError::Data(format!("{p}: {msg}")),
        FcbmError::Dimension(msg) => FcbmError::Dimension(format!("{p}: {msg}")),
        other => other,
    }
}

/// Order-sensitive SHA-256 over whitespace-trimmed names, hex encoded.
pub fn fingerprint<S: AsRef<str>>(names: &[S]) -> String {
    let mut hasher = Sha256::new();
    for name in names {
        hasher.update(name.as_ref().trim().as_bytes());
        hasher.update(b"\n");
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Concept texts paired with their text embeddings (`m × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSet {
    names: Vec<String>,
    embeddings: Matrix,
}

impl ConceptSet {
    pub fn new(names: Vec<String>, embeddings: Matrix) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(|n| n.trim().to_string()).collect();
        if names.len() != embeddings.rows() {
            return Err(dim_err!(
                "{} concept names but {} embedding rows",
                names.len(),
                embeddings.rows()
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(FcbmError::Data("empty concept name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(FcbmError::Data(format!("duplicate concept {n:?}")));
            }
        }
        Ok(ConceptSet { names, embeddings })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.names)
    }

    pub fn with_embeddings(&self, embeddings: Matrix) -> Result<Self> {
        ConceptSet::new(self.names.clone(), embeddings)
    }
}

pub fn load_concept_set(
    names_path: impl AsRef<Path>,
    embeddings_path: impl AsRef<Path>,
) -> Result<ConceptSet> {
    let names_path = names_path.as_ref();
    let text = fs::read_to_string(names_path).map_err(|e| FcbmError::io(names_path, e))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let embeddings = read_matrix(embeddings_path)?;
    ConceptSet::new(names, embeddings).map_err(|e| with_path(e, names_path))
}

pub fn write_concept_set(
    set: &ConceptSet,
    names_path: impl AsRef<Path>,
    embeddings_path: impl AsRef<Path>,
) -> Result<()> {
    let names_path = names_path.as_ref();
    let mut text = set.names.join("\n");
    text.push('\n');
    fs::write(names_path, text).map_err(|e| FcbmError::io(names_path, e))?;
    write_matrix(&set.embeddings, embeddings_path)
}

/// Embedding file paired with a concept names file: `birds.txt` → `birds.fcbt`.
pub fn default_embeddings_path(names_path: &Path) -> PathBuf {
    names_path.with_extension("fcbt")
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| FcbmError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<usize>().map_err(|_| {
                FcbmError::Data(format!("{}:{}: bad label {:?}", path.display(), i + 1, l))
            })
        })
        .collect()
}

pub fn write_labels(labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| FcbmError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: String,
    pub backbone_features: PathBuf,
    pub clip_features: PathBuf,
    pub labels: PathBuf,
    pub num_classes: usize,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| FcbmError::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| FcbmError::Format(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut manifest.backbone_features,
            &mut manifest.clip_features,
            &mut manifest.labels,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| FcbmError::io(path, e))
    }

    /// Loads and cross-checks every referenced file.
    pub fn load_data(&self) -> Result<Dataset> {
        let backbone = read_matrix(&self.backbone_features)?;
        let clip = read_matrix(&self.clip_features)?;
        let labels = read_labels(&self.labels)?;
        Dataset::new(backbone, clip, labels, self.num_classes)
    }
}

/// In-memory split: backbone features `N × D_b`, CLIP image features `N × d`, labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub backbone: Matrix,
    pub clip: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        backbone: Matrix,
        clip: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if backbone.rows() != clip.rows() || clip.rows() != labels.len() {
            return Err(dim_err!(
                "row counts disagree: backbone {}, clip {}, labels {}",
                backbone.rows(),
                clip.rows(),
                labels.len()
            ));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(FcbmError::Data(format!(
                "label {l} at row {i} is out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            backbone,
            clip,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobSpec {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerHeader {
    kind: String,
    meta: serde_json::Value,
    blobs: Vec<BlobSpec>,
}

/// Decoded FCBM container: a kind tag, JSON metadata and named `f32` blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub blobs: Vec<(String, Matrix)>,
}

impl Container {
    pub fn blob(&self, name: &str) -> Result<&Matrix> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| FcbmError::Format(format!("missing blob {name:?}")))
    }

    pub fn has_blob(&self, name: &str) -> bool {
        self.blobs.iter().any(|(n, _)| n == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ContainerHeader {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            blobs: self
                .blobs
                .iter()
                .map(|(name, m)| BlobSpec {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &self.blobs {
            for &v in m.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(FcbmError::Format("container header truncated".into()));
        }
        if &bytes[0..4] != CONTAINER_MAGIC {
            return Err(FcbmError::Format(format!(
                "bad container magic {:?}",
                String::from_utf8_lossy(&bytes[0..4])
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(FcbmError::Format(format!(
                "unsupported container version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < header_len {
            return Err(FcbmError::Format("container JSON header truncated".into()));
        }
        let header: ContainerHeader = serde_json::from_slice(&body[..header_len])
            .map_err(|e| FcbmError::Format(format!("container header: {e}")))?;
        let payload = &body[header_len..];
        let expected: usize = header.blobs.iter().map(|b| b.rows * b.cols * 4).sum();
        if payload.len() != expected {
            return Err(FcbmError::Format(format!(
                "blob section is {} bytes, header declares {expected}",
                payload.len()
            )));
        }
        let mut offset = 0;
        let mut blobs = Vec::with_capacity(header.blobs.len());
        for spec in header.blobs {
            let len = spec.rows * spec.cols * 4;
            let values = decode_f32(&payload[offset..offset + len]).map_err(|e| match e {
                FcbmError::Data(msg) => FcbmError::Data(format!("blob {:?}: {msg}", spec.name)),
                other => other,
            })?;
            offset += len;
            let m = Matrix::new(
                spec.rows,
                spec.cols,
                values.into_iter().map(f64::from).collect(),
            )?;
            blobs.push((spec.name, m));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            blobs,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| FcbmError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| FcbmError::io(path, e))?;
        Container::from_bytes(&bytes).map_err(|e| with_path(e, path))
    }
}
