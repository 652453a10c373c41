//! Image gallery: ids, captions and unit-norm embeddings, plus manifest ingestion.
//!
//! A manifest is a JSON-lines file. Each record carries an `id`, a `caption`
//! and either an inline `embedding` array or an `embedding_offset` row index
//! into a sidecar file of little-endian `f32` values stored next to the
//! manifest as `<stem>.f32`. An optional header line `{"dim": d}` fixes the
//! row width of the sidecar; without it the width is inferred from the
//! sidecar length and the number of records that reference it.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this cannot be normalized.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(String);

impl ImageId {
    pub fn new(id: impl Into<String>) -> Self {
        ImageId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ImageId {
    fn from(s: &str) -> Self {
        ImageId(s.to_string())
    }
}

/// Dense vector with unit Euclidean norm and finite components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Normalizes `raw` to unit length. `label` names the source in errors.
    pub fn normalized(raw: &[f32], label: &str) -> Result<Self> {
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(label.to_string()));
        }
        let norm = raw
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt();
        if norm < MIN_NORM {
            return Err(Error::ZeroVector(label.to_string()));
        }
        Ok(EmbeddingVector(
            raw.iter().map(|&x| (f64::from(x) / norm) as f32).collect(),
        ))
    }

    pub fn from_f64(raw: &[f64], label: &str) -> Result<Self> {
        let v: Vec<f32> = raw.iter().map(|&x| x as f32).collect();
        Self::normalized(&v, label)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }

    /// Dot product accumulated in `f64`.
    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub id: ImageId,
    pub caption: String,
    pub embedding: EmbeddingVector,
}

/// Immutable after construction; iteration order is ingestion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    entries: Vec<GalleryEntry>,
    dim: usize,
}

/// Row-major view over the gallery embeddings.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingMatrix<'a> {
    entries: &'a [GalleryEntry],
    dim: usize,
}

impl<'a> EmbeddingMatrix<'a> {
    pub fn rows(&self) -> usize {
        self.entries.len()
    }

    pub fn cols(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &'a [f32] {
        self.entries[i].embedding.as_slice()
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a [f32]> + 'a {
        self.entries.iter().map(|e| e.embedding.as_slice())
    }
}

impl Gallery {
    /// Builds a gallery from already-normalized entries.
    pub fn from_entries(entries: Vec<GalleryEntry>) -> Result<Self> {
        let dim = entries.first().map(|e| e.embedding.dim()).unwrap_or(0);
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.id.as_str().is_empty() {
                return Err(Error::InvalidParams("empty image id".into()));
            }
            if e.caption.is_empty() {
                return Err(Error::InvalidParams(format!("empty caption for {}", e.id)));
            }
            if e.embedding.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: e.embedding.dim(),
                });
            }
            if !seen.insert(e.id.clone()) {
                return Err(Error::DuplicateId(e.id.to_string()));
            }
        }
        Ok(Gallery { entries, dim })
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, index: usize) -> &GalleryEntry {
        &self.entries[index]
    }

    pub fn index_of(&self, id: &ImageId) -> Option<usize> {
        self.entries.iter().position(|e| &e.id == id)
    }

    pub fn embedding_matrix(&self) -> Result<EmbeddingMatrix<'_>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyGallery);
        }
        Ok(EmbeddingMatrix {
            entries: &self.entries,
            dim: self.dim,
        })
    }

    /// Writes the gallery as a manifest plus `<stem>.f32` sidecar.
    pub fn write_manifest(&self, manifest_path: &Path) -> Result<()> {
        let sidecar = sidecar_path(manifest_path);
        let mut lines = String::new();
        lines.push_str(&serde_json::to_string(&serde_json::json!({ "dim": self.dim })).unwrap());
        lines.push('\n');
        let mut floats = Vec::with_capacity(self.entries.len() * self.dim * 4);
        for (row, e) in self.entries.iter().enumerate() {
            let rec = ManifestRecord {
                id: Some(e.id.as_str().to_string()),
                caption: Some(e.caption.clone()),
                embedding: None,
                embedding_offset: Some(row as u64),
                dim: None,
            };
            lines.push_str(&serde_json::to_string(&rec).unwrap());
            lines.push('\n');
            for &x in e.embedding.as_slice() {
                floats.extend_from_slice(&x.to_le_bytes());
            }
        }
        write_file(manifest_path, lines.as_bytes())?;
        write_file(&sidecar, &floats)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding_offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
}

pub fn sidecar_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("f32")
}

enum RawEmbedding {
    Inline(Vec<f32>),
    Row(u64),
}

/// Reads a manifest (and its sidecar, when referenced) into a [`Gallery`].
/// Every embedding is re-normalized to unit length.
pub fn ingest_gallery(manifest_path: impl AsRef<Path>) -> Result<Gallery> {
    let path = manifest_path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let malformed = |line: usize, reason: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let mut header_dim = None;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        let Some(id) = rec.id else {
            if rec.dim.is_some() && records.is_empty() {
                header_dim = rec.dim;
                continue;
            }
            return Err(malformed(line_no, "record without id".into()));
        };
        if id.is_empty() {
            return Err(malformed(line_no, "empty id".into()));
        }
        let caption = rec
            .caption
            .filter(|c| !c.is_empty())
            .ok_or_else(|| malformed(line_no, format!("missing caption for {id}")))?;
        let raw = match (rec.embedding, rec.embedding_offset) {
            (Some(v), _) => RawEmbedding::Inline(v),
            (None, Some(row)) => RawEmbedding::Row(row),
            (None, None) => {
                return Err(malformed(line_no, format!("no embedding for {id}")));
            }
        };
        records.push((id, caption, raw));
    }

    let sidecar_rows = records
        .iter()
        .filter(|(_, _, r)| matches!(r, RawEmbedding::Row(_)))
        .count();
    let sidecar = if sidecar_rows > 0 {
        let sp = sidecar_path(path);
        let bytes = fs::read(&sp).map_err(|e| Error::io(&sp, e))?;
        if bytes.len() % 4 != 0 {
            return Err(malformed(0, format!("sidecar {} length not a multiple of 4", sp.display())));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let dim = match header_dim {
            Some(d) => d,
            None if floats.len().is_multiple_of(sidecar_rows) => floats.len() / sidecar_rows,
            None => {
                return Err(malformed(0, "cannot infer sidecar row width; add a {\"dim\": d} header".into()));
            }
        };
        Some((floats, dim))
    } else {
        None
    };

    let mut seen = HashSet::with_capacity(records.len());
    let mut entries = Vec::with_capacity(records.len());
    let mut dim: Option<usize> = header_dim;
    for (id, caption, raw) in records {
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let values: Vec<f32> = match raw {
            RawEmbedding::Inline(v) => v,
            RawEmbedding::Row(row) => {
                let (floats, d) = sidecar.as_ref().expect("sidecar loaded when rows referenced");
                let start = row as usize * d;
                let end = start + d;
                if *d == 0 || end > floats.len() {
                    return Err(malformed(0, format!("sidecar row {row} out of range for {id}")));
                }
                floats[start..end].to_vec()
            }
        };
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: values.len(),
                })
            }
            _ => {}
        }
        let embedding = EmbeddingVector::normalized(&values, &id)?;
        entries.push(GalleryEntry {
            id: ImageId(id),
            caption,
            embedding,
        });
    }
    Gallery::from_entries(entries)
}
