//! Patch embedding sets and their on-disk format.
//!
//! A set is stored as two files side by side:
//!
//! * `<name>.npy`: NPY v1.0, little-endian `float32`, C order, shape `(n_patches, dim)`.
//! * `<name>.json`: the sidecar carrying provenance the tensor cannot express.
//!
//! Storage is 32-bit to match encoder outputs. Everything downstream accumulates in `f64`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";
const NPY_ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Reference,
    Counterfactual,
    Signal,
    Noise,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Reference => "reference",
            Variant::Counterfactual => "counterfactual",
            Variant::Signal => "signal",
            Variant::Noise => "noise",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    Finqa,
    Tatdqa,
    #[serde(other)]
    Other,
}

/// Everything about a set except the matrix itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetMeta {
    pub doc_id: String,
    pub model_id: String,
    pub variant: Variant,
    pub grid: Option<(usize, usize)>,
    pub source_image_path: String,
    pub dataset: Dataset,
}

impl SetMeta {
    pub fn new(doc_id: impl Into<String>, model_id: impl Into<String>, variant: Variant) -> Self {
        Self {
            doc_id: doc_id.into(),
            model_id: model_id.into(),
            variant,
            grid: None,
            source_image_path: String::new(),
            dataset: Dataset::Other,
        }
    }

    pub fn with_grid(mut self, rows: usize, cols: usize) -> Self {
        self.grid = Some((rows, cols));
        self
    }
}

/// JSON sidecar written next to every tensor file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub doc_id: String,
    pub model_id: String,
    pub variant: Variant,
    pub n_patches: usize,
    pub dim: usize,
    pub grid: Option<(usize, usize)>,
    pub source_image_path: String,
    pub dataset: Dataset,
}

/// A single invariant failure reported by [`PatchEmbeddingSet::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyPatches,
    ZeroDim,
    DataLength { expected: usize, actual: usize },
    NonFiniteValue { row: usize, col: usize },
    GridMismatch { rows: usize, cols: usize, n_patches: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyPatches => write!(f, "n_patches must be >= 1"),
            Violation::ZeroDim => write!(f, "dim must be >= 1"),
            Violation::DataLength { expected, actual } => {
                write!(f, "matrix holds {actual} values, shape needs {expected}")
            }
            Violation::NonFiniteValue { row, col } => write!(f, "non-finite value at ({row}, {col})"),
            Violation::GridMismatch { rows, cols, n_patches } => {
                write!(f, "grid {rows}x{cols} does not cover {n_patches} patches")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed sidecar {path}: {source}")]
    Sidecar {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed npy header: {0}")]
    MalformedHeader(String),
    #[error("payload truncated: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("shape mismatch: tensor header says {header:?}, sidecar says {sidecar:?}")]
    ShapeMismatch { header: (usize, usize), sidecar: (usize, usize) },
    #[error("non-finite value at flat index {index} (row {row}, col {col})")]
    NonFiniteValue { index: usize, row: usize, col: usize },
    #[error("invariant violation: {}", join_violations(.0))]
    InvariantViolation(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// An `n_patches x dim` matrix of patch vectors for one rendered document variant.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddingSet {
    meta: SetMeta,
    n_patches: usize,
    dim: usize,
    data: Vec<f32>,
}

impl PatchEmbeddingSet {
    /// Builds a set and checks every invariant.
    pub fn new(meta: SetMeta, n_patches: usize, dim: usize, data: Vec<f32>) -> Result<Self, StoreError> {
        let set = Self::unchecked(meta, n_patches, dim, data);
        let violations = set.validate();
        if violations.is_empty() {
            Ok(set)
        } else {
            Err(StoreError::InvariantViolation(violations))
        }
    }

    /// Builds a set from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(meta: SetMeta, rows: &[R]) -> Result<Self, StoreError> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(StoreError::InvariantViolation(vec![Violation::DataLength {
                    expected: rows.len() * dim,
                    actual: rows.iter().map(|r| r.as_ref().len()).sum(),
                }]));
            }
            data.extend_from_slice(r);
        }
        Self::new(meta, rows.len(), dim, data)
    }

    /// Builds a set without checking invariants. Use [`validate`](Self::validate) to inspect it.
    pub fn unchecked(meta: SetMeta, n_patches: usize, dim: usize, data: Vec<f32>) -> Self {
        Self { meta, n_patches, dim, data }
    }

    /// Lists every violated invariant. Empty iff the set is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.n_patches == 0 {
            out.push(Violation::EmptyPatches);
        }
        if self.dim == 0 {
            out.push(Violation::ZeroDim);
        }
        let expected = self.n_patches * self.dim;
        if self.data.len() != expected {
            out.push(Violation::DataLength { expected, actual: self.data.len() });
        }
        if self.dim > 0 {
            for (row, chunk) in self.data.chunks(self.dim).enumerate() {
                for (col, v) in chunk.iter().enumerate() {
                    if !v.is_finite() {
                        out.push(Violation::NonFiniteValue { row, col });
                    }
                }
            }
        }
        if let Some((rows, cols)) = self.meta.grid {
            if rows == 0 || cols == 0 || rows * cols != self.n_patches {
                out.push(Violation::GridMismatch { rows, cols, n_patches: self.n_patches });
            }
        }
        out
    }

    pub fn meta(&self) -> &SetMeta {
        &self.meta
    }

    pub fn doc_id(&self) -> &str {
        &self.meta.doc_id
    }

    pub fn model_id(&self) -> &str {
        &self.meta.model_id
    }

    pub fn variant(&self) -> Variant {
        self.meta.variant
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Same matrix, relabelled variant.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.meta.variant = variant;
        self
    }

    pub fn with_model(mut self, model_id: impl Into<String>) -> Self {
        self.meta.model_id = model_id.into();
        self
    }

    pub fn sidecar(&self) -> EmbeddingSidecar {
        EmbeddingSidecar {
            doc_id: self.meta.doc_id.clone(),
            model_id: self.meta.model_id.clone(),
            variant: self.meta.variant,
            n_patches: self.n_patches,
            dim: self.dim,
            grid: self.meta.grid,
            source_image_path: self.meta.source_image_path.clone(),
            dataset: self.meta.dataset,
        }
    }
}

/// Sidecar path for a tensor file: same basename, `.json` suffix.
pub fn sidecar_path(tensor_path: &Path) -> PathBuf {
    tensor_path.with_extension("json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Serializes an `(n, d)` float32 matrix as NPY v1.0.
pub fn encode_npy(n: usize, d: usize, data: &[f32]) -> Vec<u8> {
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({n}, {d}), }}");
    // magic(6) + version(2) + header_len(2) + header + '\n' must be a multiple of 64
    let unpadded = NPY_MAGIC.len() + 2 + 2 + header.len() + 1;
    let pad = (NPY_ALIGN - unpadded % NPY_ALIGN) % NPY_ALIGN;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len() + data.len() * 4);
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses an NPY buffer holding a 2-D little-endian float32 C-order array.
pub fn decode_npy(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>), StoreError> {
    let malformed = |m: &str| StoreError::MalformedHeader(m.to_string());
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(malformed("missing NPY magic"));
    }
    let (header_start, header_len) = match bytes[6] {
        1 => (10, u16::from_le_bytes([bytes[8], bytes[9]]) as usize),
        2 => {
            if bytes.len() < 12 {
                return Err(malformed("truncated v2 preamble"));
            }
            (12, u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize)
        }
        v => return Err(StoreError::MalformedHeader(format!("unsupported NPY version {v}"))),
    };
    let header_end = header_start + header_len;
    if bytes.len() < header_end {
        return Err(malformed("header extends past end of file"));
    }
    let header = std::str::from_utf8(&bytes[header_start..header_end]).map_err(|_| malformed("header is not UTF-8"))?;
    let (n, d) = parse_header(header)?;

    let payload = &bytes[header_end..];
    let expected = n.checked_mul(d).and_then(|c| c.checked_mul(4)).ok_or_else(|| malformed("shape overflows"))?;
    if payload.len() < expected {
        return Err(StoreError::TruncatedPayload { expected, actual: payload.len() });
    }
    if payload.len() > expected {
        return Err(StoreError::MalformedHeader(format!("{} trailing bytes after payload", payload.len() - expected)));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((n, d, data))
}

fn parse_header(header: &str) -> Result<(usize, usize), StoreError> {
    let bad = |m: String| StoreError::MalformedHeader(m);
    let body = header.trim_end_matches(['\n', ' ', '\0']).trim();
    let body = body
        .strip_prefix('{')
        .and_then(|b| b.strip_suffix('}'))
        .ok_or_else(|| bad(format!("header is not a dict: {header:?}")))?;

    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;
    let mut rest = body.trim();
    while !rest.is_empty() {
        let (key, after) = take_quoted(rest).ok_or_else(|| bad(format!("bad key near {rest:?}")))?;
        let after = after.trim_start().strip_prefix(':').ok_or_else(|| bad("missing ':'".into()))?;
        let after = after.trim_start();
        let (value, after) = if after.starts_with('(') {
            let close = after.find(')').ok_or_else(|| bad("unterminated shape tuple".into()))?;
            (&after[..=close], &after[close + 1..])
        } else if after.starts_with('\'') || after.starts_with('"') {
            let (v, a) = take_quoted(after).ok_or_else(|| bad("bad string value".into()))?;
            (v, a)
        } else {
            let end = after.find(',').unwrap_or(after.len());
            (after[..end].trim(), &after[end..])
        };
        match key {
            "descr" => descr = Some(value),
            "fortran_order" => fortran = Some(value),
            "shape" => shape = Some(value),
            other => return Err(bad(format!("unexpected key {other:?}"))),
        }
        rest = after.trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }

    match descr {
        Some("<f4") => {}
        Some(d) => return Err(bad(format!("unsupported dtype {d:?}, expected '<f4'"))),
        None => return Err(bad("missing descr".into())),
    }
    match fortran {
        Some("False") => {}
        Some(_) => return Err(bad("fortran_order must be False".into())),
        None => return Err(bad("missing fortran_order".into())),
    }
    let shape = shape.ok_or_else(|| bad("missing shape".into()))?;
    let dims: Vec<usize> = shape
        .trim_start_matches('(')
        .trim_end_matches(')')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad(format!("bad shape entry {s:?}"))))
        .collect::<Result<_, _>>()?;
    match dims.as_slice() {
        [n, d] => Ok((*n, *d)),
        _ => Err(bad(format!("expected a 2-D shape, got {shape}"))),
    }
}

fn take_quoted(s: &str) -> Option<(&str, &str)> {
    let q = s.chars().next()?;
    if q != '\'' && q != '"' {
        return None;
    }
    let end = s[1..].find(q)? + 1;
    Some((&s[1..end], &s[end + 1..]))
}

/// Writes the tensor file and its sidecar.
pub fn save_embeddings(set: &PatchEmbeddingSet, path: &Path) -> Result<(), StoreError> {
    let violations = set.validate();
    if !violations.is_empty() {
        return Err(StoreError::InvariantViolation(violations));
    }
    let bytes = encode_npy(set.n_patches, set.dim, &set.data);
    write_file(path, &bytes)?;
    let side = sidecar_path(path);
    let json = serde_json::to_vec_pretty(&set.sidecar())
        .map_err(|source| StoreError::Sidecar { path: side.clone(), source })?;
    write_file(&side, &json)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

/// Loads and validates a tensor file plus its mandatory sidecar.
pub fn load_embeddings(path: &Path) -> Result<PatchEmbeddingSet, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (n, d, data) = decode_npy(&bytes)?;

    let side = sidecar_path(path);
    let side_bytes = fs::read(&side).map_err(io_err(&side))?;
    let sidecar: EmbeddingSidecar =
        serde_json::from_slice(&side_bytes).map_err(|source| StoreError::Sidecar { path: side.clone(), source })?;
    if (sidecar.n_patches, sidecar.dim) != (n, d) {
        return Err(StoreError::ShapeMismatch { header: (n, d), sidecar: (sidecar.n_patches, sidecar.dim) });
    }
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(StoreError::NonFiniteValue { index, row: index / d.max(1), col: index % d.max(1) });
    }

    let meta = SetMeta {
        doc_id: sidecar.doc_id,
        model_id: sidecar.model_id,
        variant: sidecar.variant,
        grid: sidecar.grid,
        source_image_path: sidecar.source_image_path,
        dataset: sidecar.dataset,
    };
    PatchEmbeddingSet::new(meta, n, d, data)
}
