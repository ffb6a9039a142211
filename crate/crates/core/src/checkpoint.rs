//! On-disk parameter sets.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "DNIC" | u32 version (=1) | u64 header_len | header_len bytes of UTF-8 JSON
//! | zero padding to a 64-byte file offset
//! | payload: f32 tensors, each starting at a 64-byte aligned payload offset
//! | u64 FNV-1a checksum of the payload region
//! ```
//!
//! The JSON header is `{arch_id, arch, meta, tensors: [{name, shape, offset, nbytes}]}`
//! where `offset` is relative to the start of the payload region. The payload
//! region runs from its start to the end of the last tensor, including the
//! zero padding between tensors.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netgraph::ArchSpec;
use crate::tensor::{Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"DNIC";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("payload checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor `{name}`: shape {shape:?} needs {expected} bytes, header says {nbytes}")]
    ShapeBytes {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        nbytes: usize,
    },
    #[error("tensor `{0}` contains a non-finite value")]
    NonFinite(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("parameters do not match architecture `{arch_id}`: {detail}")]
    ArchMismatch { arch_id: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One term of an interpolation recipe as recorded in checkpoint metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeRecord {
    pub checksum: String,
    pub task_tag: String,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub task_tag: String,
    pub parent_checksum: Option<String>,
    pub seed: u64,
    pub created_iso8601: String,
    /// Ancestor checksums, nearest first. `lineage[0] == parent_checksum`
    /// whenever a parent is set.
    #[serde(default)]
    pub lineage: Vec<String>,
    /// Present on interpolated models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe: Option<Vec<RecipeRecord>>,
}

pub const EPOCH_ISO8601: &str = "1970-01-01T00:00:00Z";

impl Meta {
    pub fn new(task_tag: impl Into<String>, seed: u64) -> Self {
        Self {
            task_tag: task_tag.into(),
            parent_checksum: None,
            seed,
            created_iso8601: EPOCH_ISO8601.into(),
            lineage: Vec::new(),
            recipe: None,
        }
    }

    /// Ancestors including the parent, even for files that only set
    /// `parent_checksum`.
    pub fn ancestors(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.lineage.iter().map(String::as_str).collect();
        if let Some(p) = &self.parent_checksum {
            if !out.contains(&p.as_str()) {
                out.insert(0, p);
            }
        }
        out
    }
}

/// Named, ordered parameter tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub arch_id: String,
    pub arch: Option<ArchSpec>,
    entries: Vec<(String, Tensor)>,
    pub meta: Meta,
}

impl ParamSet {
    /// Builds a parameter set without an architecture block.
    pub fn new(
        arch_id: impl Into<String>,
        entries: Vec<(String, Tensor)>,
        meta: Meta,
    ) -> Result<Self, CheckpointError> {
        let p = Self {
            arch_id: arch_id.into(),
            arch: None,
            entries,
            meta,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds a parameter set whose entries must match `arch`'s layout exactly.
    pub fn with_arch(
        arch: ArchSpec,
        entries: Vec<(String, Tensor)>,
        meta: Meta,
    ) -> Result<Self, CheckpointError> {
        let p = Self {
            arch_id: arch.arch_id.clone(),
            arch: Some(arch),
            entries,
            meta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CheckpointError> {
        let mut seen = HashSet::new();
        for (name, t) in &self.entries {
            if !seen.insert(name.as_str()) {
                return Err(CheckpointError::DuplicateName(name.clone()));
            }
            if !t.is_finite() {
                return Err(CheckpointError::NonFinite(name.clone()));
            }
        }
        if let Some(arch) = &self.arch {
            let mismatch = |detail: String| CheckpointError::ArchMismatch {
                arch_id: arch.arch_id.clone(),
                detail,
            };
            if arch.arch_id != self.arch_id {
                return Err(mismatch(format!("arch block names `{}`", arch.arch_id)));
            }
            let layout = arch.param_layout();
            if layout.len() != self.entries.len() {
                return Err(mismatch(format!(
                    "expected {} tensors, found {}",
                    layout.len(),
                    self.entries.len()
                )));
            }
            for (info, (name, t)) in layout.iter().zip(&self.entries) {
                if &info.name != name || info.shape != t.shape() {
                    return Err(mismatch(format!(
                        "expected `{}` {:?}, found `{}` {:?}",
                        info.name,
                        info.shape,
                        name,
                        t.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub(crate) fn tensor_at_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    /// Replaces the tensors, keeping names, arch and metadata.
    pub(crate) fn replace_tensors(&mut self, tensors: Vec<Tensor>) {
        debug_assert_eq!(tensors.len(), self.entries.len());
        for ((_, slot), t) in self.entries.iter_mut().zip(tensors) {
            debug_assert_eq!(slot.shape(), t.shape());
            *slot = t;
        }
    }

    /// True when both sets list the same names with the same shapes, in order.
    pub fn same_names_shapes(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    /// Content checksum of the payload region, as 16 lowercase hex digits.
    pub fn checksum(&self) -> String {
        format!("{:016x}", self.payload_hash())
    }

    fn payload_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        let mut pos = 0usize;
        for (_, t) in &self.entries {
            let start = align_up(pos);
            h.zeros(start - pos);
            for v in t.data() {
                h.write(&v.to_le_bytes());
            }
            pos = start + t.numel() * 4;
        }
        h.finish()
    }
}

/// Checksum of a ParamSet, the identifier used in lineage chains.
pub fn checksum(p: &ParamSet) -> String {
    p.checksum()
}

struct Fnv1a(u64);

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    fn new() -> Self {
        Self(Self::OFFSET)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    fn zeros(&mut self, n: usize) {
        for _ in 0..n {
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.write(bytes);
    h.finish()
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch_id: String,
    #[serde(default)]
    arch: Option<ArchSpec>,
    meta: Meta,
    tensors: Vec<TensorRecord>,
}

/// Serializes `p` to the byte layout described in the module docs.
pub fn to_bytes(p: &ParamSet) -> Result<Vec<u8>, CheckpointError> {
    p.validate()?;
    let mut records = Vec::with_capacity(p.entries.len());
    let mut pos = 0usize;
    for (name, t) in &p.entries {
        let offset = align_up(pos);
        let nbytes = t.numel() * 4;
        records.push(TensorRecord {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            nbytes,
        });
        pos = offset + nbytes;
    }
    let payload_len = pos;
    let header = Header {
        arch_id: p.arch_id.clone(),
        arch: p.arch.clone(),
        meta: p.meta.clone(),
        tensors: records,
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let prefix = 4 + 4 + 8 + json.len();
    let payload_start = align_up(prefix);
    let mut buf = Vec::with_capacity(payload_start + payload_len + 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.resize(payload_start, 0);
    for ((_, t), rec) in p.entries.iter().zip(&header.tensors) {
        buf.resize(payload_start + rec.offset, 0);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&buf[payload_start..]);
    buf.extend_from_slice(&sum.to_le_bytes());
    Ok(buf)
}

/// Parses a checkpoint image produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet, CheckpointError> {
    if bytes.len() < 16 {
        return Err(if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            CheckpointError::BadMagic
        } else {
            CheckpointError::Truncated("file shorter than the fixed prefix".into())
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Truncated("header runs past end of file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;

    let payload_start = align_up(header_end);
    let mut payload_len = 0usize;
    for rec in &header.tensors {
        let expected = rec.shape.iter().product::<usize>() * 4;
        if rec.shape.is_empty() || rec.shape.contains(&0) || expected != rec.nbytes {
            return Err(CheckpointError::ShapeBytes {
                name: rec.name.clone(),
                shape: rec.shape.clone(),
                expected,
                nbytes: rec.nbytes,
            });
        }
        if rec.offset % ALIGN != 0 || rec.offset < payload_len {
            return Err(CheckpointError::Header(format!(
                "tensor `{}` has misplaced offset {}",
                rec.name, rec.offset
            )));
        }
        payload_len = rec.offset + rec.nbytes;
    }
    let expected_len = payload_start + payload_len + 8;
    if bytes.len() < expected_len {
        return Err(CheckpointError::Truncated(format!(
            "expected {expected_len} bytes, found {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected_len {
        return Err(CheckpointError::Header(format!(
            "{} trailing bytes after checksum",
            bytes.len() - expected_len
        )));
    }
    let payload = &bytes[payload_start..payload_start + payload_len];
    let stored = u64::from_le_bytes(bytes[expected_len - 8..].try_into().unwrap());
    let computed = fnv1a64(payload);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }

    let mut entries = Vec::with_capacity(header.tensors.len());
    for rec in header.tensors {
        let raw = &payload[rec.offset..rec.offset + rec.nbytes];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push((rec.name, Tensor::new(rec.shape, data)?));
    }
    let p = ParamSet {
        arch_id: header.arch_id,
        arch: header.arch,
        entries,
        meta: header.meta,
    };
    p.validate()?;
    Ok(p)
}

/// Writes `p` to `path` and returns its payload checksum.
///
/// Concurrent saves to the same path are a caller error.
pub fn save(p: &ParamSet, path: impl AsRef<Path>) -> Result<String, CheckpointError> {
    let bytes = to_bytes(p)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(p.checksum())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamSet, CheckpointError> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CompatReport {
    pub same_arch: bool,
    pub same_names_shapes: bool,
    pub fine_tune_related: bool,
}

impl CompatReport {
    pub fn interpolable(&self) -> bool {
        self.same_arch && self.same_names_shapes
    }
}

/// Compatibility verdicts for interpolating `a` with `b`.
///
/// `fine_tune_related` holds when one model's checksum appears in the
/// other's ancestor chain.
pub fn lineage_check(a: &ParamSet, b: &ParamSet) -> CompatReport {
    let arch_blocks_agree = match (&a.arch, &b.arch) {
        (Some(x), Some(y)) => x == y,
        _ => true,
    };
    let same_arch = a.arch_id == b.arch_id && arch_blocks_agree;
    let ca = a.checksum();
    let cb = b.checksum();
    let fine_tune_related = b.meta.ancestors().contains(&ca.as_str())
        || a.meta.ancestors().contains(&cb.as_str());
    CompatReport {
        same_arch,
        same_names_shapes: a.same_names_shapes(b),
        fine_tune_related,
    }
}
