//! The DV4D binary tensor container.
//!
//! A record is laid out as:
//!
//! ```text
//! "DV4D" | version: u16 LE | dtype: u8 | rank: u8 | extents: rank x u64 LE | payload (LE)
//! ```
//!
//! dtype tags: 1 = f64, 2 = f32, 3 = u8. A bundle is a file of concatenated
//! records plus a JSON manifest next to it (same path, `.json` extension)
//! naming every record with its shape, byte range and SHA-256 digest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DV4D";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?} at byte {position}")]
    BadMagic { found: [u8; 4], position: usize },
    #[error("unsupported container version {found} (expected {expected})")]
    UnsupportedVersion { found: u16, expected: u16 },
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("truncated input: needed {needed} bytes at byte {position}, {available} available")]
    Truncated { position: usize, needed: usize, available: usize },
    #[error("{count} trailing bytes after record at byte {position}")]
    TrailingBytes { position: usize, count: usize },
    #[error("checksum mismatch for entry {entry}")]
    ChecksumMismatch { entry: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("missing entry {0}")]
    MissingEntry(String),
    #[error("entry {entry}: expected {expected}, found {found}")]
    Dtype { entry: String, expected: &'static str, found: &'static str },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F64(_) => 1,
            Payload::F32(_) => 2,
            Payload::U8(_) => 3,
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            Payload::F64(_) => "f64",
            Payload::F32(_) => "f32",
            Payload::U8(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }
}

/// One typed, shaped array.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self { shape: t.shape().to_vec(), payload: Payload::F64(t.data().to_vec()) }
    }

    pub fn from_mask(shape: &[usize], mask: &[bool]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), mask.len());
        Self { shape: shape.to_vec(), payload: Payload::U8(mask.iter().map(|&b| b as u8).collect()) }
    }

    /// Widens any dtype to an `f64` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = match &self.payload {
            Payload::F64(v) => v.clone(),
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::U8(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Tensor::from_parts(self.shape.clone(), data)
    }

    pub fn to_mask(&self, entry: &str) -> Result<Vec<bool>, ContainerError> {
        match &self.payload {
            Payload::U8(v) => Ok(v.iter().map(|&b| b != 0).collect()),
            other => Err(ContainerError::Dtype { entry: entry.into(), expected: "u8", found: other.dtype_name() }),
        }
    }
}

pub fn encode(record: &Record) -> Vec<u8> {
    assert_eq!(record.shape.iter().product::<usize>(), record.payload.len(), "record shape/payload mismatch");
    assert!(record.shape.len() <= u8::MAX as usize);
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * record.shape.len() + 8 * record.payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(record.payload.tag());
    out.push(record.shape.len() as u8);
    for &e in &record.shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match &record.payload {
        Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::U8(v) => out.extend_from_slice(v),
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ContainerError::Truncated { position: self.base + self.pos, needed: n, available });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Decodes one record from the front of `bytes`, returning it and the number
/// of bytes consumed. `base` offsets reported positions.
pub fn decode_prefix(bytes: &[u8], base: usize) -> Result<(Record, usize), ContainerError> {
    let mut r = Reader { bytes, pos: 0, base };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("length 4");
    if magic != MAGIC {
        return Err(ContainerError::BadMagic { found: magic, position: base });
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("length 2"));
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion { found: version, expected: VERSION });
    }
    let tag = r.take(1)?[0];
    let rank = r.take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = u64::from_le_bytes(r.take(8)?.try_into().expect("length 8"));
        shape.push(usize::try_from(e).map_err(|_| ContainerError::Manifest(format!("extent {e} too large")))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| ContainerError::Manifest("element count overflows".into()))?;
    let width = match tag {
        1 => 8,
        2 => 4,
        3 => 1,
        t => return Err(ContainerError::UnknownDtype(t)),
    };
    let raw = r.take(n.checked_mul(width).ok_or_else(|| ContainerError::Manifest("payload too large".into()))?)?;
    let payload = match tag {
        1 => Payload::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()),
        2 => Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
        _ => Payload::U8(raw.to_vec()),
    };
    Ok((Record { shape, payload }, r.pos))
}

/// Decodes exactly one record; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<Record, ContainerError> {
    let (rec, used) = decode_prefix(bytes, 0)?;
    if used != bytes.len() {
        return Err(ContainerError::TrailingBytes { position: used, count: bytes.len() - used });
    }
    Ok(rec)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), ContainerError> {
    fs::write(path, encode(&Record::from_tensor(t)))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor, ContainerError> {
    Ok(decode(&fs::read(path)?)?.to_tensor())
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u16,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Named records plus free-form JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bundle {
    pub entries: Vec<(String, Record)>,
    pub meta: serde_json::Value,
}

impl Bundle {
    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.entries.push((name.into(), Record::from_tensor(t)));
    }

    pub fn push_mask(&mut self, name: impl Into<String>, shape: &[usize], mask: &[bool]) {
        self.entries.push((name.into(), Record::from_mask(shape, mask)));
    }

    pub fn record(&self, name: &str) -> Result<&Record, ContainerError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r)
            .ok_or_else(|| ContainerError::MissingEntry(name.into()))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor, ContainerError> {
        Ok(self.record(name)?.to_tensor())
    }

    pub fn mask(&self, name: &str) -> Result<Vec<bool>, ContainerError> {
        self.record(name)?.to_mask(name)
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `path` (records) and its `.json` manifest.
pub fn write_bundle(path: &Path, bundle: &Bundle) -> Result<(), ContainerError> {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(bundle.entries.len());
    for (name, rec) in &bundle.entries {
        let enc = encode(rec);
        entries.push(ManifestEntry {
            name: name.clone(),
            dtype: rec.payload.dtype_name().into(),
            shape: rec.shape.clone(),
            offset: bytes.len(),
            length: enc.len(),
            sha256: hex::encode(Sha256::digest(&enc)),
        });
        bytes.extend_from_slice(&enc);
    }
    let manifest = Manifest { version: VERSION, entries, meta: bundle.meta.clone() };
    fs::write(path, bytes)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| ContainerError::Manifest(e.to_string()))?;
    fs::write(manifest_path(path), json)?;
    Ok(())
}

/// Reads a bundle, verifying every record against its manifest digest.
pub fn read_bundle(path: &Path) -> Result<Bundle, ContainerError> {
    let json = fs::read_to_string(manifest_path(path))?;
    let manifest: Manifest = serde_json::from_str(&json).map_err(|e| ContainerError::Manifest(e.to_string()))?;
    if manifest.version != VERSION {
        return Err(ContainerError::UnsupportedVersion { found: manifest.version, expected: VERSION });
    }
    let bytes = fs::read(path)?;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let end = e.offset.checked_add(e.length).ok_or_else(|| ContainerError::Manifest("range overflow".into()))?;
        if end > bytes.len() {
            let available = bytes.len().saturating_sub(e.offset);
            return Err(ContainerError::Truncated { position: e.offset.min(bytes.len()), needed: e.length, available });
        }
        let chunk = &bytes[e.offset..end];
        if hex::encode(Sha256::digest(chunk)) != e.sha256 {
            return Err(ContainerError::ChecksumMismatch { entry: e.name.clone() });
        }
        let (rec, used) = decode_prefix(chunk, e.offset)?;
        if used != chunk.len() {
            return Err(ContainerError::TrailingBytes { position: e.offset + used, count: chunk.len() - used });
        }
        if rec.shape != e.shape {
            return Err(ContainerError::Manifest(format!("entry {}: shape {:?} disagrees with manifest {:?}", e.name, rec.shape, e.shape)));
        }
        entries.push((e.name.clone(), rec));
    }
    Ok(Bundle { entries, meta: manifest.meta })
}
