//! `LRTA0001` tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! | bytes            | content                                              |
//! |------------------|------------------------------------------------------|
//! | 0..8             | magic `LRTA0001`                                     |
//! | 8..16            | `u64` byte length `n` of the manifest                |
//! | 16..16+n         | UTF-8 JSON manifest                                  |
//! | ..P              | zero padding up to the next multiple of 64           |
//! | P..              | payload; tensor `offset`s are relative to `P`        |
//!
//! The manifest is `{"tensors":[{"name","dtype","shape","offset"}...],"metadata":{...}}`,
//! with `metadata` omitted when empty. Tensors are raw little-endian `f32`/`f64` in row-major
//! order, each starting at a 64-byte aligned offset. The file ends exactly at the end of the
//! last tensor, so an empty archive is [`EMPTY_ARCHIVE_LEN`] bytes.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"LRTA0001";
pub const ALIGN: usize = 64;
/// Size of an archive with no tensors and no metadata.
pub const EMPTY_ARCHIVE_LEN: usize = 64;

const PREFIX_LEN: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic: not an LRTA0001 archive")]
    BadMagic,
    #[error("truncated archive: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("unknown dtype {dtype:?} for tensor {name:?}")]
    UnknownDtype { name: String, dtype: String },
    #[error("tensor {name:?} offset {offset} is not {ALIGN}-byte aligned")]
    Misaligned { name: String, offset: u64 },
    #[error("tensor {name:?} overlaps the previous tensor or is out of order")]
    Overlap { name: String },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {name:?} size overflows")]
    SizeOverflow { name: String },
    #[error("archive has {extra} trailing bytes after the last tensor")]
    TrailingBytes { extra: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_le_bytes(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        }
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return shape_err(format!("tensor {name:?}: shape {shape:?} does not match {} values", data.len()));
        }
        Ok(Self { name, shape, data })
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * self.dtype().size()
    }

    /// Equality on name, dtype, shape and raw bits (NaN payloads included).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self.dtype() == other.dtype()
            && self.data.to_le_bytes() == other.data.to_le_bytes()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Named tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    tensors: Vec<Tensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn push(&mut self, tensor: Tensor) -> Result<()> {
        if self.get(&tensor.name).is_some() {
            return Err(Error::Usage(format!("duplicate tensor name {:?}", tensor.name)));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Data(format!("archive has no tensor {name:?}")))
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("archive metadata has no key {key:?}")))
    }

    pub fn push_matrix<T: Scalar>(&mut self, name: impl Into<String>, m: &Matrix<T>, dtype: DType) -> Result<()> {
        let data = encode(m.as_slice(), dtype);
        self.push(Tensor::new(name, vec![m.rows(), m.cols()], data)?)
    }

    pub fn push_vector<T: Scalar>(&mut self, name: impl Into<String>, v: &[T], dtype: DType) -> Result<()> {
        let data = encode(v, dtype);
        self.push(Tensor::new(name, vec![v.len()], data)?)
    }

    /// Reads a 2-D tensor, widening or narrowing to `T`. Non-finite values are a data error.
    pub fn matrix<T: Scalar>(&self, name: &str) -> Result<Matrix<T>> {
        let t = self.require(name)?;
        let [rows, cols] = t.shape[..] else {
            return shape_err(format!("tensor {name:?} has shape {:?}, expected 2-D", t.shape));
        };
        Matrix::new(rows, cols, decode(&t.data))
            .map_err(|e| Error::Data(format!("tensor {name:?}: {e}")))
    }

    pub fn vector<T: Scalar>(&self, name: &str) -> Result<Vec<T>> {
        let t = self.require(name)?;
        if t.shape.len() != 1 {
            return shape_err(format!("tensor {name:?} has shape {:?}, expected 1-D", t.shape));
        }
        let v: Vec<T> = decode(&t.data);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("tensor {name:?} has non-finite values")));
        }
        Ok(v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for t in &self.tensors {
            offset = align_up(offset);
            entries.push(ManifestEntry {
                name: t.name.clone(),
                dtype: t.dtype().name().to_string(),
                shape: t.shape.clone(),
                offset: offset as u64,
            });
            offset += t.byte_len();
        }
        let manifest = Manifest { tensors: entries, metadata: self.metadata.clone() };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");

        let payload_start = align_up(PREFIX_LEN + json.len());
        let mut out = Vec::with_capacity(payload_start + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(payload_start, 0);
        for (t, e) in self.tensors.iter().zip(&manifest.tensors) {
            out.resize(payload_start + e.offset as usize, 0);
            out.extend_from_slice(&t.data.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, ParseError> {
        let available = bytes.len() as u64;
        let truncated = |needed: u64| ParseError::Truncated { needed, available };
        if bytes.len() < MAGIC.len() {
            return Err(truncated(MAGIC.len() as u64));
        }
        if &bytes[..8] != MAGIC {
            return Err(ParseError::BadMagic);
        }
        if bytes.len() < PREFIX_LEN {
            return Err(truncated(PREFIX_LEN as u64));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = (PREFIX_LEN as u64)
            .checked_add(manifest_len)
            .filter(|&end| end <= available)
            .ok_or_else(|| truncated(PREFIX_LEN as u64 + manifest_len))? as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
            .map_err(|e| ParseError::Manifest(e.to_string()))?;

        let payload_start = align_up(header_end) as u64;
        let mut names = HashSet::new();
        let mut cursor = 0u64;
        let mut layout = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let dtype = DType::parse(&e.dtype)
                .ok_or_else(|| ParseError::UnknownDtype { name: e.name.clone(), dtype: e.dtype.clone() })?;
            if !names.insert(e.name.as_str()) {
                return Err(ParseError::DuplicateName(e.name.clone()));
            }
            if e.offset % ALIGN as u64 != 0 {
                return Err(ParseError::Misaligned { name: e.name.clone(), offset: e.offset });
            }
            if e.offset < cursor {
                return Err(ParseError::Overlap { name: e.name.clone() });
            }
            let overflow = || ParseError::SizeOverflow { name: e.name.clone() };
            let count = e.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64)).ok_or_else(overflow)?;
            let size = count.checked_mul(dtype.size() as u64).ok_or_else(overflow)?;
            cursor = e.offset.checked_add(size).ok_or_else(overflow)?;
            layout.push((dtype, e.offset, size));
        }

        let expected = payload_start.checked_add(cursor).ok_or_else(|| truncated(u64::MAX))?;
        if available < expected {
            return Err(truncated(expected));
        }
        if available > expected {
            return Err(ParseError::TrailingBytes { extra: available - expected });
        }

        let tensors = manifest
            .tensors
            .into_iter()
            .zip(layout)
            .map(|(e, (dtype, offset, size))| {
                let start = (payload_start + offset) as usize;
                let data = TensorData::from_le_bytes(dtype, &bytes[start..start + size as usize]);
                Tensor { name: e.name, shape: e.shape, data }
            })
            .collect();
        Ok(Self { tensors, metadata: manifest.metadata })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

fn encode<T: Scalar>(values: &[T], dtype: DType) -> TensorData {
    match dtype {
        DType::F32 => TensorData::F32(values.iter().map(|v| v.as_f64() as f32).collect()),
        DType::F64 => TensorData::F64(values.iter().map(|v| v.as_f64()).collect()),
    }
}

fn decode<T: Scalar>(data: &TensorData) -> Vec<T> {
    match data {
        TensorData::F32(v) => v.iter().map(|&x| T::from_f32(x).unwrap()).collect(),
        TensorData::F64(v) => v.iter().map(|&x| T::from_f64(x).unwrap()).collect(),
    }
}
