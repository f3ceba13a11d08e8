//! Binary tensor blobs, JSON manifests and content hashing.
//!
//! Blob layout (all integers little-endian):
//!
//! ```text
//! offset  size     field
//! 0       4        magic "GDTB"
//! 4       2        version (1)
//! 6       1        dtype (0 = f32, 1 = f64, 2 = u8)
//! 7       1        ndim
//! 8       4*ndim   dims, u32 each, C row-major order
//! ..      ..       payload
//! ```

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"GDTB";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// Decoded blob payload.
#[derive(Debug, Clone, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub shape: Vec<usize>,
    pub data: BlobData,
}

impl Blob {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Blob {
            shape,
            data: BlobData::F32(data),
        }
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        Blob {
            shape,
            data: BlobData::U8(data),
        }
    }

    /// Stores `data` in the native precision of `F`.
    pub fn scalar<F: Scalar>(shape: Vec<usize>, data: &[F]) -> Self {
        let data = match F::DTYPE {
            DType::F32 => BlobData::F32(data.iter().map(|v| v.f64() as f32).collect()),
            _ => BlobData::F64(data.iter().map(|v| v.f64()).collect()),
        };
        Blob { shape, data }
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            BlobData::F32(_) => DType::F32,
            BlobData::F64(_) => DType::F64,
            BlobData::U8(_) => DType::U8,
        }
    }

    fn len(&self) -> usize {
        match &self.data {
            BlobData::F32(v) => v.len(),
            BlobData::F64(v) => v.len(),
            BlobData::U8(v) => v.len(),
        }
    }

    /// Values converted to `F` (u8 payloads convert exactly).
    pub fn to_scalar<F: Scalar>(&self) -> Vec<F> {
        match &self.data {
            BlobData::F32(v) => v.iter().map(|&x| F::of(x as f64)).collect(),
            BlobData::F64(v) => v.iter().map(|&x| F::of(x)).collect(),
            BlobData::U8(v) => v.iter().map(|&x| F::of(x as f64)).collect(),
        }
    }

    pub fn into_u8(self) -> Option<Vec<u8>> {
        match self.data {
            BlobData::U8(v) => Some(v),
            _ => None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        assert_eq!(
            self.shape.iter().product::<usize>(),
            self.len(),
            "blob shape/data mismatch"
        );
        let dtype = self.dtype();
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + self.len() * dtype.width());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(dtype.code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            BlobData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Parses one blob from the front of `bytes`, returning it and the bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> std::result::Result<(Blob, usize), String> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err("bad magic".into());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let dtype =
            DType::from_code(bytes[6]).ok_or_else(|| format!("unknown dtype {}", bytes[6]))?;
        let ndim = bytes[7] as usize;
        let mut pos = 8;
        if bytes.len() < pos + 4 * ndim {
            return Err("truncated header".into());
        }
        let shape: Vec<usize> = (0..ndim)
            .map(|i| {
                let o = pos + 4 * i;
                u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
            })
            .collect();
        pos += 4 * ndim;
        let count: usize = shape.iter().product();
        let end = pos + count * dtype.width();
        if bytes.len() < end {
            return Err("truncated payload".into());
        }
        let payload = &bytes[pos..end];
        let data = match dtype {
            DType::F32 => BlobData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => BlobData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => BlobData::U8(payload.to_vec()),
        };
        Ok((Blob { shape, data }, end))
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Blob, String> {
        let (blob, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - used));
        }
        Ok(blob)
    }
}

pub fn write_blob(path: &Path, blob: &Blob) -> Result<String> {
    let bytes = blob.encode();
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_blob(path: &Path) -> Result<Blob> {
    let bytes = fs::read(path)?;
    Blob::decode(&bytes).map_err(|detail| Error::Format {
        path: path.to_path_buf(),
        detail,
    })
}

/// Reads a blob and checks its content hash.
pub fn read_blob_verified(path: &Path, expected: &str) -> Result<Blob> {
    let bytes = fs::read(path)?;
    let found = sha256_hex(&bytes);
    if found != expected {
        return Err(Error::HashMismatch {
            what: path.display().to_string(),
            expected: expected.into(),
            found,
        });
    }
    Blob::decode(&bytes).map_err(|detail| Error::Format {
        path: path.to_path_buf(),
        detail,
    })
}

/// A sequence of named blobs in one file: `u32 count`, then per entry
/// `u32 name_len`, UTF-8 name, blob.
pub fn encode_named(entries: &[(String, Blob)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, blob) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&blob.encode());
    }
    out
}

pub fn decode_named(bytes: &[u8]) -> std::result::Result<Vec<(String, Blob)>, String> {
    let read_u32 = |at: usize| -> std::result::Result<usize, String> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| "truncated".to_string())
    };
    let count = read_u32(0)?;
    let mut pos = 4;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(pos)?;
        pos += 4;
        let name = bytes.get(pos..pos + len).ok_or("truncated name")?;
        let name = String::from_utf8(name.to_vec()).map_err(|e| e.to_string())?;
        pos += len;
        let (blob, used) = Blob::decode_prefix(&bytes[pos..])?;
        pos += used;
        out.push((name, blob));
    }
    if pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical (compact, field-ordered) JSON serialization.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    sha256_hex(&bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}
