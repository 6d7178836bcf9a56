//! On-disk container shared by corpora and weight checkpoints.
//!
//! Layout: 8-byte magic, a length-prefixed UTF-8 JSON header (8-byte
//! little-endian length) holding the metadata plus an array directory
//! (name, dtype, shape, byte offset), the raw little-endian arrays, and a
//! trailing CRC32 over everything between the magic and the checksum.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

/// Magic for corpus files.
pub const CORPUS_MAGIC: [u8; 8] = *b"DPAPC\x00\x01\x00";
/// Magic for weight checkpoints.
pub const WEIGHTS_MAGIC: [u8; 8] = *b"DPAWT\x00\x01\x00";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("container magic/version mismatch")]
    VersionMismatch,
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("payload checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("array {name}: {reason}")]
    Array { name: String, reason: String },
}

/// Element type of a stored array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    I32,
    F64,
}

impl Dtype {
    fn byte_width(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// One directory entry in the header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset inside the raw-array region.
    pub offset: u64,
}

/// Array payload in memory.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::I32(_) => Dtype::I32,
            ArrayData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::I32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => ArrayData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::I32 => ArrayData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => ArrayData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

/// A named array with its shape, ready to be written.
#[derive(Debug, Clone)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: ArrayData) -> Self {
        let name = name.into();
        debug_assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "array {name}: shape does not match data length"
        );
        Self { name, shape, data }
    }
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    format_version: u32,
    meta: M,
    arrays: Vec<ArrayEntry>,
}

const FORMAT_VERSION: u32 = 1;

/// Serialize metadata and arrays into a container file.
pub fn write_container<M: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    meta: &M,
    arrays: &[NamedArray],
) -> Result<(), ContainerError> {
    let mut payload: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0u64;
    for a in arrays {
        entries.push(ArrayEntry {
            name: a.name.clone(),
            dtype: a.data.dtype(),
            shape: a.shape.clone(),
            offset,
        });
        a.data.write_le(&mut payload);
        offset += (a.data.len() * a.data.dtype().byte_width()) as u64;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        meta,
        arrays: entries,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| ContainerError::Header(e.to_string()))?;

    let mut body: Vec<u8> = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    body.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    body.extend_from_slice(&header_bytes);
    body.extend_from_slice(&payload);
    let crc = crc32fast::hash(&body);

    let mut file: Vec<u8> = Vec::with_capacity(8 + body.len() + 4);
    file.extend_from_slice(magic);
    file.extend_from_slice(&body);
    file.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, file)?;
    Ok(())
}

/// Read a container file back into metadata plus named arrays.
///
/// The whole file is validated (magic, checksum, directory bounds) before
/// anything is returned, so a truncated or corrupted file never yields a
/// partial result.
pub fn read_container<M: DeserializeOwned>(
    path: &Path,
    magic: &[u8; 8],
) -> Result<(M, Vec<NamedArray>), ContainerError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(ContainerError::VersionMismatch);
    }
    if bytes.len() < 8 + 8 + 4 {
        return Err(ContainerError::Truncated("header length"));
    }
    let body = &bytes[8..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(ContainerError::ChecksumMismatch);
    }
    let header_len = u64::from_le_bytes(body[..8].try_into().unwrap()) as usize;
    if body.len() < 8 + header_len {
        return Err(ContainerError::Truncated("header"));
    }
    let header: Header<M> = serde_json::from_slice(&body[8..8 + header_len])
        .map_err(|e| ContainerError::Header(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(ContainerError::VersionMismatch);
    }
    let region = &body[8 + header_len..];
    let mut out = Vec::with_capacity(header.arrays.len());
    for entry in &header.arrays {
        let count: usize = entry.shape.iter().product();
        let nbytes = count * entry.dtype.byte_width();
        let start = entry.offset as usize;
        if start + nbytes > region.len() {
            return Err(ContainerError::Truncated("array data"));
        }
        out.push(NamedArray {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            data: ArrayData::read_le(entry.dtype, &region[start..start + nbytes]),
        });
    }
    Ok((header.meta, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_arrays() -> Vec<NamedArray> {
        vec![
            NamedArray::new(
                "a/coords",
                vec![2, 3],
                ArrayData::F32(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            ),
            NamedArray::new("a/labels", vec![2], ArrayData::I32(vec![0, 5])),
            NamedArray::new("w", vec![3], ArrayData::F64(vec![0.1, -0.2, 0.3])),
        ]
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let meta = serde_json::json!({"k": 1});
        let arrays = sample_arrays();
        write_container(&path, &CORPUS_MAGIC, &meta, &arrays).unwrap();
        let (meta2, arrays2): (serde_json::Value, _) =
            read_container(&path, &CORPUS_MAGIC).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(arrays.len(), arrays2.len());
        for (a, b) in arrays.iter().zip(&arrays2) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn corrupted_magic_is_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        write_container(&path, &CORPUS_MAGIC, &serde_json::json!({}), &sample_arrays()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[3] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        let err = read_container::<serde_json::Value>(&path, &CORPUS_MAGIC).unwrap_err();
        assert!(matches!(err, ContainerError::VersionMismatch));
    }

    #[test]
    fn wrong_magic_kind_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        write_container(&path, &WEIGHTS_MAGIC, &serde_json::json!({}), &sample_arrays()).unwrap();
        let err = read_container::<serde_json::Value>(&path, &CORPUS_MAGIC).unwrap_err();
        assert!(matches!(err, ContainerError::VersionMismatch));
    }

    #[test]
    fn truncation_mid_array_detected_without_partial_result() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        write_container(&path, &CORPUS_MAGIC, &serde_json::json!({}), &sample_arrays()).unwrap();
        let bytes = fs::read(&path).unwrap();
        // cut into the array region but keep a plausible checksum tail
        let cut = bytes.len() - 12;
        let mut short = bytes[..cut].to_vec();
        let crc = crc32fast::hash(&short[8..]);
        short.extend_from_slice(&crc.to_le_bytes());
        fs::write(&path, short).unwrap();
        let err = read_container::<serde_json::Value>(&path, &CORPUS_MAGIC).unwrap_err();
        assert!(matches!(err, ContainerError::Truncated(_)));
    }

    #[test]
    fn bitflip_in_payload_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        write_container(&path, &CORPUS_MAGIC, &serde_json::json!({}), &sample_arrays()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        let err = read_container::<serde_json::Value>(&path, &CORPUS_MAGIC).unwrap_err();
        assert!(matches!(err, ContainerError::ChecksumMismatch));
    }
}
