//! Versioned tensor container for model weights. Its framing (magic,
//! version, JSON header, SHA-256 trailer) is shared with the index and
//! reference database files.
//!
//! Byte layout, all integers little-endian:
//!
//! | offset      | size | content                                   |
//! |-------------|------|-------------------------------------------|
//! | 0           | 8    | magic `ASIDTNSR`                          |
//! | 8           | 4    | format version (`u32`, currently 1)       |
//! | 12          | 4    | reserved, zero                            |
//! | 16          | 8    | header length `H` (`u64`)                 |
//! | 24          | H    | UTF-8 JSON header                         |
//! | 24 + H      | ...  | tensor data blocks, back to back          |
//! | len - 32    | 32   | SHA-256 of every preceding byte           |
//!
//! The header is `{"kind", "metadata", "tensors": [{"name", "shape",
//! "dtype", "offset", "nbytes"}]}`. `shape` is `[rows, cols]`, `dtype` is
//! `"f32"` or `"f64"`, `offset` counts from the start of the data section,
//! and every block is row-major.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ASIDTNSR";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 24;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: Dtype,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    metadata: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

/// In-memory form of a container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, metadata: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Array2<f64>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Result<Array2<f64>> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        Ok(self.tensors.remove(i).1)
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let mut infos = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let nbytes = (t.len() * dtype.width()) as u64;
            infos.push(TensorInfo {
                name: name.clone(),
                shape: [t.nrows(), t.ncols()],
                dtype,
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            tensors: infos,
        })
        .expect("header serialises");

        let mut body = Vec::with_capacity(offset as usize);
        for (_, t) in &self.tensors {
            for &v in t.iter() {
                match dtype {
                    Dtype::F32 => body.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => body.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        seal(MAGIC, &header, &body)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, data) = open(bytes, MAGIC)?;
        let header: Header = serde_json::from_slice(header)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in header.tensors {
            let [r, c] = info.shape;
            let w = info.dtype.width();
            let start = info.offset as usize;
            let end = start + r * c * w;
            if info.nbytes as usize != r * c * w || end > data.len() {
                return Err(Error::Format(format!("tensor {} out of bounds", info.name)));
            }
            let block = &data[start..end];
            let values: Vec<f64> = match info.dtype {
                Dtype::F32 => block
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::F64 => block
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            };
            let t = Array2::from_shape_vec((r, c), values)
                .map_err(|e| Error::Format(e.to_string()))?;
            tensors.push((info.name, t));
        }
        Ok(Self {
            kind: header.kind,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        std::fs::write(path, self.to_bytes(dtype))?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a {kind} file, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Wraps a JSON header and a data section in the shared file framing:
/// magic, version, reserved word, header length, header, data, SHA-256.
pub(crate) fn seal(magic: &[u8; 8], header: &[u8], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + data.len() + DIGEST_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(data);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Verifies magic, checksum and version; returns `(header, data)`.
pub(crate) fn open<'a>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    if bytes.len() < PREFIX_LEN + DIGEST_LEN {
        return Err(Error::Checksum);
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(body[16..24].try_into().expect("8 bytes")) as usize;
    let header_end = PREFIX_LEN
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Format("header runs past end of file".into()))?;
    Ok((&body[PREFIX_LEN..header_end], &body[header_end..]))
}

/// Hex SHA-256 over a config string and tensor values (as `f64` bits).
pub fn hash_tensors<'a>(config: &str, tensors: impl Iterator<Item = &'a Array2<f64>>) -> String {
    let mut h = Sha256::new();
    h.update(config.as_bytes());
    for t in tensors {
        h.update((t.nrows() as u64).to_le_bytes());
        h.update((t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub fn hash_str(s: &str) -> String {
    hex(&Sha256::digest(s.as_bytes()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> Container {
        let mut c = Container::new("weights", serde_json::json!({"a": 1}));
        c.push("x", array![[1.0, 2.5], [3.0, -4.0]]);
        c.push("y", array![[0.125]]);
        c
    }

    #[test]
    fn round_trip_both_dtypes() {
        for dtype in [Dtype::F32, Dtype::F64] {
            let c = sample();
            assert_eq!(Container::from_bytes(&c.to_bytes(dtype)).unwrap(), c);
        }
    }

    #[test]
    fn layout_prefix_is_fixed() {
        let bytes = sample().to_bytes(Dtype::F32);
        assert_eq!(&bytes[..8], b"ASIDTNSR");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let hlen = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        // header + 5 f32 values + digest
        assert_eq!(bytes.len(), 24 + hlen + 5 * 4 + 32);
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let mut bytes = sample().to_bytes(Dtype::F32);
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Checksum)));
        let bytes = sample().to_bytes(Dtype::F32);
        assert!(matches!(
            Container::from_bytes(&bytes[..bytes.len() - 7]),
            Err(Error::Checksum)
        ));
    }

    #[test]
    fn other_versions_are_rejected() {
        let mut bytes = sample().to_bytes(Dtype::F32);
        bytes[8] = 9;
        let n = bytes.len();
        let digest = Sha256::digest(&bytes[..n - 32]);
        bytes[n - 32..].copy_from_slice(&digest);
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(Error::Version { found: 9, .. })
        ));
    }
}
