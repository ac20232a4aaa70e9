//! Versioned binary container for named tensors plus JSON metadata.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SSTW"                  magic
//! u32                     format version
//! u64 + bytes             metadata (UTF-8 JSON)
//! u32                     tensor count
//! per tensor:
//!   u32 + bytes           name
//!   u8                    role (0 weight, 1 buffer, 2 optimizer state)
//!   u8                    dtype (0 = f32)
//!   u32 + u64 * ndim      shape
//!   f32 * numel           values
//! [u8; 32]                SHA-256 of all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSTW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    Buffer,
    OptimizerState,
}

impl TensorRole {
    fn code(self) -> u8 {
        match self {
            TensorRole::Weight => 0,
            TensorRole::Buffer => 1,
            TensorRole::OptimizerState => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(TensorRole::Weight),
            1 => Some(TensorRole::Buffer),
            2 => Some(TensorRole::OptimizerState),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub role: TensorRole,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.role.code());
            out.push(0);
            let shape = t.tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses a container; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason);
        if bytes.len() < 8 + 32 || &bytes[..4] != MAGIC {
            return Err(bad("not a weight container"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let meta_len = r.u64().ok_or_else(|| bad("truncated metadata length"))? as usize;
        let meta = r.take(meta_len).ok_or_else(|| bad("truncated metadata"))?;
        let metadata: serde_json::Value = serde_json::from_slice(meta).map_err(|e| bad(&format!("metadata: {e}")))?;
        let count = r.u32().ok_or_else(|| bad("truncated tensor count"))?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32().ok_or_else(|| bad("truncated name"))? as usize;
            let name = r.take(name_len).ok_or_else(|| bad("truncated name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| bad("non UTF-8 tensor name"))?;
            let role = r.u8().and_then(TensorRole::from_code).ok_or_else(|| bad("bad tensor role"))?;
            if r.u8() != Some(0) {
                return Err(bad("unsupported dtype"));
            }
            let ndim = r.u32().ok_or_else(|| bad("truncated shape"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64().ok_or_else(|| bad("truncated shape"))? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4).ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(NamedTensor { name, role, tensor: Tensor::from_vec(&shape, data)? });
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Container { metadata, tensors })
    }

    /// Writes through a temporary file and renames, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            metadata: serde_json::json!({"variant": "Stereo-FA-MV", "step": 3}),
            tensors: vec![
                NamedTensor {
                    name: "a.weight".into(),
                    role: TensorRole::Weight,
                    tensor: Tensor::from_vec(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap(),
                },
                NamedTensor { name: "a.bn.running_var".into(), role: TensorRole::Buffer, tensor: Tensor::full(&[3], 1.0) },
            ],
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensors[0].tensor.data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn version_and_corruption() {
        let mut bytes = sample().to_bytes();
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(matches!(Container::from_bytes(&wrong, Path::new("x")), Err(Error::Version { found: 9, .. })));
        let n = bytes.len();
        bytes[n / 2] ^= 0xFF;
        assert!(matches!(Container::from_bytes(&bytes, Path::new("x")), Err(Error::Format { .. })));
        assert!(Container::from_bytes(b"SSTW", Path::new("x")).is_err());
    }
}
