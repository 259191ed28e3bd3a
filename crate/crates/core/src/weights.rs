//! Per-layer binary tensor files and the weight directory that groups them.
//!
//! Tensor file: 8-byte magic, `u32` name length, UTF-8 name, `u32` rank,
//! `rank` x `u32` dims, then row-major values, all little-endian. The
//! `SCARWGT1` magic carries `f32` values; `SCARWGD1` carries `f64` values so
//! double-precision models round-trip bit-exactly. A directory holds one
//! `<name>.bin` per tensor plus `manifest.txt` listing tensor names in order.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const TENSOR_MAGIC_F32: &[u8; 8] = b"SCARWGT1";
pub const TENSOR_MAGIC_F64: &[u8; 8] = b"SCARWGD1";
pub const WEIGHT_MANIFEST: &str = "manifest.txt";

/// A named tensor held in `f64` regardless of its on-disk precision.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_scalars<T: Scalar>(name: impl Into<String>, dims: Vec<usize>, data: &[T]) -> Self {
        NamedTensor {
            name: name.into(),
            dims,
            data: data.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn to_scalars<T: Scalar>(&self) -> Vec<T> {
        self.data.iter().map(|&v| T::lit(v)).collect()
    }

    pub fn encode(&self, double: bool) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(if double { TENSOR_MAGIC_F64 } else { TENSOR_MAGIC_F32 });
        out.extend_from_slice(&(self.name.len() as u32).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            if double {
                out.extend_from_slice(&v.to_le_bytes());
            } else {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8).ok_or_else(|| corrupt("missing tensor header"))?;
        let double = match magic {
            m if m == TENSOR_MAGIC_F32 => false,
            m if m == TENSOR_MAGIC_F64 => true,
            _ => return Err(corrupt("bad tensor magic (expected SCARWGT1)")),
        };
        let name_len = cur.u32().ok_or_else(|| corrupt("truncated name length"))? as usize;
        let name = cur.take(name_len).ok_or_else(|| corrupt("truncated name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| corrupt("name is not UTF-8"))?;
        let rank = cur.u32().ok_or_else(|| corrupt("truncated rank"))? as usize;
        let dims = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| corrupt("truncated dims"))?;
        let count: usize = dims.iter().product();
        let width = if double { 8 } else { 4 };
        let payload = cur.take(count * width).ok_or_else(|| corrupt("truncated tensor data"))?;
        if cur.pos != bytes.len() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        let data = if double {
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        } else {
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        };
        Ok(NamedTensor { name, dims, data })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    tensors: Vec<NamedTensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: NamedTensor) {
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>, double: bool) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for t in &self.tensors {
            let path = tensor_path(dir, &t.name);
            fs::write(&path, t.encode(double)).map_err(|e| Error::io(&path, e))?;
            manifest.push_str(&t.name);
            manifest.push('\n');
        }
        let path = dir.join(WEIGHT_MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(WEIGHT_MANIFEST);
        let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut store = WeightStore::new();
        for name in manifest.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let path = tensor_path(dir, name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let tensor = NamedTensor::decode(&bytes, &path)?;
            if tensor.name != name {
                return Err(Error::Corrupt {
                    path,
                    reason: format!("header names tensor {:?}, manifest expects {name:?}", tensor.name),
                });
            }
            store.push(tensor);
        }
        Ok(store)
    }
}

fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.bin"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = NamedTensor {
            name: "ab".into(),
            dims: vec![1, 2],
            data: vec![0.5, -1.0],
        };
        let b = t.encode(false);
        assert_eq!(&b[..8], b"SCARWGT1");
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..14], b"ab");
        assert_eq!(&b[14..18], &2u32.to_le_bytes());
        assert_eq!(b.len(), 14 + 4 + 8 + 8);
        assert_eq!(NamedTensor::decode(&b, Path::new("t")).unwrap(), t);
    }

    #[test]
    fn double_payload_is_lossless() {
        let t = NamedTensor {
            name: "x".into(),
            dims: vec![3],
            data: vec![0.1, 1.0 / 3.0, -7e-300],
        };
        assert_eq!(NamedTensor::decode(&t.encode(true), Path::new("t")).unwrap(), t);
    }

    #[test]
    fn truncation_is_detected() {
        let b = NamedTensor {
            name: "x".into(),
            dims: vec![4],
            data: vec![1.0; 4],
        }
        .encode(false);
        for cut in [3, 10, b.len() - 1] {
            assert!(NamedTensor::decode(&b[..cut], Path::new("t")).is_err());
        }
    }
}
