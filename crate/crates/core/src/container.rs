//! Versioned binary container shared by checkpoints, adapter databases and
//! dataset image bundles.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "TOKSPLIT"
//! version      u32
//! meta_len     u64, followed by meta_len bytes of UTF-8 JSON
//! array_count  u32
//! per array:
//!   name_len u32, name bytes (UTF-8)
//!   dtype    u8   (0 = f32, 1 = f64)
//!   ndim     u32, then ndim × u64 dims
//!   data     product(dims) × dtype size bytes
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;
use tokensplit_tensor::{DType, Real, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TOKSPLIT";
pub const FORMAT_VERSION: u32 = 1;

/// Named arrays plus a JSON metadata block.
#[derive(Debug, Clone, PartialEq)]
pub struct Container<T> {
    pub meta: Value,
    pub arrays: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Container<T> {
    pub fn new(meta: Value) -> Self {
        Container {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.arrays.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("container is missing array `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.tag());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a container file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version > FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "container",
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let meta_len = r.u64()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let dtype = DType::from_tag(r.take(1)?[0])
                .ok_or_else(|| Error::Format(format!("array `{name}` has unknown dtype")))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * dtype.size())?;
            let data: Vec<T> = match dtype {
                DType::F32 if T::DTYPE == DType::F32 => raw.chunks(4).map(T::read_le).collect(),
                DType::F64 if T::DTYPE == DType::F64 => raw.chunks(8).map(T::read_le).collect(),
                DType::F32 => raw.chunks(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
                DType::F64 => raw.chunks(8).map(|c| T::lit(f64::read_le(c))).collect(),
            };
            arrays.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Container { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("container is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Container<f64> {
        let mut c = Container::new(json!({"kind": "test", "step": 3}));
        c.push(
            "a",
            Tensor::from_f64(&[2, 2], &[1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
        );
        c.push("b", Tensor::scalar(0.1));
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Container::<f64>::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.meta, c.meta);
        for ((n1, t1), (n2, t2)) in c.arrays.iter().zip(&back.arrays) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
    }

    #[test]
    fn future_version_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        let err = Container::<f64>::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion { found: 2, .. }));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::<f64>::from_bytes(&bad).is_err());
        assert!(Container::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn f64_arrays_load_as_f32() {
        let bytes = sample().to_bytes().unwrap();
        let c = Container::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(c.get("b").unwrap().item(), 0.1f32);
    }
}
