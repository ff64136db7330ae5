//! Binary tensor container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        4 bytes  "HSGT"
//! version      u32      currently 1
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON (free-form object)
//! count        u32      number of tensors
//! per tensor:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   dtype      u8       1 = f64
//!   ndim       u32
//!   dims       ndim × u64
//!   payload    product(dims) × f64, row-major
//! checksum     32 bytes SHA-256 of every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"HSGT";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(header: serde_json::Value) -> Self {
        Container { header, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(|_| Error::invalid("too many tensors"))?.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(Error::Corrupt("container is truncated".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if body[..4] != MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        let mut r = Reader { buf: &body[4..] };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported container version {version}")));
        }
        let header_len = r.len_u64()?;
        let header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Corrupt(format!("unknown dtype tag {dtype}")));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.len_u64()?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.buf.len()))
                .ok_or_else(|| Error::Corrupt(format!("tensor {name:?} overruns the payload")))?;
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("tensor {name:?}: {e}")))?;
            tensors.push((name, t));
        }
        if !r.buf.is_empty() {
            return Err(Error::Corrupt("trailing bytes after last tensor".into()));
        }
        Ok(Container { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() {
            return Err(Error::Corrupt("container is truncated".into()));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Corrupt("length does not fit in memory".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(serde_json::json!({"kind": "test"}));
        c.push("a", Tensor::new(vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 0.1]).unwrap());
        c.push("b", Tensor::scalar(3.0));
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Container::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back.header, c.header);
        for ((na, ta), (nb, tb)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn every_truncation_is_corrupt() {
        let bytes = sample().encode().unwrap();
        for n in 0..bytes.len() {
            assert!(matches!(Container::decode(&bytes[..n]), Err(Error::Corrupt(_))), "length {n}");
        }
    }

    #[test]
    fn bit_flips_are_caught() {
        let bytes = sample().encode().unwrap();
        for i in (0..bytes.len()).step_by(7) {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(matches!(Container::decode(&b), Err(Error::Corrupt(_))), "byte {i}");
        }
    }
}
