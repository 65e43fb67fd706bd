//! Binary container shared by checkpoints and binary sequence files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes
//! version    u32
//! header_len u64, header (UTF-8 JSON)
//! count      u64
//! count × { name_len u32, name, ndim u32, dims u64 × ndim, values f64 × prod(dims) }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VERSION: u32 = 1;

pub struct Container {
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode(magic: &[u8; 8], header: &str, tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| Error::Format(format!("length {n} too large")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<Container> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != magic {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let hlen = r.len()?;
    let header = r.string(hlen)?;
    let count = r.len()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = r.string(nlen)?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.len()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Format(format!("tensor {name} has implausible shape {shape:?}")))?;
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Container { header, tensors })
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_file(path: &Path, magic: &[u8; 8], header: &str, tensors: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(magic, header, tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path, magic: &[u8; 8]) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTCONT";

    #[test]
    fn round_trip_is_bit_exact() {
        let t = Tensor::new(&[2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.5, 1.0 / 3.0]).unwrap();
        let bytes = encode(MAGIC, "{\"a\":1}", &[("w".into(), t.clone())]);
        let c = decode(MAGIC, &bytes).unwrap();
        assert_eq!(c.header, "{\"a\":1}");
        assert_eq!(c.tensors[0].0, "w");
        let bits: Vec<u64> = c.tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(MAGIC, "", &[("w".into(), Tensor::ones(&[4]))]);
        assert!(decode(b"OTHERMAG", &bytes).is_err());
        assert!(decode(MAGIC, &bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(MAGIC, &extra).is_err());
        let mut bad_version = bytes;
        bad_version[8] = 9;
        assert!(decode(MAGIC, &bad_version).is_err());
    }
}
