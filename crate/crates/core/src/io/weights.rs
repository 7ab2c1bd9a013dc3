//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "BNWT"
//! version  u32      1
//! count    u32      number of tensors
//! count times:
//!   name_len u32, name (UTF-8), ndim u32, ndim x u64 dims,
//!   product(dims) x f64 values
//! ```
//!
//! Entries are written in name order, so equal parameter sets give equal
//! files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BNWT";
pub const VERSION: u32 = 1;

pub fn encode_weights(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
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
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic, not a weight file");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported version {version}"));
    }
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let start = r.pos;
        let name = match std::str::from_utf8(r.take(len, "name")?) {
            Ok(s) => s.to_string(),
            Err(_) => {
                r.pos = start;
                return r.fail("name is not UTF-8");
            }
        };
        if params.contains(&name) {
            r.pos = start;
            return r.fail(format!("duplicate tensor `{name}`"));
        }
        let ndim = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            dims.push(r.u64("dimension")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()));
        let Some(numel) = numel else {
            return r.fail(format!("tensor `{name}` is larger than the file"));
        };
        let raw = r.take(numel * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(&dims, data)?);
    }
    if r.pos != bytes.len() {
        return r.fail("trailing bytes after last tensor");
    }
    Ok(params)
}

pub fn save_weights(path: &Path, params: &ParamSet) -> Result<()> {
    fs::write(path, encode_weights(params))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ParamSet> {
    decode_weights(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::new(&[2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300]).unwrap());
        p.insert("a", Tensor::scalar(f64::NAN));
        p
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let bytes = encode_weights(&sample());
        let back = decode_weights(&bytes).unwrap();
        assert_eq!(encode_weights(&back), bytes);
        assert_eq!(back.get("b").unwrap().shape(), &[2, 2]);
        assert!(back.get("b").unwrap().data()[1].is_sign_negative());
    }

    #[test]
    fn corruption_reports_offsets() {
        let bytes = encode_weights(&sample());
        let mut bad = bytes.clone();
        bad[4] = 2;
        match decode_weights(&bad) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 4);
                assert!(message.contains("version 2"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_weights(b"PNG\0"), Err(Error::Format { offset: 0, .. })));
        match decode_weights(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { message, .. }) => assert!(message.contains("truncated")),
            other => panic!("{other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_weights(&long).is_err());
    }
}
