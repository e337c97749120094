//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | field            | bytes                                   |
//! |------------------|-----------------------------------------|
//! | magic            | `FASTATCK`                              |
//! | version          | u32, currently 1                        |
//! | dtype            | u32 length + `f32` or `f64`             |
//! | architecture     | u32 length + JSON                       |
//! | array count      | u32                                     |
//! | per array        | u32 name length + name, u32 rank, u64 per dimension, raw little-endian values |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Architecture, Model, ParamSet};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"FASTATCK";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, T::NAME);
    put_str(&mut out, &serde_json::to_string(model.architecture())?);
    put_u32(&mut out, model.params().len());
    for (name, t) in model.params().iter() {
        put_str(&mut out, name);
        put_u32(&mut out, t.ndim());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes_vec());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated in {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in memory")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

/// Decodes a checkpoint stored with element type `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let dtype = r.string("dtype")?;
    if dtype != T::NAME {
        return Err(Error::Format(format!("checkpoint holds {dtype}, requested {}", T::NAME)));
    }
    let arch: Architecture = serde_json::from_str(&r.string("architecture")?)?;
    let count = r.u32("array count")?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string("array name")?;
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u64("dimension")).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(T::BYTES))
            .ok_or_else(|| Error::Format(format!("array {name} is too large")))?;
        let data = r.take(n, "array data")?.chunks_exact(T::BYTES).map(T::from_le_slice).collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Model::from_parts(arch, ParamSet::new(entries)?)
}

/// Element type recorded in a checkpoint header.
pub fn peek_dtype(bytes: &[u8]) -> Result<String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    r.u32("version")?;
    r.string("dtype")
}

pub fn save<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<Model<T>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_small_cnn;

    #[test]
    fn round_trip_is_bitwise() {
        let m = build_small_cnn::<f32>(&[4, 8], [3, 8, 8], 10, 3).unwrap();
        let bytes = encode(&m).unwrap();
        let back: Model<f32> = decode(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.architecture(), m.architecture());
        assert_eq!(encode(&back).unwrap(), bytes);
        assert_eq!(peek_dtype(&bytes).unwrap(), "f32");
    }

    #[test]
    fn rejects_corruption() {
        let m = build_small_cnn::<f64>(&[2], [1, 4, 4], 3, 0).unwrap();
        let bytes = encode(&m).unwrap();
        assert!(decode::<f32>(&bytes).is_err());
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode::<f64>(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f64>(&bad).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(decode::<f64>(&v2).is_err());
    }
}
