//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ICNT" | version u32 | meta_len u32 | meta (UTF-8 key=value lines)
//! count u32 | count x { name_len u16 | name | dtype u8 | rank u8 | dims u64 x rank | data }
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"ICNT";
pub const VERSION: u32 = 1;

/// Ordered `key = value` metadata stored alongside the tensors.
pub type Meta = IndexMap<String, String>;

pub fn meta_to_text(meta: &Meta) -> String {
    meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn meta_from_text(text: &str) -> Result<Meta> {
    let mut meta = Meta::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint { offset: 0, message: format!("meta line without '=': {line:?}") })?;
        meta.insert(k.to_string(), v.to_string());
    }
    Ok(meta)
}

pub fn encode_checkpoint<T: Element>(params: &ParamStore<T>, meta: &Meta) -> Result<Vec<u8>> {
    let meta_text = meta_to_text(meta);
    if meta.keys().any(|k| k.contains('=') || k.contains('\n')) || meta.values().any(|v| v.contains('\n')) {
        return Err(Error::InvalidArgument("checkpoint meta keys/values may not contain '=' or newlines".into()));
    }
    let mut out = Vec::with_capacity(16 + meta_text.len() + params.num_elements() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(meta_text.len()).expect("meta fits u32").to_le_bytes());
    out.extend_from_slice(meta_text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.push(u8::try_from(t.rank()).map_err(|_| Error::InvalidArgument(format!("rank of {name} exceeds 255")))?);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint {
            offset: self.pos as u64,
            message: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn err(&self, at: usize, message: impl Into<String>) -> Error {
        Error::Checkpoint { offset: at as u64, message: message.into() }
    }
}

pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<(ParamStore<T>, Meta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.err(0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(4, format!("unsupported version {version} (expected {VERSION})")));
    }
    let meta_len = r.u32("meta length")? as usize;
    let meta_at = r.pos;
    let meta_text = std::str::from_utf8(r.take(meta_len, "meta")?).map_err(|_| r.err(meta_at, "meta is not UTF-8"))?;
    let meta = meta_from_text(meta_text).map_err(|e| r.err(meta_at, e.to_string()))?;
    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| r.err(at, "tensor name is not UTF-8"))?
            .to_string();
        let tag_at = r.pos;
        let tag = r.u8("dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| r.err(tag_at, format!("unknown dtype tag {tag} for {name}")))?;
        if dtype != T::DTYPE {
            return Err(r.err(tag_at, format!("tensor {name} is {dtype}, expected {}", T::DTYPE)));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            shape.push(usize::try_from(d).map_err(|_| r.err(r.pos - 8, format!("dimension {d} too large")))?);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.err(at, "tensor too large"))?;
        let width = dtype.size_of();
        let raw = r.take(n.checked_mul(width).ok_or_else(|| r.err(at, "tensor too large"))?, &format!("data of {name}"))?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        let t = Tensor::new(shape, data)?;
        params.insert(name, t).map_err(|e| r.err(at, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((params, meta))
}

pub fn save_checkpoint<T: Element>(params: &ParamStore<T>, meta: &Meta, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(ParamStore<T>, Meta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (ParamStore<f32>, Meta) {
        let mut p = ParamStore::new();
        p.insert("a.weight", Tensor::new([2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0, -7.25, 1e-30]).unwrap())
            .unwrap();
        p.insert("b", Tensor::scalar(0.1f32)).unwrap();
        let mut m = Meta::new();
        m.insert("preset".into(), "icnt".into());
        m.insert("data.classes".into(), "A,B".into());
        (p, m)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (p, m) = sample();
        let bytes = encode_checkpoint(&p, &m).unwrap();
        assert_eq!(&bytes[..4], b"ICNT");
        let (q, n) = decode_checkpoint::<f32>(&bytes).unwrap();
        assert!(p.bitwise_eq(&q));
        assert_eq!(m, n);
    }

    #[test]
    fn corruption_is_reported_with_offset() {
        let (p, m) = sample();
        let mut bytes = encode_checkpoint(&p, &m).unwrap();
        bytes[0] = b'X';
        assert!(decode_checkpoint::<f32>(&bytes).unwrap_err().to_string().contains("bad magic"));
        let bytes = encode_checkpoint(&p, &m).unwrap();
        let err = decode_checkpoint::<f32>(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Checkpoint { offset, message } => {
                assert!(offset > 0 && message.contains("truncated"), "{offset} {message}");
            }
            other => panic!("{other}"),
        }
        assert!(decode_checkpoint::<f64>(&bytes).is_err());
    }
}
