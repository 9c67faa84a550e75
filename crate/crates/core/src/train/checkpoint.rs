//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MWPCKPT\0"  u32 version  u64 header_len  header (UTF-8 `key = value` lines)
//! u32 section_count
//! per section: u32 name_len, name, u32 dtype_len, "f64", u32 ndim,
//!              ndim × u64 extents, product(extents) × f64 payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MWPCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Ordered `key = value` pairs.
    pub header: Vec<(String, String)>,
    pub sections: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.header_value(key)
            .ok_or_else(|| Error::Contract(format!("checkpoint header lacks `{key}`")))
    }

    pub fn section(&self, name: &str) -> Option<&Tensor> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Sections under `prefix/`, with the prefix stripped.
    pub fn sections_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.sections
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).and_then(|r| r.strip_prefix('/')).map(|r| (r, t)))
    }

    pub fn header_text(&self) -> String {
        self.header.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = self.header_text();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, t) in &self.sections {
            for s in [name.as_str(), "f64"] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::IoOther("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::IoOther(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::IoOther("checkpoint header is not UTF-8".into()))?;
        let mut header = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::IoOther(format!("malformed checkpoint header line `{line}`")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.string()?;
            if dtype != "f64" {
                return Err(Error::IoOther(format!("section `{name}` has unsupported dtype `{dtype}`")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::IoOther("section too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            sections.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::IoOther("trailing bytes after checkpoint sections".into()));
        }
        Ok(Self { header, sections })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::IoOther("truncated checkpoint".into()))?;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::IoOther("section name is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            header: vec![("state.epoch".into(), "3".into()), ("model.fusion.mode".into(), "\"mutual\"".into())],
            sections: vec![
                ("param/head.l1.w".into(), Tensor::new(vec![2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
                ("adam_t/head.l1.w".into(), Tensor::scalar(7.0)),
            ],
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.header, c.header);
        for ((n1, t1), (n2, t2)) in back.sections.iter().zip(&c.sections) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
        assert_eq!(back.require("state.epoch").unwrap(), "3");
        assert_eq!(back.sections_with_prefix("param").count(), 1);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
