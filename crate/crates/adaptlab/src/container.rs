//! Binary container shared by weight, adapter and checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    "APFW"
//! version  u16
//! kind     4 ASCII bytes: WGHT | ADPT | CKPT
//! n_meta   u32, then n_meta × (key: str, value: str)
//! n_tensor u32, then n_tensor × (name: str, rank: u32, dims: rank × u32, data: numel × f32)
//! ```
//!
//! where `str` is a u32 byte length followed by UTF-8. Metadata is written in
//! key order. Nothing may follow the last tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use adaptlab_core::params::ParamStore;
use adaptlab_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"APFW";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Weights,
    Adapter,
    Checkpoint,
}

impl Kind {
    pub fn tag(self) -> &'static [u8; 4] {
        match self {
            Self::Weights => b"WGHT",
            Self::Adapter => b"ADPT",
            Self::Checkpoint => b"CKPT",
        }
    }

    fn from_tag(tag: &[u8]) -> Option<Self> {
        [Self::Weights, Self::Adapter, Self::Checkpoint]
            .into_iter()
            .find(|k| k.tag() == tag)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub meta: BTreeMap<String, String>,
    pub tensors: ParamStore,
}

impl Container {
    pub fn new(kind: Kind) -> Self {
        Self {
            kind,
            meta: BTreeMap::new(),
            tensors: ParamStore::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("container metadata lacks {key:?}")))
    }

    /// Parses a metadata value with `FromStr`.
    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("metadata {key} = {raw:?} does not parse")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(self.kind.tag());
        put_u32(&mut out, self.meta.len());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len());
        for (name, t) in self.tensors.iter() {
            put_str(&mut out, name);
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Exact serialized size, computed without serializing.
    pub fn encoded_len(&self) -> usize {
        let str_len = |s: &str| 4 + s.len();
        let header = MAGIC.len() + 2 + 4 + 4 + 4;
        let meta: usize = self.meta.iter().map(|(k, v)| str_len(k) + str_len(v)).sum();
        let tensors: usize = self
            .tensors
            .iter()
            .map(|(n, t)| str_len(n) + 4 + 4 * t.rank() + 4 * t.numel())
            .sum();
        header + meta + tensors
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            context,
        };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.fail(0, format!("bad magic {magic:?}")));
        }
        let at = r.pos;
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(r.fail(at, format!("unsupported version {version}, expected {VERSION}")));
        }
        let at = r.pos;
        let tag = r.take(4, "kind")?;
        let kind = Kind::from_tag(tag).ok_or_else(|| r.fail(at, format!("unknown kind {tag:?}")))?;
        let mut c = Container::new(kind);
        for _ in 0..r.u32("metadata count")? {
            let key = r.string("metadata key")?;
            let value = r.string("metadata value")?;
            c.meta.insert(key, value);
        }
        for _ in 0..r.u32("tensor count")? {
            let at = r.pos;
            let name = r.string("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("tensor dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0 && rank > 0)
                .ok_or_else(|| r.fail(at, format!("tensor {name} has invalid shape {shape:?}")))?;
            let len = numel
                .checked_mul(4)
                .ok_or_else(|| r.fail(at, format!("tensor {name} is too large")))?;
            let payload = r.take(len, "tensor data")?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| r.fail(at, e.to_string()))?;
            c.tensors
                .insert(name, t)
                .map_err(|e| r.fail(at, e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    /// Reads a container and checks its kind.
    pub fn read(path: &Path, expected: Kind) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let c = Self::from_bytes(&bytes, &path.display().to_string())?;
        if c.kind != expected {
            return Err(Error::Format {
                context: path.display().to_string(),
                offset: 6,
                message: format!(
                    "expected a {} file, found {}",
                    String::from_utf8_lossy(expected.tag()),
                    String::from_utf8_lossy(c.kind.tag())
                ),
            });
        }
        Ok(c)
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("container field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, message: String) -> Error {
        Error::Format {
            context: self.context.to_string(),
            offset: offset as u64,
            message,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.fail(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail(at, format!("{what} is not UTF-8")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(Kind::Adapter);
        c.set("name", "amh");
        c.set("reduction_factor", 16);
        c.tensors
            .insert("a", Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5))
            .unwrap();
        c.tensors.insert("b", Tensor::scalar(f32::MIN_POSITIVE)).unwrap();
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(bytes.len(), c.encoded_len());
        let back = Container::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn every_truncation_is_a_format_error_with_offset() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            match Container::from_bytes(&bytes[..cut], "mem") {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn rejects_bad_header_and_trailing_bytes() {
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(matches!(
            Container::from_bytes(&bytes, "mem"),
            Err(Error::Format { .. })
        ));
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        let err = Container::from_bytes(&bytes, "mem").unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(Container::from_bytes(&bytes, "mem").is_err());
    }
}
