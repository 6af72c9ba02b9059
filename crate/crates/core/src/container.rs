//! Named-tensor container files.
//!
//! Layout, all integers 4-byte little-endian unsigned:
//!
//! ```text
//! "TSTE" | version | record count |
//!   per record: name length | UTF-8 name | rank | dims... | f32 LE payload
//! ```
//!
//! Records keep their insertion order, so writing the same records twice
//! produces identical bytes.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{at, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TSTE";
pub const VERSION: u32 = 1;

/// An ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    records: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record, replacing any existing record with the same name.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.records.iter_mut().find(|(n, _)| *n == name) {
            Some((_, v)) => *v = value,
            None => self.records.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Lookup(format!("missing record `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(n, _)| n.as_str())
    }

    pub fn records(&self) -> &[(String, Tensor)] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Copies every record whose name starts with `prefix`.
    pub fn extend_prefixed(&mut self, other: &Container, prefix: &str) {
        for (n, t) in &other.records {
            if n.starts_with(prefix) {
                self.insert(n.clone(), t.clone());
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a TSTE container".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Format(format!("record name: {e}")))?
                .to_owned();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| {
                Error::Format(format!("record `{name}` is too large"))
            })?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(dims, data)
                .map_err(|e| Error::Format(format!("record `{name}`: {e}")))?;
            records.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_bytes()).map_err(at(path.as_ref()))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path.as_ref()).map_err(at(path.as_ref()))?)
    }

    /// SHA-256 over the serialized bytes of the records whose names start
    /// with `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut sub = Container::new();
        sub.extend_prefixed(self, prefix);
        let digest = Sha256::digest(sub.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
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
            .ok_or_else(|| Error::Format("unexpected end of container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Encodes UTF-8 text as a vector of byte values, one per `f32`.
pub fn text_record(text: &str) -> Tensor {
    let bytes: Vec<f32> = text.bytes().map(f32::from).collect();
    if bytes.is_empty() {
        return Tensor::new(vec![1], vec![-1.0]).unwrap();
    }
    Tensor::vector(bytes)
}

pub fn record_text(t: &Tensor) -> Result<String> {
    if t.data() == [-1.0] {
        return Ok(String::new());
    }
    let bytes = t
        .data()
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::Format(format!("{v} is not a byte value")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let mut c = Container::new();
        c.insert("ab", Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
        let bytes = c.to_bytes();
        let mut expected = b"TSTE".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(Container::from_bytes(b"NOPE").is_err());
        let mut c = Container::new();
        c.insert("x", Tensor::scalar(1.0));
        let mut bytes = c.to_bytes();
        bytes.pop();
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = c.to_bytes();
        bytes.push(0);
        assert!(Container::from_bytes(&bytes).is_err());
    }

    #[test]
    fn text_records_round_trip() {
        for s in ["", "task = classify\nseed = 3", "ünïcode"] {
            assert_eq!(record_text(&text_record(s)).unwrap(), s);
        }
    }
}
