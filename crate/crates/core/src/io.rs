//! Flat tensor container: an 8-byte little-endian header length, a JSON
//! header listing every tensor's name, shape and byte offset, then the
//! payload of little-endian `f32` values.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    tensors: Vec<Entry>,
}

/// Named tensors plus free-form metadata. Tensors are kept sorted by name
/// so serialisation is canonical.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Container {
            kind: kind.into(),
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    /// Tensors under `prefix/`, with the prefix stripped.
    pub fn scoped(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    /// Errors unless the container holds the expected kind.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} file, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel() * 4;
        }
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Format("truncated header length".into()))?;
        let hlen = usize::try_from(u64::from_le_bytes(len_bytes))
            .map_err(|_| Error::Format("header length overflow".into()))?;
        let json = bytes
            .get(8..8usize.saturating_add(hlen))
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("header: {e}")))?;
        let payload = &bytes[8 + hlen..];
        let mut tensors = BTreeMap::new();
        let mut expected = 0;
        for e in header.tensors {
            if e.offset != expected {
                return Err(Error::Format(format!("tensor {} at unexpected offset", e.name)));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 4;
            let raw = payload
                .get(e.offset..end)
                .ok_or_else(|| Error::Format(format!("tensor {} runs past the payload", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            expected = end;
            if tensors.insert(e.name.clone(), Tensor::new(e.shape, data)?).is_some() {
                return Err(Error::Format(format!("duplicate tensor {}", e.name)));
            }
        }
        if expected != payload.len() {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Deserialises one metadata field.
pub fn meta_field<T: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::Format(format!("metadata lacks {key}")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("metadata {key}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Container {
        let mut c = Container::new("test", json!({"ratio": 0.1f64 + 0.2, "k": [1, 2]}));
        c.insert("b/w", Tensor::matrix(2, 3, vec![1.0, -0.0, 3.5, f32::MIN_POSITIVE, 1e-30, 7.0]).unwrap());
        c.insert("a", Tensor::vector(vec![0.1, 0.2]));
        c.insert("s", Tensor::scalar(2.5));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.kind, "test");
        for (k, t) in &c.tensors {
            let b = back.get(k).unwrap();
            assert_eq!(b.shape(), t.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(b), bits(t));
        }
        let r: f64 = meta_field(&back.meta, "ratio").unwrap();
        assert_eq!(r.to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn header_offsets_are_contiguous() {
        let bytes = sample().to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        let names: Vec<_> = header.tensors.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["a", "b/w", "s"]);
        assert_eq!(header.tensors[1].offset, 8);
        assert_eq!(header.tensors[2].offset, 32);
        assert_eq!(bytes.len(), 8 + hlen + 36);
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Container::from_bytes(&bytes[..5]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
        assert!(Container::from_bytes(b"\x04\0\0\0\0\0\0\0nope").is_err());
    }

    #[test]
    fn scoped_strips_prefix() {
        let s = sample().scoped("b");
        assert_eq!(s.keys().collect::<Vec<_>>(), ["w"]);
    }
}
