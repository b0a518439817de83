use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::networks::ParamStore;
use crate::tensor::Tensor;

/// First line of every container.
pub const MAGIC: &str = "BRIDGETUNE-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

/// One manifest entry. Offsets are relative to the start of the payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    pub metadata: BTreeMap<String, Value>,
}

/// Named f32 tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: ParamStore,
    pub metadata: BTreeMap<String, Value>,
}

impl Checkpoint {
    pub fn new(tensors: ParamStore) -> Self {
        Self {
            tensors,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&Value> {
        self.metadata
            .get(key)
            .ok_or_else(|| Error::CorruptHeader(format!("missing metadata `{key}`")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta(key)?
            .as_str()
            .ok_or_else(|| Error::CorruptHeader(format!("metadata `{key}` is not a string")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta(key)?
            .as_u64()
            .ok_or_else(|| Error::CorruptHeader(format!("metadata `{key}` is not an unsigned integer")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta(key)?
            .as_f64()
            .ok_or_else(|| Error::CorruptHeader(format!("metadata `{key}` is not a number")))
    }

    pub fn meta_as<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        serde_json::from_value(self.meta(key)?.clone())
            .map_err(|e| Error::CorruptHeader(format!("metadata `{key}`: {e}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn header(&self) -> Header {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let length = (t.numel() * 4) as u64;
                let e = TensorEntry {
                    name: name.clone(),
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset,
                    length,
                };
                offset += length;
                e
            })
            .collect();
        Header {
            format_version: FORMAT_VERSION,
            tensors,
            metadata: self.metadata.clone(),
        }
    }

    /// Magic line, header byte count line, pretty JSON header, then the
    /// little-endian payload.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec_pretty(&self.header())?;
        let mut out = format!("{MAGIC}\n{}\n", header.len()).into_bytes();
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = split_header(bytes)?;
        let needed = validate_manifest(&header)?;
        if (payload.len() as u64) < needed {
            return Err(Error::TruncatedPayload {
                expected: needed,
                found: payload.len() as u64,
            });
        }
        if payload.len() as u64 > needed {
            return Err(Error::CorruptHeader(format!(
                "payload has {} bytes but the manifest covers {needed}",
                payload.len()
            )));
        }
        let mut tensors = ParamStore::new();
        for e in &header.tensors {
            let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        Ok(Self {
            tensors,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Reads only the header of a container.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    let (header, _) = split_header(bytes)?;
    validate_manifest(&header)?;
    Ok(header)
}

fn split_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let corrupt = |m: &str| Error::CorruptHeader(m.to_string());
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    if lines.next() != Some(MAGIC.as_bytes()) {
        return Err(corrupt("missing magic line"));
    }
    let len: usize = lines
        .next()
        .and_then(|l| std::str::from_utf8(l).ok())
        .and_then(|l| l.parse().ok())
        .ok_or_else(|| corrupt("missing header length"))?;
    let rest = lines.next().ok_or_else(|| corrupt("missing header"))?;
    if rest.len() < len {
        return Err(corrupt("header shorter than declared"));
    }
    let header: Header =
        serde_json::from_slice(&rest[..len]).map_err(|e| Error::CorruptHeader(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::CorruptHeader(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    Ok((header, &rest[len..]))
}

/// Checks names, dtypes and lengths; returns the payload size the manifest needs.
fn validate_manifest(header: &Header) -> Result<u64> {
    let mut names = BTreeSet::new();
    let mut end = 0u64;
    for e in &header.tensors {
        if !names.insert(e.name.as_str()) {
            return Err(Error::CorruptHeader(format!("duplicate tensor name `{}`", e.name)));
        }
        if e.dtype != "f32" {
            return Err(Error::CorruptHeader(format!("tensor `{}` has unsupported dtype `{}`", e.name, e.dtype)));
        }
        let numel = e.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        if numel.and_then(|n| n.checked_mul(4)) != Some(e.length) {
            return Err(Error::CorruptHeader(format!(
                "tensor `{}` length {} does not match shape {:?}",
                e.name, e.length, e.shape
            )));
        }
        if e.offset < end {
            return Err(Error::OverlappingOffsets(e.name.clone()));
        }
        if e.offset != end {
            return Err(Error::CorruptHeader(format!("gap before tensor `{}`", e.name)));
        }
        end = e.offset + e.length;
    }
    Ok(end)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut t = ParamStore::new();
        t.insert("a".into(), Tensor::new(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap());
        t.insert("b".into(), Tensor::new(vec![3], vec![7.0, 8.0, 9.0]).unwrap());
        Checkpoint::new(t).with_meta("kind", "test")
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        for (k, v) in &c.tensors {
            assert!(v.bit_eq(&back.tensors[k]));
        }
        assert_eq!(back.metadata, c.metadata);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_is_readable_text() {
        let bytes = sample().to_bytes().unwrap();
        let h = read_header(&bytes).unwrap();
        assert_eq!(h.tensors[1].offset, 16);
        assert_eq!(h.tensors[1].length, 12);
        assert!(std::str::from_utf8(&bytes[..bytes.len() - 28]).is_ok());
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::TruncatedPayload { expected: 28, found: 27 }));
    }
}
