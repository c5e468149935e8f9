//! Self-describing tensor container shared by model checkpoints, LoRA deltas
//! and the corpus image store.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "PAIATNSR"
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON, must carry "format_version" and "kind"
//! count        u32
//! count × { name_len u32, name UTF-8, rank u32, dims u64 × rank, values f64 × Π dims }
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 8] = b"PAIATNSR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.rows(), m.cols()],
            values: m.data().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims.as_slice() {
            [r, c] => Matrix::from_vec(*r, *c, self.values.clone()),
            [n] => Matrix::from_vec(1, *n, self.values.clone()),
            _ => Err(Error::Format(format!(
                "tensor {} has rank {}, expected 1 or 2",
                self.name,
                self.dims.len()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    header: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    /// `header` must serialize to a JSON object; `kind` and the format
    /// version are stamped into it.
    pub fn new(kind: &str, header: &impl Serialize) -> Result<Self> {
        let value = serde_json::to_value(header)
            .map_err(|e| Error::Format(format!("header serialization: {e}")))?;
        let serde_json::Value::Object(mut map) = value else {
            return Err(Error::Format("container header must be an object".into()));
        };
        map.insert("kind".into(), kind.into());
        map.insert("format_version".into(), FORMAT_VERSION.into());
        Ok(Self {
            header: map,
            tensors: Vec::new(),
        })
    }

    pub fn push(&mut self, tensor: NamedTensor) {
        self.tensors.push(tensor);
    }

    pub fn kind(&self) -> Option<&str> {
        self.header.get("kind").and_then(|v| v.as_str())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Format(format!(
                "expected a {kind} container, found {:?}",
                other
            ))),
        }
    }

    pub fn header<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(serde_json::Value::Object(self.header.clone()))
            .map_err(|e| Error::Format(format!("bad header: {e}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("json map always serializes");
        let payload: usize = self
            .tensors
            .iter()
            .map(|t| 8 + t.name.len() + 8 * t.dims.len() + 8 * t.values.len())
            .sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let header_len = r.u32()? as usize;
        let header_bytes = r.take(header_len)?;
        let header: serde_json::Value = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Format(format!("corrupted header: {e}")))?;
        let serde_json::Value::Object(header) = header else {
            return Err(Error::Format("header is not an object".into()));
        };
        let version = header.get("format_version").and_then(|v| v.as_u64());
        if version != Some(FORMAT_VERSION as u64) {
            return Err(Error::Format(format!(
                "unsupported format version {:?}, expected {FORMAT_VERSION}",
                version
            )));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("tensor {name} has rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("overflow".into()))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(NamedTensor { name, dims, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
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
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated file".into()))?;
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Hdr {
        width: usize,
        note: String,
    }

    fn sample() -> Container {
        let mut c = Container::new(
            "test",
            &Hdr {
                width: 3,
                note: "x".into(),
            },
        )
        .unwrap();
        c.push(NamedTensor {
            name: "a".into(),
            dims: vec![2, 2],
            values: vec![1.0, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0],
        });
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), c.to_bytes());
        let h: Hdr = back.header().unwrap();
        assert_eq!(h.width, 3);
        assert_eq!(back.kind(), Some("test"));
        let t = back.tensor("a").unwrap();
        assert_eq!(t.values[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncation_and_corruption_are_format_errors() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 12, bytes.len() - 1] {
            assert!(matches!(
                Container::from_bytes(&bytes[..cut]),
                Err(Error::Format(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[13] = b'{';
        bad[14] = b'{';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Container::from_bytes(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = sample().to_bytes();
        let needle = b"\"format_version\":1";
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        bytes[at + needle.len() - 1] = b'9';
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
