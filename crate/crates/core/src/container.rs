//! Binary container of named float64 arrays with a JSON metadata header.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MMFLARR1" | u64 header_len | header JSON | f64 data of every array, in header order
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a write/read cycle is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MMFLARR1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ArrayInfo>,
}

/// In-memory form of a container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub arrays: Vec<(ArrayInfo, Tensor)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tags: Vec<String>, tensor: Tensor) {
        let info = ArrayInfo {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            tags,
        };
        self.arrays.push((info, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays
            .iter()
            .find(|(i, _)| i.name == name)
            .map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            meta: self.meta.clone(),
            arrays: self.arrays.iter().map(|(i, _)| i.clone()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let total: usize = self.arrays.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing container magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file")))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let mut cursor = 16 + hlen;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for info in header.arrays {
            let n: usize = info.shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + 8 * n)
                .ok_or_else(|| bad(format!("array {:?} truncated", info.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor += 8 * n;
            let tensor = Tensor::new(info.shape.clone(), data).map_err(|e| bad(e.to_string()))?;
            arrays.push((info, tensor));
        }
        if cursor != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - cursor)));
        }
        Ok(Container {
            meta: header.meta,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(values in prop::collection::vec(any::<f64>(), 1..64)) {
            let mut c = Container::new(serde_json::json!({"k": 1}));
            let n = values.len();
            c.push("a", vec!["x".into()], Tensor::new(vec![n], values.clone()).unwrap());
            c.push("b", vec![], Tensor::scalar(-0.0));
            let back = Container::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
            let got: Vec<u64> = back.get("a").unwrap().data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(back.get("b").unwrap().data()[0].to_bits(), (-0.0f64).to_bits());
            prop_assert_eq!(back.meta, c.meta);
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let p = Path::new("mem");
        assert!(Container::from_bytes(b"nope", p).is_err());
        let mut c = Container::new(serde_json::Value::Null);
        c.push("a", vec![], Tensor::zeros(&[4]));
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
    }
}
