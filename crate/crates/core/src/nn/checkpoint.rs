//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `SARCCKPT`, little-endian `u32` format version,
//! little-endian `u64` header length, UTF-8 JSON header, then every tensor
//! as little-endian `f32` in header order.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::param::{Module, Param};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SARCCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    crate_version: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Parameters and buffers of a model plus caller-defined JSON metadata
/// (configuration, seed, training summary).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    data: Vec<f32>,
}

impl Checkpoint {
    /// All stored values, in header order.
    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn capture(meta: serde_json::Value, model: &mut dyn Module<f32>) -> Self {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        model.visit(&mut |p: &mut Param<f32>| {
            tensors.push(TensorEntry { name: p.name.clone(), shape: p.shape.clone(), offset: data.len() });
            data.extend_from_slice(&p.value);
        });
        Checkpoint { meta, tensors, data }
    }

    /// Copies stored values into `model`. Every model tensor must be present
    /// with the same shape.
    pub fn restore(&self, model: &mut dyn Module<f32>) -> Result<()> {
        let index: HashMap<&str, &TensorEntry> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut problem = None;
        model.visit(&mut |p: &mut Param<f32>| {
            if problem.is_some() {
                return;
            }
            match index.get(p.name.as_str()) {
                None => problem = Some(format!("tensor {} missing from checkpoint", p.name)),
                Some(e) if e.shape != p.shape => {
                    problem = Some(format!("tensor {}: checkpoint shape {:?}, model shape {:?}", p.name, e.shape, p.shape))
                }
                Some(e) => {
                    let n = p.len();
                    p.value.copy_from_slice(&self.data[e.offset..e.offset + n])
                }
            }
        });
        match problem {
            Some(msg) => Err(Error::Checkpoint(msg)),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            meta: self.meta.clone(),
            tensors: self.tensors.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[20 + hlen..];
        if payload.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let data: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        for t in &header.tensors {
            let len: usize = t.shape.iter().product();
            if t.offset + len > data.len() {
                return Err(Error::Checkpoint(format!("tensor {} extends past the payload", t.name)));
            }
        }
        Ok(Checkpoint { meta: header.meta, tensors: header.tensors, data })
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Two(Param<f32>, Param<f32>);

    impl Module<f32> for Two {
        fn visit(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
            f(&mut self.0);
            f(&mut self.1);
        }
    }

    fn model(a: f32) -> Two {
        Two(Param::new("a", &[2], vec![a, a + 1.0]), Param::buffer("b", &[1, 3], vec![a; 3]))
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = model(1.5);
        let ck = Checkpoint::capture(serde_json::json!({"seed": 1}), &mut m);
        ck.save(&path).unwrap();
        assert!(!path.with_extension("tmp").exists());
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.meta["seed"], 1);
        let mut other = model(0.0);
        loaded.restore(&mut other).unwrap();
        assert_eq!(other.0.value, vec![1.5, 2.5]);
        assert_eq!(other.1.value, vec![1.5; 3]);
    }

    #[test]
    fn rejects_garbage_and_shape_mismatch() {
        assert!(matches!(Checkpoint::from_bytes(b"hello world, not a checkpoint"), Err(Error::Checkpoint(_))));
        let mut m = model(1.0);
        let ck = Checkpoint::capture(serde_json::Value::Null, &mut m);
        let mut wrong = Two(Param::new("a", &[3], vec![0.0; 3]), Param::new("b", &[1, 3], vec![0.0; 3]));
        assert!(matches!(ck.restore(&mut wrong), Err(Error::Checkpoint(_))));
        let mut bytes = ck.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
