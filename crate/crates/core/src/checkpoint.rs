//! Named-tensor archive used for every checkpoint in the crate.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PSST" | version: u32 | manifest_len: u64 | manifest (UTF-8 JSON) | payload
//! ```
//!
//! The manifest lists each tensor's name, dtype (always `"f32"`), shape and
//! byte offset into the payload; the payload is the concatenation of raw
//! little-endian float32 values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 4] = b"PSST";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        let shape = t.dims().to_vec();
        let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        self.tensors.insert(name.into(), (shape, values));
        Ok(())
    }

    pub fn insert_store(&mut self, store: &ParamStore) -> Result<()> {
        for (name, var) in store.iter() {
            self.insert(name.clone(), var.as_tensor())?;
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str, dtype: DType) -> Result<Tensor> {
        let Some((shape, values)) = self.tensors.get(name) else {
            bail!(Data, "archive has no tensor named {name}");
        };
        Ok(Tensor::from_slice(values, shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Copies every parameter of `store` from the archive. All names must be present.
    pub fn load_into(&self, store: &ParamStore) -> Result<()> {
        for (name, _) in store.iter() {
            let t = self.tensor(name, store.dtype())?;
            store.set(name, &t)?;
        }
        Ok(())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    pub fn merge(&mut self, other: Archive) {
        self.metadata.extend(other.metadata);
        self.tensors.extend(other.tensors);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, (shape, values)) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: shape.clone(),
                offset,
            });
            offset += 4 * values.len() as u64;
        }
        let manifest = Manifest {
            version: VERSION,
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, values) in self.tensors.values() {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            bail!(Data, "not a tensor archive (bad magic)");
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            bail!(Data, "unsupported archive version {version}");
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let Some(json) = bytes.get(16..16 + mlen) else {
            bail!(Data, "truncated archive manifest");
        };
        let manifest: Manifest = serde_json::from_slice(json)?;
        let payload = &bytes[16 + mlen..];
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            if e.dtype != "f32" {
                bail!(Data, "tensor {} has unsupported dtype {}", e.name, e.dtype);
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let Some(raw) = payload.get(start..start + 4 * n) else {
                bail!(Data, "tensor {} runs past the end of the payload", e.name);
            };
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(e.name, (e.shape, values));
        }
        Ok(Self {
            metadata: manifest.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Content hash of the serialized archive.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(values in proptest::collection::vec(-1e6f32..1e6, 1..40), rows in 1usize..4) {
            let cols = values.len();
            let data: Vec<f32> = (0..rows).flat_map(|_| values.clone()).collect();
            let t = Tensor::from_vec(data, (rows, cols), &Device::Cpu).unwrap();
            let mut a = Archive::new();
            a.metadata.insert("k".into(), "v".into());
            a.insert("x.weight", &t).unwrap();
            a.insert("a", &t.sum_all().unwrap()).unwrap();
            let b = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn manifest_is_json_text() {
        let mut a = Archive::new();
        a.insert("t", &Tensor::new(&[1f32, 2.0], &Device::Cpu).unwrap()).unwrap();
        let bytes = a.to_bytes().unwrap();
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let m: serde_json::Value = serde_json::from_slice(&bytes[16..16 + mlen]).unwrap();
        assert_eq!(m["tensors"][0]["name"], "t");
        assert_eq!(m["tensors"][0]["dtype"], "f32");
        assert_eq!(m["tensors"][0]["shape"], serde_json::json!([2]));
        assert_eq!(&bytes[16 + mlen..], &[0, 0, 128, 63, 0, 0, 0, 64]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Archive::from_bytes(b"nope"), Err(Error::Data(_))));
        assert!(matches!(Archive::load("/nonexistent/x.ckpt"), Err(Error::MissingArtifact(_))));
    }
}
