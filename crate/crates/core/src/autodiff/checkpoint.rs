//! Binary checkpoints: an 8-byte magic, a little-endian `u64` manifest
//! length, the JSON manifest, then little-endian `f32` blobs for every
//! parameter followed by the first and second Adam moments, all in manifest
//! order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FdaError, Result};

use super::params::ParamStore;
use super::tensor::Tensor5;

pub const MAGIC: &[u8; 8] = b"FDACKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub params: Vec<ParamEntry>,
    pub step: u64,
    pub epoch: u64,
    /// Free-form description of the model that owns the parameters.
    #[serde(default)]
    pub model: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore<f32>,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(
        params: ParamStore<f32>,
        m: ParamStore<f32>,
        v: ParamStore<f32>,
        step: u64,
        epoch: u64,
        model: serde_json::Value,
    ) -> Result<Self> {
        let entries: Vec<ParamEntry> =
            params.iter().map(|(n, t)| ParamEntry { name: n.to_string(), shape: t.shape() }).collect();
        for store in [&m, &v] {
            let same = store.len() == entries.len()
                && store.iter().zip(&entries).all(|((n, t), e)| n == e.name && t.shape() == e.shape);
            if !same {
                return Err(FdaError::Checkpoint("optimizer moments do not match the parameters".into()));
            }
        }
        Ok(Checkpoint { manifest: CheckpointManifest { params: entries, step, epoch, model }, params, m, v })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest).map_err(|e| FdaError::json("checkpoint manifest", e))?;
        let floats = self.params.numel() * 3;
        let mut out = Vec::with_capacity(16 + manifest.len() + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for store in [&self.params, &self.m, &self.v] {
            for (_, t) in store.iter() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| FdaError::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < mlen {
            return Err(bad("truncated manifest"));
        }
        let manifest: CheckpointManifest =
            serde_json::from_slice(&body[..mlen]).map_err(|e| FdaError::json("checkpoint manifest", e))?;
        let mut blob = &body[mlen..];
        let total: usize = manifest.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if blob.len() != total * 3 * 4 {
            return Err(FdaError::Checkpoint(format!(
                "expected {} bytes of tensor data, found {}",
                total * 12,
                blob.len()
            )));
        }
        let mut stores = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut store = ParamStore::new();
            for e in &manifest.params {
                let n: usize = e.shape.iter().product();
                let (head, rest) = blob.split_at(n * 4);
                blob = rest;
                let data =
                    head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                store.insert(e.name.clone(), Tensor5::new(e.shape, data)?)?;
            }
            stores.push(store);
        }
        let v = stores.pop().expect("three stores");
        let m = stores.pop().expect("three stores");
        let params = stores.pop().expect("three stores");
        Ok(Checkpoint { manifest, params, m, v })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| FdaError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FdaError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| FdaError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| FdaError::io(&tmp, e))?;
        f.sync_all().map_err(|e| FdaError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| FdaError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_rejects_garbage() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor5::new([1, 1, 1, 1, 3], vec![1.0, -2.5, 3.25]).unwrap()).unwrap();
        p.insert("b", Tensor5::full([2, 1, 1, 1, 1], 0.5)).unwrap();
        let m = p.zeros_like();
        let mut v = p.zeros_like();
        v.get_mut("b").unwrap().data_mut()[1] = 7.0;
        let ck = Checkpoint::new(p, m, v, 12, 3, serde_json::json!({"k": 1})).unwrap();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense-nonsense").is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.fda");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
