//! Self-describing binary checkpoints.
//!
//! Layout: 8-byte magic `BGDETCKP`, u32 format version, u64 header length,
//! JSON header, then little-endian f32 tensors in header order (every
//! parameter store, then every optimizer state). The header carries a
//! SHA-256 per store and one over the whole body.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use bgdet_tensor::{Optimizer, OptimizerKind, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"BGDETCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreHeader {
    name: String,
    checksum: String,
    params: Vec<ParamHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    name: String,
    kind: OptimizerKind,
    step: u64,
    shapes: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    stage: String,
    dtype: String,
    epochs_done: usize,
    total_epochs: usize,
    config: serde_json::Value,
    meta: BTreeMap<String, String>,
    stores: Vec<StoreHeader>,
    optimizers: Vec<OptimizerHeader>,
    body_sha256: String,
}

/// Saved optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub tensors: Vec<Tensor<f32>>,
}

impl OptimizerState {
    pub fn capture(opt: &Optimizer<f32>) -> Self {
        let (step, tensors) = opt.state();
        Self {
            kind: opt.kind(),
            step,
            tensors,
        }
    }

    /// Rebuilds the optimizer for `store`.
    pub fn restore(&self, store: &ParamStore<f32>) -> Result<Optimizer<f32>> {
        let mut opt = Optimizer::new(self.kind, store);
        opt.load_state(self.step, self.tensors.clone())?;
        Ok(opt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub epochs_done: usize,
    pub total_epochs: usize,
    pub config: serde_json::Value,
    pub meta: BTreeMap<String, String>,
    pub stores: Vec<(String, ParamStore<f32>)>,
    pub optimizers: Vec<(String, OptimizerState)>,
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>, config: serde_json::Value) -> Self {
        Self {
            stage: stage.into(),
            epochs_done: 0,
            total_epochs: 0,
            config,
            meta: BTreeMap::new(),
            stores: Vec::new(),
            optimizers: Vec::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.epochs_done >= self.total_epochs
    }

    pub fn store(&self, name: &str) -> Option<&ParamStore<f32>> {
        self.stores.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn optimizer(&self, name: &str) -> Option<&OptimizerState> {
        self.optimizers.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    /// Copies the named store into `dst`, checking names and shapes.
    pub fn load_into(&self, name: &str, dst: &mut ParamStore<f32>, path: &Path) -> Result<()> {
        let src = self
            .store(name)
            .ok_or_else(|| Error::artifact(path, format!("checkpoint has no parameter set {name:?}")))?;
        dst.load_from(src).map_err(|e| Error::artifact(path, e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        let mut stores = Vec::new();
        for (name, store) in &self.stores {
            let mut params = Vec::new();
            for p in store.iter() {
                params.push(ParamHeader {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                });
                for &v in p.value.data() {
                    v.write_le(&mut body);
                }
            }
            stores.push(StoreHeader {
                name: name.clone(),
                checksum: store.checksum(),
                params,
            });
        }
        let mut optimizers = Vec::new();
        for (name, st) in &self.optimizers {
            for t in &st.tensors {
                for &v in t.data() {
                    v.write_le(&mut body);
                }
            }
            optimizers.push(OptimizerHeader {
                name: name.clone(),
                kind: st.kind,
                step: st.step,
                shapes: st.tensors.iter().map(|t| t.shape().to_vec()).collect(),
            });
        }
        let header = Header {
            stage: self.stage.clone(),
            dtype: f32::DTYPE.to_string(),
            epochs_done: self.epochs_done,
            total_epochs: self.total_epochs,
            config: self.config.clone(),
            meta: self.meta.clone(),
            stores,
            optimizers,
            body_sha256: hex::encode(Sha256::digest(&body)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: &str| Error::artifact(path, r.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body_start]).map_err(|e| bad(&format!("header: {e}")))?;
        if header.dtype != f32::DTYPE {
            return Err(bad(&format!("unsupported dtype {}", header.dtype)));
        }
        let body = &bytes[body_start..];
        if hex::encode(Sha256::digest(body)) != header.body_sha256 {
            return Err(bad("body checksum mismatch"));
        }
        let mut off = 0usize;
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            let end = off + n * 4;
            if end > body.len() {
                return Err(bad("truncated body"));
            }
            let data = body[off..end].chunks_exact(4).map(f32::read_le).collect();
            off = end;
            Tensor::from_vec(shape, data).map_err(|e| bad(&e.to_string()))
        };
        let mut stores = Vec::new();
        for sh in &header.stores {
            let mut store = ParamStore::new();
            for p in &sh.params {
                store.add(p.name.clone(), take(&p.shape)?);
            }
            if store.checksum() != sh.checksum {
                return Err(bad(&format!("checksum mismatch for parameter set {:?}", sh.name)));
            }
            stores.push((sh.name.clone(), store));
        }
        let mut optimizers = Vec::new();
        for oh in &header.optimizers {
            let tensors = oh.shapes.iter().map(|s| take(s)).collect::<Result<Vec<_>>>()?;
            optimizers.push((
                oh.name.clone(),
                OptimizerState {
                    kind: oh.kind,
                    step: oh.step,
                    tensors,
                },
            ));
        }
        if off != body.len() {
            return Err(bad("trailing bytes after body"));
        }
        Ok(Self {
            stage: header.stage,
            epochs_done: header.epochs_done,
            total_epochs: header.total_epochs,
            config: header.config,
            meta: header.meta,
            stores,
            optimizers,
        })
    }

    /// Writes atomically (temporary file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("bin.tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Prerequisite(format!("checkpoint {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes, path)
    }

    /// Checksum of one store as recorded at save time.
    pub fn store_checksum(&self, name: &str) -> Option<String> {
        self.store(name).map(|s| s.checksum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::from_f64(&[2, 2], &[1.0, -2.0, 3.5, 0.25]).unwrap());
        store.add("a.bias", Tensor::from_f64(&[2], &[0.5, 0.0]).unwrap());
        let mut opt = Optimizer::new(OptimizerKind::adam(0.5), &store);
        let grads = vec![Some(Tensor::full(&[2, 2], 0.1)), None];
        opt.step(&mut store, &grads, 0.01).unwrap();
        let mut c = Checkpoint::new("A_enhancer", serde_json::json!({"seed": 3}));
        c.epochs_done = 1;
        c.total_epochs = 2;
        c.meta.insert("k".into(), "v".into());
        c.stores.push(("net".into(), store.clone()));
        c.optimizers.push(("net".into(), OptimizerState::capture(&opt)));
        c
    }

    #[test]
    fn roundtrip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert!(!back.is_complete());
    }

    #[test]
    fn corruption_is_detected() {
        let c = sample();
        let mut bytes = c.to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes, Path::new("x")), Err(Error::Artifact { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"garbage-garbage-garbage", Path::new("x")), Err(Error::Artifact { .. })));
        let mut bytes = c.to_bytes();
        bytes[8] = 9;
        assert!(Checkpoint::from_bytes(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s/checkpoint.bin");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(matches!(Checkpoint::load(&dir.path().join("none.bin")), Err(Error::Prerequisite(_))));
    }
}
