//! Flat named-tensor container used for checkpoints and feature archives.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "DRGTNSR1"
//! meta_len     u64
//! meta         meta_len bytes of UTF-8 JSON
//! count        u64
//! count × {
//!     name_len u32, name (UTF-8)
//!     ndim     u32, dims u64 × ndim
//!     values   f64 × prod(dims), row-major
//! }
//! ```
//!
//! Model checkpoints store parameters under the names of
//! [`ModelParams::named`] in that order, followed by optimizer velocities
//! under `optim.velocity.<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::numkernel::Tensor;
use crate::streams::ActionCatalog;
use crate::training::{OptimState, SgdConfig};

pub const MAGIC: &[u8; 8] = b"DRGTNSR1";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "optim.velocity.";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensors {
    pub metadata: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl NamedTensors {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode(metadata: &Value, tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let meta = serde_json::to_vec(metadata).expect("JSON values always serialize");
    let payload: usize = tensors.iter().map(|(n, t)| 16 + n.len() + 8 * (t.rank() + t.len())).sum();
    let mut out = Vec::with_capacity(24 + meta.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl std::fmt::Display) -> Error {
        Error::Input(format!("{}: byte {}: {msg}", self.path.display(), self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.fail("unexpected end of file"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| self.fail("length overflows usize"))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|e| self.fail(e))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<NamedTensors> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(r.fail("not a named-tensor file"));
    }
    let meta_len = r.u64()?;
    let meta = r.take(meta_len)?;
    let metadata: Value = serde_json::from_slice(meta).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let count = r.u64()?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.fail("tensor size overflows"))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| r.fail("tensor size overflows"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| r.fail(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok(NamedTensors { metadata, tensors })
}

pub fn write_tensors(path: &Path, metadata: &Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    std::fs::write(path, encode(metadata, tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<NamedTensors> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub catalog: ActionCatalog,
    pub sgd: Option<SgdConfig>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub optim: Option<OptimState>,
}

pub fn checkpoint_bytes(model: &Model, optim: Option<&OptimState>, config_hash: &str) -> Vec<u8> {
    let meta = CheckpointMeta {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        model: model.config,
        catalog: model.catalog.clone(),
        sgd: optim.map(|o| o.config),
    };
    let mut tensors = model.params.named();
    let mut velocity_names = Vec::new();
    if let Some(o) = optim {
        for ((name, _), v) in model.params.named().into_iter().zip(&o.velocity) {
            velocity_names.push((format!("{VELOCITY_PREFIX}{name}"), v));
        }
    }
    tensors.extend(velocity_names);
    let meta = serde_json::to_value(&meta).expect("metadata serializes");
    encode(&meta, &tensors)
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    optim: Option<&OptimState>,
    config_hash: &str,
) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model, optim, config_hash)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let nt = read_tensors(path)?;
    let meta: CheckpointMeta = serde_json::from_value(nt.metadata.clone()).map_err(|source| {
        Error::Json {
            path: path.to_path_buf(),
            source,
        }
    })?;
    let mut params = ModelParams::zeros(&meta.model, meta.catalog.len())?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let t = nt
            .get(name)
            .ok_or_else(|| Error::Mismatch(format!("{}: missing tensor {name}", path.display())))?;
        if t.shape() != slot.shape() {
            return Err(Error::Mismatch(format!(
                "{}: tensor {name} has shape {:?}, config implies {:?}",
                path.display(),
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    let optim = match meta.sgd {
        None => None,
        Some(cfg) => {
            let velocity = names
                .iter()
                .zip(params.named())
                .map(|(name, (_, p))| {
                    let v = nt.get(&format!("{VELOCITY_PREFIX}{name}")).ok_or_else(|| {
                        Error::Mismatch(format!("{}: missing velocity for {name}", path.display()))
                    })?;
                    v.expect_shape(name, p.shape())
                        .map_err(|e| Error::Mismatch(e.to_string()))?;
                    Ok(v.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            Some(OptimState {
                config: cfg,
                velocity,
            })
        }
    };
    let model = Model::new(meta.model, meta.catalog.clone(), params)?;
    Ok(Checkpoint { meta, model, optim })
}
