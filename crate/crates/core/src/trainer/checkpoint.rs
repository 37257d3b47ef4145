//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MSAW01"
//! u32 meta length, meta JSON (configs, class names, epoch)
//! u32 tensor count
//! per tensor: u32 name length, name bytes, u32 rank, u32 extents..., u64 payload offset
//! payload: f32 values of every tensor, offsets counted from the payload start
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamStore, Role};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 6] = b"MSAW01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub classes: Vec<String>,
    /// Training samples per class in the manifest the model was fit on.
    #[serde(default)]
    pub train_counts: Vec<usize>,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Weights and batch-norm running statistics, in store order.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &Model<T>, meta: CheckpointMeta) -> Self {
        Checkpoint {
            meta,
            tensors: model.params.iter().map(|p| (p.name.clone(), p.value.cast())).collect(),
        }
    }

    /// Rebuilds a model for `config`, checking every tensor name and shape.
    pub fn into_model<T: Real>(&self, config: &ModelConfig) -> Result<Model<T>> {
        let template = config.init_params::<T>(0)?;
        let mut store = ParamStore::new();
        for (name, value) in &self.tensors {
            let role = template
                .position(name)
                .and_then(|i| template.iter().nth(i))
                .map_or(Role::Weight, |p| p.role);
            store.insert(name.clone(), role, value.cast());
        }
        Model::from_params(config.clone(), store)
    }

    /// The model the checkpoint was trained as.
    pub fn model<T: Real>(&self) -> Result<Model<T>> {
        self.into_model(&self.meta.model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        let mut out = MAGIC.to_vec();
        out.extend((meta.len() as u32).to_le_bytes());
        out.extend(meta);
        out.extend((self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u32).to_le_bytes());
            }
            out.extend(offset.to_le_bytes());
            offset += 4 * t.numel() as u64;
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut headers = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            headers.push((name, shape, offset));
        }
        let payload = &bytes[r.pos..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(count);
        for (name, shape, offset) in headers {
            if offset != expected {
                return Err(Error::Checkpoint(format!("tensor {name}: offset {offset}, expected {expected}")));
            }
            let n: usize = shape.iter().product();
            let end = offset as usize + 4 * n;
            let Some(raw) = payload.get(offset as usize..end) else {
                return Err(Error::Checkpoint(format!("truncated checkpoint: tensor {name} is cut short")));
            };
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
            expected = end as u64;
        }
        if payload.len() as u64 != expected {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the payload",
                payload.len() as u64 - expected
            )));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint header".into()))?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
