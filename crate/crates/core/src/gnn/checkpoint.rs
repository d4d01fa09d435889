//! Versioned checkpoint files: `AETK`, a `u32` version, a `u64` header
//! length, a JSON header, then every parameter as little-endian `f32` in
//! header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};

use super::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AETK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 2],
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub params: Vec<ParamSpec>,
    /// Shape of the field's Fourier matrix `Bᵀ`, when there is one.
    pub rff_shape: Option<[usize; 2]>,
    /// Free-form provenance (training config, epoch, metrics).
    pub meta: serde_json::Value,
}

impl Model {
    pub fn header(&self, meta: serde_json::Value) -> CheckpointHeader {
        let params = self
            .params
            .entries()
            .iter()
            .map(|e| ParamSpec {
                name: e.name.clone(),
                shape: [e.value.nrows(), e.value.ncols()],
                trainable: e.trainable,
            })
            .collect();
        let rff_shape = self
            .field
            .as_ref()
            .and_then(|f| f.rff)
            .map(|r| {
                let m = self.params.get(r.b_t);
                [m.nrows(), m.ncols()]
            });
        CheckpointHeader {
            model: self.cfg.clone(),
            params,
            rff_shape,
            meta,
        }
    }

    pub fn to_bytes(&self, meta: serde_json::Value) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.header(meta))?;
        let floats: usize = self.params.entries().iter().map(|e| e.value.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * floats);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in self.params.entries() {
            for &v in e.value.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Rebuilds the model from its config and fills in the stored values.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let mut model = Model::new(header.model.clone())?;
        if header.params.len() != model.params.len() {
            return Err(bad("parameter count does not match the config"));
        }
        let mut pos = 16 + len;
        for (i, spec) in header.params.iter().enumerate() {
            let entry = &model.params.entries()[i];
            if entry.name != spec.name || entry.value.dim() != (spec.shape[0], spec.shape[1]) {
                return Err(bad(&format!("unexpected parameter {}", spec.name)));
            }
            let count = spec.shape[0] * spec.shape[1];
            let raw = bytes.get(pos..pos + 4 * count).ok_or_else(|| bad("truncated data"))?;
            let vals: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let id = crate::nn::ParamId(i);
            model.params.set(id, Mat::from_shape_vec((spec.shape[0], spec.shape[1]), vals).unwrap());
            pos += 4 * count;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok((model, header.meta))
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        std::fs::write(path, self.to_bytes(meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
