//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SLPC" | version: u32 | header_len: u64 | header: JSON (header_len bytes) | payload
//! ```
//!
//! The header lists every tensor with its dtype (always `"f32"`), shape and byte
//! offset into the payload, together with the model kind, its full config, the
//! training seed and the DDPM data scale. The payload is raw little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use slpgen_autodiff::{ParamStore, Tensor};

use crate::diffusion::{DdpmConfig, DdpmKind, LatentDdpm};
use crate::error::{CheckpointError, Result};
use crate::nets::{AeConfig, Autoencoder};

pub const MAGIC: [u8; 4] = *b"SLPC";
pub const VERSION: u32 = 1;
const PREFIX: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Autoencoder,
    PositionDdpm,
    FeatureDdpm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Autoencoder => "autoencoder",
            ModelKind::PositionDdpm => "position_ddpm",
            ModelKind::FeatureDdpm => "feature_ddpm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: ModelKind,
    pub config: Value,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_scale: Option<f32>,
    pub tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint: header plus tensors in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

fn header_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Header(msg.into())
}

impl Checkpoint {
    fn from_store(kind: ModelKind, config: Value, seed: u64, data_scale: Option<f32>, store: &ParamStore) -> Self {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(store.len());
        let mut tensors = Vec::with_capacity(store.len());
        for (name, t) in store.iter() {
            entries.push(TensorEntry { name: name.to_string(), dtype: "f32".into(), shape: t.shape().to_vec(), offset });
            offset += 4 * t.numel() as u64;
            tensors.push(t.clone());
        }
        Self { header: Header { kind, config, seed, data_scale, tensors: entries }, tensors }
    }

    pub fn from_autoencoder(ae: &Autoencoder, seed: u64) -> Result<Self> {
        let config = serde_json::to_value(ae.config())?;
        Ok(Self::from_store(ModelKind::Autoencoder, config, seed, None, ae.store()))
    }

    pub fn from_ddpm(model: &LatentDdpm, seed: u64) -> Result<Self> {
        let kind = match model.kind() {
            DdpmKind::Position => ModelKind::PositionDdpm,
            DdpmKind::Feature => ModelKind::FeatureDdpm,
        };
        let config = serde_json::to_value(model.config())?;
        Ok(Self::from_store(kind, config, seed, Some(model.data_scale()), model.store()))
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(CheckpointError::Kind { found: self.header.kind.name().into(), expected: kind.name().into() }.into());
        }
        Ok(())
    }

    fn fill(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.tensors.len() {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            ))
            .into());
        }
        for (e, t) in self.header.tensors.iter().zip(&self.tensors) {
            store.assign(&e.name, t.clone()).map_err(|err| CheckpointError::Mismatch(format!("{}: {err}", e.name)))?;
        }
        Ok(())
    }

    pub fn to_autoencoder(&self) -> Result<Autoencoder> {
        self.expect_kind(ModelKind::Autoencoder)?;
        let config: AeConfig = serde_json::from_value(self.header.config.clone()).map_err(|e| header_err(e.to_string()))?;
        let mut ae = Autoencoder::new(config, self.header.seed)?;
        self.fill(ae.store_mut())?;
        Ok(ae)
    }

    /// Rebuilds either DDPM; `expected` pins the kind.
    pub fn to_ddpm(&self, expected: DdpmKind) -> Result<LatentDdpm> {
        self.expect_kind(match expected {
            DdpmKind::Position => ModelKind::PositionDdpm,
            DdpmKind::Feature => ModelKind::FeatureDdpm,
        })?;
        let config: DdpmConfig = serde_json::from_value(self.header.config.clone()).map_err(|e| header_err(e.to_string()))?;
        let mut model = LatentDdpm::new(config, self.header.seed)?;
        self.fill(model.store_mut())?;
        let scale = self.header.data_scale.ok_or_else(|| header_err("DDPM checkpoint without data_scale"))?;
        model.set_data_scale(scale)?;
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload_len: usize = self.tensors.iter().map(|t| 4 * t.numel()).sum();
        let mut out = Vec::with_capacity(PREFIX + header.len() + payload_len);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let truncated = |needed: usize| CheckpointError::Truncated { needed, available: bytes.len() };
        if bytes.len() < 4 {
            return Err(truncated(4).into());
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic).into());
        }
        if bytes.len() < PREFIX {
            return Err(truncated(PREFIX).into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, expected: VERSION }.into());
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|h| h.checked_add(PREFIX))
            .ok_or_else(|| header_err(format!("header length {header_len} too large")))?;
        if bytes.len() < header_end {
            return Err(truncated(header_end).into());
        }
        let header: Header = serde_json::from_slice(&bytes[PREFIX..header_end]).map_err(|e| header_err(e.to_string()))?;
        let payload = &bytes[header_end..];

        let mut spans = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(header_err(format!("{}: unsupported dtype {}", e.name, e.dtype)).into());
            }
            let len = e
                .shape
                .iter()
                .try_fold(4usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| header_err(format!("{}: shape overflows", e.name)))?;
            let start = usize::try_from(e.offset).map_err(|_| header_err(format!("{}: offset too large", e.name)))?;
            let end = start.checked_add(len).ok_or_else(|| header_err(format!("{}: offset overflows", e.name)))?;
            if end > payload.len() {
                return Err(truncated(header_end + end).into());
            }
            spans.push((start, end, e.name.as_str()));
        }
        let mut sorted = spans.clone();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(header_err(format!("tensors {} and {} overlap", w[0].2, w[1].2)).into());
            }
        }
        let tensors = header
            .tensors
            .iter()
            .zip(&spans)
            .map(|(e, &(start, end, _))| {
                let data = payload[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                Ok(Tensor::new(e.shape.clone(), data)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

pub fn save_autoencoder(ae: &Autoencoder, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_autoencoder(ae, seed)?.save(path)
}

pub fn load_autoencoder(path: impl AsRef<Path>) -> Result<Autoencoder> {
    Checkpoint::load(path)?.to_autoencoder()
}

pub fn save_ddpm(model: &LatentDdpm, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_ddpm(model, seed)?.save(path)
}

pub fn load_ddpm(path: impl AsRef<Path>, kind: DdpmKind) -> Result<LatentDdpm> {
    Checkpoint::load(path)?.to_ddpm(kind)
}
