//! Checkpoint files: `u64` little-endian manifest length, JSON manifest, then
//! a little-endian `f32` blob holding every parameter in registration order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BotError, Result};
use crate::model::{BotModel, ModelConfig};
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

const FORMAT: &str = "bot-checkpoint-v1";

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    pub stream: u64,
    /// Decimal word position (u128 does not fit JSON numbers).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || BotError::Checkpoint(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

/// Parameters are held at `f32` precision so the in-memory checkpoint and a
/// reloaded one evaluate identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(
        model: &ModelConfig,
        train: &TrainConfig,
        step: u64,
        rng: &ChaCha8Rng,
        store: &ParameterStore,
    ) -> Self {
        let params = store
            .ids()
            .map(|id| {
                let v = store.value(id).map(|x| x as f32 as f64);
                (store.name(id).to_string(), v)
            })
            .collect();
        Self {
            model: model.clone(),
            train: train.clone(),
            step,
            rng: RngState::capture(rng),
            params,
        }
    }

    /// Rebuilds the model and loads every tensor; names and shapes must match exactly.
    pub fn build_model(&self) -> Result<(ParameterStore, BotModel)> {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = BotModel::new(self.model.clone(), &mut store, &mut rng)?;
        if store.len() != self.params.len() {
            return Err(BotError::Checkpoint(format!(
                "config/checkpoint mismatch: model has {} tensors, checkpoint {}",
                store.len(),
                self.params.len()
            )));
        }
        for (id, (name, value)) in store.ids().collect::<Vec<_>>().into_iter().zip(&self.params) {
            if store.name(id) != name || store.value(id).shape() != value.shape() {
                return Err(BotError::Checkpoint(format!(
                    "config/checkpoint mismatch at `{}` {:?}: checkpoint has `{name}` {:?}",
                    store.name(id),
                    store.value(id).shape(),
                    value.shape()
                )));
            }
            *store.value_mut(id) = value.clone();
        }
        Ok((store, model))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (name, t) in &self.params {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                len: t.len(),
            });
            offset += t.len();
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            rng: self.rng.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + header.len() + 4 * offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.params {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = || BotError::Checkpoint("truncated checkpoint".into());
        let len = u64::from_le_bytes(bytes.get(..8).ok_or_else(short)?.try_into().unwrap()) as usize;
        let header = bytes.get(8..8 + len).ok_or_else(short)?;
        let manifest: Manifest = serde_json::from_slice(header)?;
        if manifest.format != FORMAT {
            return Err(BotError::Checkpoint(format!("unknown format `{}`", manifest.format)));
        }
        let blob = &bytes[8 + len..];
        let total: usize = manifest.tensors.iter().map(|e| e.len).sum();
        if blob.len() != 4 * total {
            return Err(BotError::Checkpoint(format!(
                "blob holds {} bytes, manifest needs {}",
                blob.len(),
                4 * total
            )));
        }
        let mut params = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.dtype != "f32" || e.offset + e.len > total {
                return Err(BotError::Checkpoint(format!("bad tensor entry `{}`", e.name)));
            }
            let data = blob[4 * e.offset..4 * (e.offset + e.len)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            params.push((e.name.clone(), Tensor::new(&e.shape, data)?));
        }
        Ok(Self {
            model: manifest.model,
            train: manifest.train,
            step: manifest.step,
            rng: manifest.rng,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
