//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (configs, vocabulary, rng state, epoch and a tensor manifest),
//! then every tensor as little-endian `f64` values in manifest order. All
//! integers are little-endian.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{ModelParams, TrainConfig};
use crate::autodiff::{ParamStore, Tensor};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::text::Vocabulary;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"DCRANCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    pub stream: u64,
    /// Word position, as a decimal string (it is a 68-bit counter).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::validation(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::validation("rng seed must be 32 bytes"))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::validation(format!("rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub rng: RngState,
    /// Epochs completed when the parameters were captured.
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Byte offset into the payload.
    offset: usize,
    decay: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab: Vec<String>,
    rng: RngState,
    epoch: usize,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(model: &ModelParams, train_config: &TrainConfig, vocab: &Vocabulary, rng: &ChaCha8Rng, epoch: usize) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model_config: model.config.clone(),
            train_config: train_config.clone(),
            vocab: vocab.clone(),
            params: model.store.clone(),
            rng: RngState::capture(rng),
            epoch,
        }
    }

    /// Rebuilds the model structure and fills it from the stored tensors.
    pub fn model(&self) -> Result<ModelParams> {
        ModelParams::from_store(&self.model_config, &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for id in self.params.ids() {
            let t = self.params.get(id);
            tensors.push(TensorEntry {
                name: self.params.name(id).to_string(),
                shape: t.shape(),
                offset,
                decay: self.params.decays(id),
            });
            offset += t.len() * 8;
        }
        let header = Header {
            version: self.version,
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            rng: self.rng.clone(),
            epoch: self.epoch,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + offset);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for id in self.params.ids() {
            for v in self.params.get(id).data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::validation(format!("checkpoint: {m}"));
        if bytes.len() < 20 || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..payload_start])?;
        if header.version != version {
            return Err(bad("header version disagrees with preamble"));
        }
        let payload = &bytes[payload_start..];
        let mut params = ParamStore::new();
        let mut expected = 0;
        for entry in &header.tensors {
            let [rows, cols] = entry.shape;
            let len = rows * cols * 8;
            if entry.offset != expected || entry.offset + len > payload.len() {
                return Err(bad(&format!("tensor {} has an inconsistent offset", entry.name)));
            }
            let data = payload[entry.offset..entry.offset + len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.add(entry.name.clone(), Tensor::new(rows, cols, data)?, entry.decay);
            expected += len;
        }
        if expected != payload.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        let vocab = Vocabulary::from_text(&header.vocab.join("\n"))?;
        if vocab.tokens() != header.vocab.as_slice() {
            return Err(bad("vocabulary does not round-trip"));
        }
        Ok(Self {
            version,
            model_config: header.model_config,
            train_config: header.train_config,
            vocab,
            params,
            rng: header.rng,
            epoch: header.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
