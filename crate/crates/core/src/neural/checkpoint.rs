//! Checkpoint files: an 8-byte little-endian manifest length, the JSON
//! manifest, then the raw little-endian `f32` payload at the declared offsets.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{ModelConfig, Network, Params, Stage};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::stacklang::vocab_hash;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub step: u64,
    pub config: ModelConfig,
    pub vocab_hash: String,
    /// Q temperature used when decoding from a theta checkpoint.
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default)]
    pub floor_reached: Option<bool>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

fn one() -> f64 {
    1.0
}

impl CheckpointMeta {
    pub fn new(stage: Stage, step: u64, config: ModelConfig) -> CheckpointMeta {
        CheckpointMeta {
            stage,
            step,
            config,
            vocab_hash: vocab_hash(),
            alpha: 1.0,
            floor_reached: None,
            warnings: Vec::new(),
            notes: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: u64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_network(meta: CheckpointMeta, net: &Network) -> Checkpoint {
        Checkpoint {
            meta,
            tensors: net.params.as_map().clone(),
        }
    }

    /// Rebuilds the network stored under `prefix` (empty for single-network
    /// checkpoints).
    pub fn network(&self, prefix: &str) -> Result<Network> {
        let map: BTreeMap<String, Tensor> = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
            .collect();
        Network::from_params(self.meta.config.clone(), Params::from_map(map))
    }

    pub fn require_stage(&self, stage: Stage) -> Result<()> {
        if self.meta.stage != stage {
            return Err(Error::validation(format!(
                "expected a {stage} checkpoint, got {}",
                self.meta.stage
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [t.rows, t.cols],
                dtype: "f32".into(),
                offset: payload.len() as u64,
                count: t.len() as u64,
            });
            for &v in &t.data {
                let f = v as f32;
                if f as f64 != v {
                    return Err(Error::Numerical(format!(
                        "tensor {name} holds {v}, which is not representable as f32"
                    )));
                }
                payload.extend_from_slice(&f.to_le_bytes());
            }
        }
        let manifest = serde_json::to_vec(&Manifest {
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(8 + manifest.len() + payload.len());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let truncated = || Error::validation("checkpoint is truncated");
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(truncated)?.try_into().unwrap();
        let mlen = u64::from_le_bytes(len_bytes) as usize;
        let mbytes = bytes.get(8..8usize.saturating_add(mlen)).ok_or_else(truncated)?;
        let manifest: Manifest = serde_json::from_slice(mbytes)?;
        if manifest.meta.vocab_hash != vocab_hash() {
            return Err(Error::validation(format!(
                "checkpoint vocabulary hash {} does not match this build ({})",
                manifest.meta.vocab_hash,
                vocab_hash()
            )));
        }
        manifest.meta.config.validate()?;
        let payload = &bytes[8 + mlen..];
        let mut tensors = BTreeMap::new();
        let mut expected_len = 0u64;
        for e in &manifest.tensors {
            if e.dtype != "f32" || e.count != (e.shape[0] * e.shape[1]) as u64 {
                return Err(Error::validation(format!("bad tensor entry {}", e.name)));
            }
            let start = e.offset as usize;
            let end = start + 4 * e.count as usize;
            let raw = payload.get(start..end).ok_or_else(truncated)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.insert(e.name.clone(), Tensor::from_vec(e.shape[0], e.shape[1], data));
            expected_len = expected_len.max(end as u64);
        }
        if payload.len() as u64 != expected_len {
            return Err(Error::validation("checkpoint payload has trailing bytes"));
        }
        Ok(Checkpoint {
            meta: manifest.meta,
            tensors,
        })
    }

    /// SHA-256 of the serialized file contents.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::model::init_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            embed_dim: 8,
            mlp_dim: 8,
            ..ModelConfig::default()
        };
        let net = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        Checkpoint::from_network(CheckpointMeta::new(Stage::Phi, 17, cfg), &net)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta.stage, Stage::Phi);
        assert_eq!(back.network("").unwrap().params.hash(), ck.network("").unwrap().params.hash());
    }

    #[test]
    fn rejects_wrong_vocab_and_truncation() {
        let mut ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..5]).is_err());
        ck.meta.vocab_hash = "00".repeat(32);
        assert!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).is_err());
    }

    #[test]
    fn refuses_non_f32_values() {
        let mut ck = sample();
        ck.tensors.get_mut("tok_emb").unwrap().data[0] = 0.1;
        assert!(ck.to_bytes().is_err());
    }
}
