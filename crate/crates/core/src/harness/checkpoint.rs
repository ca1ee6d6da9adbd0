//! Binary checkpoint archive.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header
//! describing tensor shapes and run state, then little-endian `f64` data for
//! the parameters followed (optionally) by both Adam moment sets.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, NamedTensor, OptimizerState, ParamSet, TensorSet};
use crate::tensor::Matrix;
use crate::training::{Baseline, Phase};
use crate::util::sha256_hex;

pub const MAGIC: &[u8; 8] = b"SNETCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (it is a `u128`).
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
        let bad = || Error::MalformedCheckpoint("invalid generator state".into());
        let bytes = hex::decode(&self.seed).map_err(|_| bad())?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad())?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    pub phase: Phase,
    pub phase_step: u64,
    pub global_step: u64,
    pub baseline: Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    graph_fingerprint: String,
    tensors: Vec<TensorShape>,
    optimizer: Option<OptimizerHeader>,
    rng: Option<RngState>,
    progress: Option<Progress>,
    meta: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
}

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub graph_fingerprint: String,
    pub params: ParamSet,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngState>,
    pub progress: Option<Progress>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn params_only(graph_fingerprint: &str, params: ParamSet) -> Self {
        Self {
            graph_fingerprint: graph_fingerprint.to_string(),
            params,
            optimizer: None,
            rng: None,
            progress: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            graph_fingerprint: self.graph_fingerprint.clone(),
            tensors: self
                .params
                .tensors
                .iter()
                .map(|t| TensorShape {
                    name: t.name.clone(),
                    rows: t.value.rows,
                    cols: t.value.cols,
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
            rng: self.rng.clone(),
            progress: self.progress,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + 8 * 3 * self.params.num_elements());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.params.to_le_bytes());
        if let Some(o) = &self.optimizer {
            out.extend_from_slice(&o.first_moment.to_le_bytes());
            out.extend_from_slice(&o.second_moment.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::MalformedCheckpoint(m.to_string());
        if bytes.len() < PREFIX_LEN || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let rest = &bytes[PREFIX_LEN..];
        if hlen > rest.len() as u64 {
            return Err(bad("header length exceeds file"));
        }
        let (hbytes, data) = rest.split_at(hlen as usize);
        let header: Header = serde_json::from_slice(hbytes).map_err(|e| bad(&format!("header: {e}")))?;
        let mut total: usize = 0;
        for t in &header.tensors {
            let n = t.rows.checked_mul(t.cols).ok_or_else(|| bad("tensor shape overflows"))?;
            total = total.checked_add(n).ok_or_else(|| bad("tensor shape overflows"))?;
        }
        let sets = if header.optimizer.is_some() { 3 } else { 1 };
        let expected = total
            .checked_mul(8 * sets)
            .ok_or_else(|| bad("tensor shape overflows"))?;
        if data.len() != expected {
            return Err(bad("payload length does not match tensor shapes"));
        }
        let mut values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut read_set = || {
            TensorSet::new(
                header
                    .tensors
                    .iter()
                    .map(|t| NamedTensor {
                        name: t.name.clone(),
                        value: Matrix {
                            rows: t.rows,
                            cols: t.cols,
                            data: values.by_ref().take(t.rows * t.cols).collect(),
                        },
                    })
                    .collect(),
            )
        };
        let params = read_set();
        let optimizer = match header.optimizer {
            Some(o) => {
                let first_moment = read_set();
                let second_moment = read_set();
                Some(OptimizerState {
                    config: o.config,
                    first_moment,
                    second_moment,
                    step: o.step,
                })
            }
            None => None,
        };
        Ok(Self {
            graph_fingerprint: header.graph_fingerprint,
            params,
            optimizer,
            rng: header.rng,
            progress: header.progress,
            meta: header.meta,
        })
    }

    /// Short content hash identifying these exact bytes.
    pub fn id(&self) -> String {
        checkpoint_id(&self.to_bytes())
    }

    pub fn check_graph(&self, fingerprint: &str) -> Result<()> {
        if self.graph_fingerprint != fingerprint {
            return Err(Error::GraphFingerprintMismatch {
                expected: fingerprint.to_string(),
                found: self.graph_fingerprint.clone(),
            });
        }
        Ok(())
    }
}

pub fn checkpoint_id(bytes: &[u8]) -> String {
    sha256_hex(bytes)[..16].to_string()
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<String> {
    let bytes = ck.to_bytes();
    std::fs::write(path, &bytes)?;
    Ok(checkpoint_id(&bytes))
}

/// Load a checkpoint, refusing one trained on a different graph.
pub fn load_checkpoint(path: &Path, graph_fingerprint: &str) -> Result<Checkpoint> {
    let ck = Checkpoint::from_bytes(&std::fs::read(path)?)?;
    ck.check_graph(graph_fingerprint)?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_params, ModelConfig};

    fn small() -> ParamSet {
        let mut cfg = ModelConfig::standard(5);
        cfg.image_out = 4;
        cfg.query_out = 3;
        cfg.memory_out = 3;
        cfg.hidden = 6;
        init_params(&cfg, 2)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let params = small();
        let mut opt = OptimizerState::new(&params, AdamWConfig::default());
        opt.step = 7;
        opt.first_moment.tensors[0].value.data[0] = 0.1 + 0.2;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rand::Rng::gen::<u64>(&mut rng);
        let ck = Checkpoint {
            graph_fingerprint: "abc".into(),
            params,
            optimizer: Some(opt),
            rng: Some(RngState::capture(&rng)),
            progress: Some(Progress {
                phase: Phase::Rl,
                phase_step: 3,
                global_step: 10,
                baseline: Baseline {
                    value: 1.0 / 3.0,
                    decay: 0.99,
                    updates: 7,
                },
            }),
            meta: [("seed".to_string(), "5".to_string())].into(),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let mut restored = back.rng.unwrap().restore().unwrap();
        assert_eq!(rand::Rng::gen::<u64>(&mut restored), rand::Rng::gen::<u64>(&mut rng));
    }

    #[test]
    fn rejects_bad_inputs() {
        let ck = Checkpoint::params_only("abc", small());
        let mut bytes = ck.to_bytes();
        assert!(matches!(ck.check_graph("xyz"), Err(Error::GraphFingerprintMismatch { .. })));
        bytes[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::VersionMismatch { found: 2, .. })));
        bytes[8] = 1;
        bytes.pop();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::MalformedCheckpoint(_))));
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }
}
