//! Binary checkpoint format.
//!
//! ```text
//! magic "SEQMATCH" | u32 version | u64 header length | JSON header
//! | f64 parameters | [f64 Adam first moments | f64 Adam second moments]
//! | sha256 of everything above
//! ```
//!
//! Integers and floats are little-endian. Tensors are written in the order
//! listed by the header, row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainingConfig;
use crate::data::dataset::PrepareRules;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 8] = b"SEQMATCH";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainingConfig,
    config_hash: String,
    vocab: Vocab,
    params: Vec<TensorEntry>,
    adam: Option<AdamHeader>,
    epoch: usize,
    rules: Option<PrepareRules>,
}

/// A model plus whatever is needed to resume training or rebuild inputs.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: Option<AdamState>,
    /// Completed epochs.
    pub epoch: usize,
    /// Data rules the training set was prepared with.
    pub rules: Option<PrepareRules>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn put_tensors<'a>(out: &mut Vec<u8>, tensors: impl IntoIterator<Item = &'a Tensor>) {
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.bytes.len() {
            return Err(corrupt("unexpected end of data"));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn tensors(&mut self, shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
        shapes
            .iter()
            .map(|shape| {
                let raw = self.take(shape.iter().product::<usize>() * 8)?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::new(shape.clone(), data).map_err(|e| corrupt(e.to_string()))
            })
            .collect()
    }
}

impl Checkpoint {
    pub fn new(model: Model) -> Checkpoint {
        Checkpoint {
            model,
            adam: None,
            epoch: 0,
            rules: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = Header {
            config: self.model.config().clone(),
            config_hash: self.model.config().hash(),
            vocab: self.model.vocab().clone(),
            params: params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            adam: self.adam.as_ref().map(|a| AdamHeader {
                config: a.config,
                step: a.step_count(),
            }),
            epoch: self.epoch,
            rules: self.rules,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + params.num_scalars() * 8 * 3 + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        put_tensors(&mut out, params.iter().map(|(_, t)| t));
        if let Some(adam) = &self.adam {
            put_tensors(&mut out, adam.first_moments());
            put_tensors(&mut out, adam.second_moments());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < PREAMBLE + DIGEST_LEN {
            return Err(corrupt("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut cur = Cursor { bytes: &body[PREAMBLE..] };
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let header_len = usize::try_from(header_len).map_err(|_| corrupt("header too long"))?;
        let header: Header =
            serde_json::from_slice(cur.take(header_len)?).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.config.hash() != header.config_hash {
            return Err(corrupt("config hash mismatch"));
        }

        let shapes: Vec<Vec<usize>> = header.params.iter().map(|p| p.shape.clone()).collect();
        let copies = if header.adam.is_some() { 3 } else { 1 };
        let mut scalars: usize = 0;
        for shape in &shapes {
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt("tensor too large"))?;
            scalars = scalars.checked_add(n).ok_or_else(|| corrupt("tensor too large"))?;
        }
        let expected = scalars.checked_mul(8 * copies).ok_or_else(|| corrupt("tensor too large"))?;
        if expected != cur.bytes.len() {
            return Err(corrupt(format!(
                "expected {expected} bytes of tensor data, found {}",
                cur.bytes.len()
            )));
        }

        let mut params = ParamStore::default();
        for (entry, t) in header.params.iter().zip(cur.tensors(&shapes)?) {
            if params.slot(&entry.name).is_some() {
                return Err(corrupt(format!("duplicate tensor {}", entry.name)));
            }
            params.insert(entry.name.clone(), t);
        }
        let adam = match header.adam {
            Some(h) => {
                let first = cur.tensors(&shapes)?;
                let second = cur.tensors(&shapes)?;
                Some(AdamState::from_parts(h.config, h.step, first, second))
            }
            None => None,
        };
        let model = Model::from_parts(header.config, header.vocab, params).map_err(|e| corrupt(e.to_string()))?;
        Ok(Checkpoint {
            model,
            adam,
            epoch: header.epoch,
            rules: header.rules,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write then rename so a crash never leaves a half-written file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::prepare;
    use crate::data::synthetic::{generate, SyntheticConfig};
    use crate::train::Trainer;

    fn trained() -> Checkpoint {
        let (events, _) = generate(&SyntheticConfig {
            users: 20,
            items: 30,
            events_per_user: 15,
            ..SyntheticConfig::default()
        }, 4)
        .unwrap();
        let rules = PrepareRules::default();
        let data = prepare(&events, &rules, None).unwrap();
        let config = TrainingConfig {
            d: 8,
            heads: 2,
            batch_size: 16,
            negatives: 5,
            ..TrainingConfig::default()
        };
        let mut trainer = Trainer::from_histories(config, &data.train).unwrap();
        trainer.run(1, |_| {}).unwrap();
        let epoch = trainer.epoch();
        let (model, adam) = trainer.into_parts();
        Checkpoint {
            model,
            adam: Some(adam),
            epoch,
            rules: Some(rules),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.model.config(), ck.model.config());
        assert_eq!(back.model.vocab(), ck.model.vocab());
        for ((na, a), (nb, b)) in ck.model.params().iter().zip(back.model.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.adam, ck.adam);
        assert_eq!(back.epoch, 1);
        assert_eq!(back.rules, ck.rules);
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = trained().to_bytes().unwrap();
        for cut in [0, 7, 19, 100, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
    }

    #[test]
    fn flipped_byte_is_detected() {
        let mut bytes = trained().to_bytes().unwrap();
        let mid = bytes.len() - 100;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn other_versions_are_rejected() {
        let mut bytes = trained().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found: 7, expected: VERSION })
        ));
    }

    #[test]
    fn without_optimizer_state() {
        let mut ck = trained();
        ck.adam = None;
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert!(back.adam.is_none());
        assert_eq!(back.model.params(), ck.model.params());
    }
}
