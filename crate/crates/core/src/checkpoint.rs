//! Binary model checkpoints.
//!
//! Layout: 8-byte magic, `u64` LE metadata length, JSON metadata, parameters
//! as `f64` LE in architecture order, then a CRC-64/XZ of everything before
//! it. The blind key is never written; a checkpoint of a defended model
//! records the transforms the key protects and a salted verifier.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use crate::blind::{KeyCheck, TrainingAlgorithm};
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::preprocess::Pipeline;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"BGCKPT01";
const CRC: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    architecture: Architecture,
    pipeline: Option<Pipeline>,
    training: TrainingAlgorithm,
    train_config: Option<TrainConfig>,
    key_check: Option<KeyCheck>,
    num_parameters: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Pipeline the model expects in front of it.
    pub pipeline: Option<Pipeline>,
    pub training: TrainingAlgorithm,
    pub train_config: Option<TrainConfig>,
    /// Salted verifier of the key guarding `pipeline`, if it is gated.
    pub key_check: Option<KeyCheck>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Metadata {
            architecture: self.model.architecture().clone(),
            pipeline: self.pipeline.clone(),
            training: self.training,
            train_config: self.train_config.clone(),
            key_check: self.key_check.clone(),
            num_parameters: self.model.num_parameters(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(24 + json.len() + 8 * meta.num_parameters);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.model.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = CRC.checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Format("checkpoint is empty".into()));
        }
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        if bytes.len() < MAGIC.len() + 16 {
            return Err(Error::Integrity("checkpoint is truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if CRC.checksum(body) != stored {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let rest = &body[16..];
        if len > rest.len() {
            return Err(Error::Integrity("metadata length exceeds file".into()));
        }
        let (json, raw) = rest.split_at(len);
        let meta: Metadata = serde_json::from_slice(json).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        if raw.len() != 8 * meta.num_parameters {
            return Err(Error::Consistency(format!(
                "{} parameter bytes for {} parameters",
                raw.len(),
                meta.num_parameters
            )));
        }
        let mut values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let params = meta
            .architecture
            .param_shapes()?
            .into_iter()
            .map(|shape| {
                let n = shape.iter().product();
                Tensor::new(shape, values.by_ref().take(n).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Model::from_parts(meta.architecture, params)
            .map_err(|e| Error::Consistency(format!("parameters do not fit the architecture: {e}")))?;
        if model.num_parameters() != meta.num_parameters {
            return Err(Error::Consistency("parameter count disagrees with architecture".into()));
        }
        Ok(Checkpoint {
            model,
            pipeline: meta.pipeline,
            training: meta.training,
            train_config: meta.train_config,
            key_check: meta.key_check,
        })
    }

    /// Writes through a sibling temporary file so a crash never leaves a
    /// half-written checkpoint under `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blind::{BlindGate, BlindKey};
    use sha2::{Digest, Sha256};

    fn sample() -> Checkpoint {
        Checkpoint {
            model: Model::build(Architecture::mnist(15), 9).unwrap(),
            pipeline: Some(Pipeline::canonical(15).unwrap()),
            training: TrainingAlgorithm::Adversarial,
            train_config: Some(TrainConfig {
                adv_mix: 0.5,
                ..TrainConfig::default()
            }),
            key_check: None,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        for (a, b) in back.model.params().iter().zip(c.model.params()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        for pos in [8, 20, bytes.len() / 2, bytes.len() - 9, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            assert!(
                matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity(_))),
                "byte {pos}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn empty_and_truncated_files() {
        assert!(matches!(Checkpoint::from_bytes(&[]), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(b"hello"), Err(Error::Format(_))));
        let bytes = sample().to_bytes().unwrap();
        for cut in [10, 30, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Integrity(_))),
                "cut {cut}"
            );
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty");
        fs::write(&path, b"").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
        assert!(matches!(
            Checkpoint::load(dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn key_material_never_reaches_disk() {
        let key = BlindKey::from_bytes([0xA7; 16]);
        let gate = BlindGate::new(Pipeline::canonical(15).unwrap(), &key);
        let mut c = sample();
        c.pipeline = Some(gate.unlock(&key).unwrap().clone());
        c.key_check = Some(gate.key_check().clone());
        let bytes = c.to_bytes().unwrap();
        let contains = |needle: &[u8]| bytes.windows(needle.len()).any(|w| w == needle);
        assert!(!contains(key.as_bytes()));
        assert!(!contains(key.to_hex().as_bytes()));
        let digest = Sha256::digest(key.as_bytes());
        assert!(!contains(&digest));
        assert!(!contains(hex::encode(digest).as_bytes()));
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let reopened = BlindGate::from_key_check(back.pipeline.unwrap(), back.key_check.unwrap());
        assert!(reopened.unlock(&key).is_ok());
        assert!(matches!(
            reopened.unlock(&BlindKey::from_bytes([0xA6; 16])),
            Err(Error::AccessDenied)
        ));
    }

    #[test]
    fn metadata_must_match_parameters() {
        let c = sample();
        let mut bytes = c.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 16);
        let sum = CRC.checksum(&bytes);
        bytes.extend_from_slice(&sum.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Consistency(_))));
    }
}
