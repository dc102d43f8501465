//! Key-gated pre-processing and the attacker's view of a defended model.
//!
//! The defender holds a [`BlindGate`]: a pipeline that runs only when the
//! matching [`BlindKey`] is presented. The attacker receives an
//! [`AttackerView`], which carries the model, the training algorithm name,
//! and data before and after pre-processing, but no way to run or
//! differentiate the pipeline.

use std::fmt;

use num_bigint::BigUint;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::preprocess::{EncodedBatch, Encoding, Pipeline, Transform};
use crate::tensor::Tensor;

/// 128-bit gate secret.
#[derive(Clone)]
pub struct BlindKey([u8; 16]);

impl BlindKey {
    pub const BYTES: usize = 16;

    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        BlindKey(bytes)
    }

    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        BlindKey(rng.random())
    }

    /// Parses exactly 32 hex digits.
    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s.trim()).map_err(|e| Error::Config(format!("key is not valid hex: {e}")))?;
        let bytes: [u8; 16] = bytes
            .try_into()
            .map_err(|b: Vec<u8>| Error::Config(format!("key must be 128 bits, got {} bits", b.len() * 8)))?;
        Ok(BlindKey(bytes))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    fn salted_digest(&self, salt: &[u8; 16]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(salt);
        h.update(self.0);
        h.finalize().into()
    }
}

/// Compares all 16 bytes regardless of where the first difference is.
impl PartialEq for BlindKey {
    fn eq(&self, other: &Self) -> bool {
        self.0.iter().zip(&other.0).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
    }
}

impl Eq for BlindKey {}

impl fmt::Debug for BlindKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("BlindKey(..)")
    }
}

/// Salted key verifier, safe to store next to a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyCheck {
    #[serde(with = "hex::serde")]
    pub salt: [u8; 16],
    #[serde(with = "hex::serde")]
    pub verifier: [u8; 32],
}

/// A pipeline locked behind a key. Only a salted digest of the key is kept.
#[derive(Clone, Debug)]
pub struct BlindGate {
    pipeline: Pipeline,
    check: KeyCheck,
}

impl BlindGate {
    /// Gate with a fresh random salt.
    pub fn new(pipeline: Pipeline, key: &BlindKey) -> Self {
        Self::with_salt(pipeline, key, rand::rng().random())
    }

    pub fn with_salt(pipeline: Pipeline, key: &BlindKey, salt: [u8; 16]) -> Self {
        BlindGate {
            pipeline,
            check: KeyCheck {
                salt,
                verifier: key.salted_digest(&salt),
            },
        }
    }

    /// Rebuilds a gate from a stored verifier.
    pub fn from_key_check(pipeline: Pipeline, check: KeyCheck) -> Self {
        BlindGate { pipeline, check }
    }

    pub fn key_check(&self) -> &KeyCheck {
        &self.check
    }

    fn check(&self, presented: &BlindKey) -> Result<()> {
        let d = presented.salted_digest(&self.check.salt);
        let diff = self
            .check
            .verifier
            .iter()
            .zip(&d)
            .fold(0u8, |acc, (a, b)| acc | (a ^ b));
        if diff == 0 {
            Ok(())
        } else {
            Err(Error::AccessDenied)
        }
    }

    /// Runs the pipeline when `presented` matches the gate key; otherwise
    /// fails before any transform executes.
    pub fn apply(&self, presented: &BlindKey, batch: &Tensor) -> Result<EncodedBatch> {
        self.check(presented)?;
        self.pipeline.apply(batch)
    }

    /// The pipeline itself, for the key holder.
    pub fn unlock(&self, presented: &BlindKey) -> Result<&Pipeline> {
        self.check(presented)?;
        Ok(&self.pipeline)
    }

    /// Transform stages executed so far through this gate or any clone of
    /// its pipeline.
    pub fn invocations(&self) -> u64 {
        self.pipeline.invocations()
    }

    /// Stage list for serialization by the key holder.
    pub fn describe(&self, presented: &BlindKey) -> Result<Vec<Transform>> {
        Ok(self.unlock(presented)?.transforms().to_vec())
    }
}

/// One-shot gate: equal to `p.apply(batch)` when `presented == key`.
pub fn gate_apply(p: &Pipeline, key: &BlindKey, presented: &BlindKey, batch: &Tensor) -> Result<EncodedBatch> {
    if key != presented {
        return Err(Error::AccessDenied);
    }
    p.apply(batch)
}

/// `2^(m + 3n)`.
pub fn key_space_size(m: u32, n: u32) -> BigUint {
    BigUint::from(1u8) << (m as u64 + 3 * n as u64)
}

/// Name of the procedure a model was trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingAlgorithm {
    Clean,
    Adversarial,
}

/// Everything an attacker may see of a defended model.
///
/// There is no accessor for the pipeline and no gradient with respect to raw
/// pixels:
///
/// ```compile_fail
/// fn probe(v: &blindguard_core::blind::AttackerView<'_>) {
///     let _ = v.pipeline();
/// }
/// ```
///
/// ```compile_fail
/// fn probe(v: &blindguard_core::blind::AttackerView<'_>) {
///     let _ = v.raw_gradient(v.raw_data(), v.labels());
/// }
/// ```
#[derive(Clone, Debug)]
pub struct AttackerView<'a> {
    model: &'a Model,
    training: TrainingAlgorithm,
    raw: &'a Tensor,
    labels: &'a [usize],
    encoded: Tensor,
    levels: usize,
    encoding: Encoding,
}

impl<'a> AttackerView<'a> {
    /// The defender encodes `raw` once, in chunks of `batch_size`, and hands
    /// the result over as static data.
    pub fn new(
        model: &'a Model,
        training: TrainingAlgorithm,
        gate: &BlindGate,
        key: &BlindKey,
        raw: &'a Tensor,
        labels: &'a [usize],
        batch_size: usize,
    ) -> Result<Self> {
        let pipeline = gate.unlock(key)?;
        let (Some(levels), Some(encoding)) = (pipeline.levels(), pipeline.encoding()) else {
            return Err(Error::Unsupported(
                "attacker view needs a pipeline that ends in an encoding".into(),
            ));
        };
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let n = raw.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(Error::Consistency(format!("{n} images but {} labels", labels.len())));
        }
        let mut parts = Vec::new();
        for start in (0..n).step_by(batch_size) {
            let chunk = raw.slice_outer(start, (start + batch_size).min(n))?;
            parts.push(gate.apply(key, &chunk)?.data);
        }
        Ok(AttackerView {
            model,
            training,
            raw,
            labels,
            encoded: Tensor::concat_outer(&parts)?,
            levels,
            encoding,
        })
    }

    pub fn model(&self) -> &'a Model {
        self.model
    }

    pub fn architecture(&self) -> &Architecture {
        self.model.architecture()
    }

    pub fn params(&self) -> &[Tensor] {
        self.model.params()
    }

    pub fn training_algorithm(&self) -> TrainingAlgorithm {
        self.training
    }

    pub fn raw_data(&self) -> &'a Tensor {
        self.raw
    }

    pub fn labels(&self) -> &'a [usize] {
        self.labels
    }

    pub fn encoded_data(&self) -> &Tensor {
        &self.encoded
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    /// Summed cross-entropy and its gradient with respect to an encoded
    /// batch: the deepest point gradients reach.
    pub fn encoded_gradient(&self, encoded: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        self.model.input_gradient(encoded, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::ToPrimitive;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn key(b: u8) -> BlindKey {
        BlindKey::from_bytes([b; 16])
    }

    #[test]
    fn key_space_values() {
        assert_eq!(key_space_size(0, 0), BigUint::from(1u8));
        assert_eq!(key_space_size(8, 2), BigUint::from(16384u32));
        let big = key_space_size(256, 1).to_f64().unwrap();
        assert!((big / 9.26e77 - 1.0).abs() < 1e-3, "{big:e}");
        assert_eq!(key_space_size(256, 1).bits(), 260);
    }

    #[test]
    fn key_hex_round_trip_and_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = BlindKey::generate(&mut rng);
        assert_eq!(BlindKey::from_hex(&k.to_hex()).unwrap(), k);
        assert!(BlindKey::from_hex("abcd").is_err());
        assert!(BlindKey::from_hex("zz").is_err());
        let mut last_differs = [7u8; 16];
        last_differs[15] = 8;
        assert_ne!(key(7), BlindKey::from_bytes(last_differs));
        assert!(!format!("{k:?}").contains(&k.to_hex()));
    }

    #[test]
    fn gate_is_transparent_with_the_key() {
        let p = Pipeline::canonical(15).unwrap();
        let gate = BlindGate::new(p.clone(), &key(1));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = Tensor::uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut rng);
            assert_eq!(gate.apply(&key(1), &x).unwrap(), p.apply(&x).unwrap());
            assert_eq!(gate_apply(&p, &key(1), &key(1), &x).unwrap(), p.apply(&x).unwrap());
        }
    }

    #[test]
    fn wrong_key_runs_nothing() {
        let p = Pipeline::canonical(15).unwrap();
        let gate = BlindGate::new(p.clone(), &key(1));
        let x = Tensor::full(&[1, 1, 4, 4], 0.5);
        for _ in 0..1000 {
            assert!(matches!(gate.apply(&key(2), &x), Err(Error::AccessDenied)));
            assert!(matches!(gate_apply(&p, &key(1), &key(2), &x), Err(Error::AccessDenied)));
        }
        assert_eq!(gate.invocations(), 0);
        assert!(gate.unlock(&key(2)).is_err());
        assert_eq!(gate.apply(&key(1), &x).unwrap(), p.apply(&x).unwrap());
    }

    #[test]
    fn view_exposes_data_and_stops_at_encoding() {
        let p = Pipeline::canonical(15).unwrap();
        let gate = BlindGate::new(p, &key(3));
        let model = Model::build(Architecture::mnist(15), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = Tensor::uniform(&[3, 1, 28, 28], 0.0, 1.0, &mut rng);
        let labels = [1, 2, 3];
        let view = AttackerView::new(&model, TrainingAlgorithm::Clean, &gate, &key(3), &raw, &labels, 2).unwrap();
        assert_eq!(view.raw_data(), &raw);
        assert_eq!(view.encoded_data().shape(), &[3, 15, 28, 28]);
        assert_eq!(view.levels(), 15);
        assert_eq!(view.architecture(), model.architecture());
        let before = gate.invocations();
        let (_, grad) = view.encoded_gradient(view.encoded_data(), &labels).unwrap();
        assert_eq!(grad.shape(), view.encoded_data().shape());
        assert_eq!(gate.invocations(), before);
        assert!(matches!(
            AttackerView::new(&model, TrainingAlgorithm::Clean, &gate, &key(4), &raw, &labels, 2),
            Err(Error::AccessDenied)
        ));
    }
}
