//! Adversarial attacks on raw-pixel and level-encoded classifiers.

mod bpda;
mod gradient;
mod lspga;

use serde::{Deserialize, Serialize};

pub use bpda::{bpda_attack, StraightThrough, Surrogate};
pub use gradient::{fgsm, pgd_continuous, InputGradient, WhiteBox};
pub use lspga::{lspga, lspga_blind, lspga_full, realize_raw, Trace};

use crate::error::{Error, Result};
use crate::preprocess::{BucketRange, Buckets, EncodedBatch};
use crate::tensor::Tensor;

/// Who may see what during an attack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// The attacker knows and differentiates the whole pre-processing.
    #[serde(rename = "full")]
    FullWhiteBox,
    /// The pre-processing is hidden; gradients stop at the encoding.
    Blind,
    /// Pre-processing hidden, replaced by a differentiable surrogate.
    Bpda,
}

impl std::str::FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AttackMode::FullWhiteBox),
            "blind" => Ok(AttackMode::Blind),
            "bpda" => Ok(AttackMode::Bpda),
            _ => Err(Error::Config(format!(
                "unknown attack mode {s:?}; expected full, blind or bpda"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Lspga,
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "lspga" => Ok(AttackKind::Lspga),
            _ => Err(Error::Config(format!(
                "unknown attack {s:?}; expected fgsm, pgd or lspga"
            ))),
        }
    }
}

/// How LS-PGA turns the logit gradient into a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ascent {
    /// `u += step_size * grad`.
    Gradient,
    /// `u += step_size * sign(grad)`.
    Sign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// l-infinity budget in raw pixel units.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    /// Temperature factor per step.
    pub anneal: f64,
    pub initial_temperature: f64,
    pub restarts: usize,
    pub mode: AttackMode,
    pub seed: u64,
    /// Start continuous attacks from a uniform point in the ball.
    pub random_start: bool,
    /// Multiply the temperature by `anneal` each step instead of dividing.
    pub heat: bool,
    pub ascent: Ascent,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 0.3,
            steps: 7,
            step_size: 1.0,
            anneal: 1.2,
            initial_temperature: 1.0,
            restarts: 1,
            mode: AttackMode::Blind,
            seed: 0,
            random_start: true,
            heat: false,
            ascent: Ascent::Sign,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if !(self.initial_temperature > 0.0 && self.initial_temperature.is_finite()) {
            return Err(Error::Config("initial temperature must be positive".into()));
        }
        if !(self.anneal > 1.0 && self.anneal.is_finite()) {
            return Err(Error::Config("anneal factor must exceed 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("step size must be non-negative".into()));
        }
        Ok(())
    }

    /// Temperature used at step `j` (`j = 0` is the initial one).
    pub fn temperature(&self, j: usize) -> f64 {
        let f = self.anneal.powi(j as i32);
        if self.heat {
            self.initial_temperature * f
        } else {
            self.initial_temperature / f
        }
    }

    /// RNG seed of restart `r`.
    pub fn restart_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }
}

/// Allowed quantization buckets per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    k: usize,
    allowed: Vec<bool>,
}

impl Mask {
    /// Allows buckets `lo[p]..=hi[p]` for every pixel `p`.
    pub fn from_range(range: &BucketRange) -> Result<Self> {
        let (lo, hi) = (&range.lo, &range.hi);
        if lo.shape() != hi.shape() || lo.k() != hi.k() {
            return Err(Error::Consistency("bucket range bounds disagree".into()));
        }
        let k = lo.k();
        let mut allowed = vec![false; lo.indices().len() * k];
        for (p, (&a, &b)) in lo.indices().iter().zip(hi.indices()).enumerate() {
            if a > b {
                return Err(Error::Consistency(format!("empty bucket range at pixel {p}")));
            }
            allowed[p * k + a..=p * k + b].fill(true);
        }
        Ok(Mask {
            shape: lo.shape().to_vec(),
            k,
            allowed,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn pixels(&self) -> usize {
        self.allowed.len() / self.k
    }

    pub fn allowed(&self, pixel: usize, bucket: usize) -> bool {
        self.allowed[pixel * self.k + bucket]
    }

    /// Flat `[pixel * k + bucket]` view.
    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// Examples `start..end` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Mask> {
        let n = self.shape.first().copied().unwrap_or(0);
        if start > end || end > n {
            return Err(Error::Index(format!("rows {start}..{end} of {n}")));
        }
        let row = self.allowed.len() / n.max(1);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Mask {
            shape,
            k: self.k,
            allowed: self.allowed[start * row..end * row].to_vec(),
        })
    }

    pub fn contains(&self, buckets: &Buckets) -> bool {
        buckets.shape() == self.shape.as_slice()
            && buckets.indices().iter().enumerate().all(|(p, &b)| self.allowed(p, b))
    }
}

fn bucket_of(x: f64, k: usize) -> usize {
    ((x * k as f64).floor() as usize).min(k - 1)
}

/// Bucket `b` is allowed iff `[b/k, (b+1)/k)` meets
/// `[max(0, x - eps), min(1, x + eps)]`.
pub fn compute_mask(batch: &Tensor, epsilon: f64, k: usize) -> Result<Mask> {
    if k < 2 {
        return Err(Error::Config(format!("k must be >= 2, got {k}")));
    }
    if let Some(x) = batch.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Range(format!("pixel {x} outside [0, 1]")));
    }
    let bounds = |d: f64| {
        let idx = batch
            .data()
            .iter()
            .map(|&x| bucket_of((x + d).clamp(0.0, 1.0), k))
            .collect();
        Buckets::new(batch.shape().to_vec(), idx, k)
    };
    Mask::from_range(&BucketRange {
        lo: bounds(-epsilon)?,
        hi: bounds(epsilon)?,
    })
}

/// Result of a discrete attack on one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch {
    /// Encoding the attacker settled on.
    pub encoded: EncodedBatch,
    pub buckets: Option<Buckets>,
    /// Raw image realizing the attack, when the attacker must hand over
    /// pixels rather than encodings.
    pub raw: Option<Tensor>,
    pub labels: Vec<usize>,
    /// Loss per example as measured by the attacker.
    pub loss: Vec<f64>,
    /// Misclassification as judged by the attacker.
    pub success: Vec<bool>,
    /// Relaxed-loss and temperature traces, one per restart.
    pub traces: Vec<Trace>,
}

impl AdversarialBatch {
    pub fn success_count(&self) -> usize {
        self.success.iter().filter(|&&s| s).count()
    }

    /// Accuracy in percent from the attacker's point of view.
    pub fn accuracy(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        100.0 * (self.success.len() - self.success_count()) as f64 / self.success.len() as f64
    }
}

/// Output of one attack restart, `per_example` entries of `rows` per
/// example.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate<T> {
    pub rows: Vec<T>,
    pub per_example: usize,
    pub loss: Vec<f64>,
    pub success: Vec<bool>,
}

impl<T: Clone> Candidate<T> {
    fn check(&self) -> Result<()> {
        let n = self.loss.len();
        if self.success.len() != n || self.rows.len() != n * self.per_example {
            return Err(Error::Consistency("candidate arrays disagree in length".into()));
        }
        Ok(())
    }

    /// Takes example `i` from `other` when `(success, loss)` is
    /// lexicographically larger there. Ties keep the earlier run.
    fn absorb(&mut self, other: &Candidate<T>) {
        let p = self.per_example;
        for i in 0..self.loss.len() {
            let better = match (self.success[i], other.success[i]) {
                (false, true) => true,
                (true, false) => false,
                _ => other.loss[i] > self.loss[i],
            };
            if better {
                self.rows[i * p..(i + 1) * p].clone_from_slice(&other.rows[i * p..(i + 1) * p]);
                self.loss[i] = other.loss[i];
                self.success[i] = other.success[i];
            }
        }
    }
}

/// Per-example best of `restarts` runs of `run(r)` under the
/// `(success, loss)` order. Runs execute in parallel; the merge follows restart order, so
/// the result does not depend on scheduling.
pub fn multi_restart<T, F, X>(restarts: usize, run: F) -> Result<(Candidate<T>, Vec<X>)>
where
    T: Clone + Send,
    X: Send,
    F: Fn(usize) -> Result<(Candidate<T>, X)> + Sync,
{
    use rayon::prelude::*;
    if restarts == 0 {
        return Err(Error::Config("restarts must be at least 1".into()));
    }
    let runs: Vec<(Candidate<T>, X)> = (0..restarts).into_par_iter().map(&run).collect::<Result<_>>()?;
    let mut runs = runs.into_iter();
    let (mut best, first_extra) = runs.next().expect("at least one restart");
    best.check()?;
    let mut extras = vec![first_extra];
    for (c, x) in runs {
        c.check()?;
        if c.loss.len() != best.loss.len() || c.per_example != best.per_example {
            return Err(Error::Consistency("restarts disagree in batch shape".into()));
        }
        best.absorb(&c);
        extras.push(x);
    }
    Ok((best, extras))
}
