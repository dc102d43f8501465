//! Attacks through a non-differentiable pre-processing stage by substituting
//! a surrogate on the backward pass.

use super::gradient::{pgd_with, record_continuous, InputGradient};
use super::lspga::concat;
use super::{multi_restart, AdversarialBatch, AttackConfig, Candidate, Trace};
use crate::autodiff::Graph;
use crate::blind::AttackerView;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::preprocess::{encode, Buckets, EncodedBatch, Encoding, Pipeline, Transform};
use crate::tensor::Tensor;

/// What the attacker assumes sits in front of the encoding.
#[derive(Clone, Copy, Debug)]
pub enum Surrogate<'a> {
    /// Nothing: raw pixels are quantized directly.
    Identity,
    /// The real pipeline. Only a test can hand this over.
    Oracle(&'a Pipeline),
}

/// Forward pass through surrogate, hard quantization and encoding, then the
/// model. Backward replaces each hard level with the ramp
/// `t_i = clamp(i + 1 - v k, 0, 1)` of the continuous value `v`.
#[derive(Clone, Copy, Debug)]
pub struct StraightThrough<'a> {
    model: &'a Model,
    k: usize,
    encoding: Encoding,
    prefix: &'a [Transform],
    range: Option<[f64; 2]>,
}

impl<'a> StraightThrough<'a> {
    pub fn new(model: &'a Model, k: usize, encoding: Encoding, surrogate: Surrogate<'a>) -> Result<Self> {
        let (prefix, range) = match surrogate {
            Surrogate::Identity => (&[][..], None),
            Surrogate::Oracle(p) => {
                if p.levels() != Some(k) || p.encoding() != Some(encoding) {
                    return Err(Error::Consistency(
                        "oracle pipeline does not match the attacked encoding".into(),
                    ));
                }
                let q = p
                    .transforms()
                    .iter()
                    .position(|t| matches!(t, Transform::Quantize { .. }))
                    .expect("pipeline with levels quantizes");
                let Transform::Quantize { range, .. } = p.transforms()[q] else {
                    unreachable!()
                };
                (&p.transforms()[..q], range)
            }
        };
        Ok(StraightThrough {
            model,
            k,
            encoding,
            prefix,
            range,
        })
    }

    /// Continuous pre-quantization values in `[0, 1]`, recorded on `g`.
    fn record(&self, g: &mut Graph, x: &Tensor) -> Result<(crate::autodiff::Var, crate::autodiff::Var)> {
        let xv = g.param(x.clone());
        let v = record_continuous(g, self.prefix, xv)?;
        let [lo, hi] = self.range.unwrap_or([0.0, 1.0]);
        let w = hi - lo;
        let u = g.map_unary(
            v,
            move |t| ((t - lo) / w).clamp(0.0, 1.0),
            move |t| if t > lo && t < hi { 1.0 / w } else { 0.0 },
        );
        Ok((xv, u))
    }

    fn hard(&self, unit: &Tensor) -> Result<(Buckets, EncodedBatch)> {
        let k = self.k;
        let idx = unit
            .data()
            .iter()
            .map(|&v| ((v * k as f64).floor() as usize).min(k - 1))
            .collect();
        let b = Buckets::new(unit.shape().to_vec(), idx, k)?;
        let e = encode(&b, self.encoding)?;
        Ok((b, e))
    }

    /// Surrogate encoding of `x` with per-example loss and predictions.
    pub fn score(&self, x: &Tensor, labels: &[usize]) -> Result<(EncodedBatch, Vec<f64>, Vec<usize>)> {
        let mut g = Graph::new();
        let (_, u) = self.record(&mut g, x)?;
        let (_, enc) = self.hard(g.value(u))?;
        let (loss, pred) = self.model.loss_and_predictions(&enc.data, labels)?;
        Ok((enc, loss, pred))
    }
}

impl InputGradient for StraightThrough<'_> {
    fn loss_gradient(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let (xv, u) = self.record(&mut g, x)?;
        let (buckets, enc) = self.hard(g.value(u))?;
        let (loss, genc) = self.model.input_gradient(&enc.data, labels)?;
        let shape = buckets.shape();
        let (nc, plane) = (shape[0] * shape[1], shape[2] * shape[3]);
        let k = self.k;
        let gd = genc.data();
        let mut seed = vec![0.0; buckets.indices().len()];
        for c in 0..nc {
            for p in 0..plane {
                let b = buckets.indices()[c * plane + p];
                let at = |i: usize| gd[(c * k + i) * plane + p];
                let dl_dt = match self.encoding {
                    Encoding::Thermometer => at(b),
                    // One-hot level i is t_i - t_{i-1}.
                    Encoding::OneHot => at(b) - if b + 1 < k { at(b + 1) } else { 0.0 },
                };
                seed[c * plane + p] = -(k as f64) * dl_dt;
            }
        }
        let s = g.constant(Tensor::new(shape.to_vec(), seed)?);
        let y = g.mul(u, s)?;
        let total = g.sum(y);
        if !g.requires_grad(total) {
            return Ok((loss, Tensor::zeros(x.shape())));
        }
        g.backward(total)?;
        let grad = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((loss, grad))
    }
}

/// Sign-gradient PGD on raw pixels through a surrogate of the hidden
/// pipeline, in chunks of `chunk` examples. Loss and success are measured
/// on the surrogate; the raw images go to the defender for scoring.
pub fn bpda_attack(
    view: &AttackerView<'_>,
    surrogate: Surrogate<'_>,
    cfg: &AttackConfig,
    chunk: usize,
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    if chunk == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    let target = StraightThrough::new(view.model(), view.levels(), view.encoding(), surrogate)?;
    let raw = view.raw_data();
    let labels = view.labels();
    let n = labels.len();
    let mut parts = Vec::new();
    for (i, start) in (0..n).step_by(chunk).enumerate() {
        let end = (start + chunk).min(n);
        let x = raw.slice_outer(start, end)?;
        let y = &labels[start..end];
        let base = cfg.seed.wrapping_add((i as u64) << 32);
        let (best, _) = multi_restart(cfg.restarts, |r| {
            let adv = pgd_with(&target, &x, y, cfg, base.wrapping_add(r as u64), |_| {})?;
            let (_, loss, pred) = target.score(&adv, y)?;
            let success = pred.iter().zip(y).map(|(p, l)| p != l).collect();
            Ok((
                Candidate {
                    per_example: x.len() / y.len(),
                    rows: adv.into_data(),
                    loss,
                    success,
                },
                (),
            ))
        })?;
        let adv = Tensor::new(x.shape().to_vec(), best.rows)?;
        let (encoded, _, _) = target.score(&adv, y)?;
        parts.push(AdversarialBatch {
            encoded,
            buckets: None,
            raw: Some(adv),
            labels: y.to_vec(),
            loss: best.loss,
            success: best.success,
            traces: Vec::<Trace>::new(),
        });
    }
    concat(parts)
}
