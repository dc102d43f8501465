//! Logit-space projected gradient ascent over per-pixel bucket choices.
//!
//! Each pixel gets a logit per allowed bucket. A softmax at temperature `T`
//! turns the logits into a distribution over buckets, its cumulative sum is
//! a relaxed thermometer code, and the ascent runs on the logits. The
//! temperature shrinks each step; at the end every pixel takes its top
//! allowed bucket.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{compute_mask, multi_restart, AdversarialBatch, Ascent, AttackConfig, Candidate, Mask};
use crate::autodiff::{Graph, Reduction};
use crate::blind::AttackerView;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::preprocess::{encode, Buckets, EncodedBatch, Encoding, Pipeline};
use crate::tensor::Tensor;

/// Logit given to buckets outside the mask.
const BLOCKED: f64 = -1e9;

/// Relaxed loss and temperature at steps `0..=n` of one restart, plus the
/// per-example loss of its hardened choice.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub relaxed_loss: Vec<f64>,
    pub temperature: Vec<f64>,
    pub final_loss: Vec<f64>,
}

impl Trace {
    /// Fraction of steps where the relaxed loss did not go down.
    pub fn ascent_fraction(&self) -> f64 {
        let w = self.relaxed_loss.windows(2);
        let n = w.len();
        if n == 0 {
            return 1.0;
        }
        w.filter(|p| p[1] >= p[0]).count() as f64 / n as f64
    }
}

/// Runs `cfg.restarts` restarts on one batch and keeps, per example, the
/// best choice under the `(success, loss)` order.
pub fn lspga(
    model: &Model,
    encoding: Encoding,
    mask: &Mask,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    let [n, c, _, _] = match *mask.shape() {
        [n, c, h, w] => [n, c, h, w],
        _ => {
            return Err(Error::Dimension {
                op: "lspga mask",
                lhs: mask.shape().to_vec(),
                rhs: vec![0; 4],
            })
        }
    };
    if labels.len() != n {
        return Err(Error::Consistency(format!("{n} images but {} labels", labels.len())));
    }
    if model.architecture().in_channels() != c * mask.k() {
        return Err(Error::Config(format!(
            "model takes {} channels, encodings have {}",
            model.architecture().in_channels(),
            c * mask.k()
        )));
    }
    let (best, traces) = multi_restart(cfg.restarts, |r| {
        single_run(model, encoding, mask, labels, cfg, cfg.restart_seed(r))
    })?;
    let buckets = Buckets::new(mask.shape().to_vec(), best.rows, mask.k())?;
    Ok(AdversarialBatch {
        encoded: encode(&buckets, encoding)?,
        buckets: Some(buckets),
        raw: None,
        labels: labels.to_vec(),
        loss: best.loss,
        success: best.success,
        traces,
    })
}

fn single_run(
    model: &Model,
    encoding: Encoding,
    mask: &Mask,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<(Candidate<usize>, Trace)> {
    let k = mask.k();
    let mut shape = mask.shape().to_vec();
    shape.push(k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u: Vec<f64> = mask
        .as_slice()
        .iter()
        .map(|&ok| if ok { rng.sample(StandardNormal) } else { BLOCKED })
        .collect();
    let mut trace = Trace::default();
    for j in 0..=cfg.steps {
        let temperature = cfg.temperature(j);
        let mut g = Graph::new();
        let uv = g.param(Tensor::new(shape.clone(), u.clone())?);
        let soft = g.softmax_last(uv, temperature)?;
        let z = match encoding {
            Encoding::Thermometer => g.cumsum_last(soft)?,
            Encoding::OneHot => soft,
        };
        let z = g.last_to_channels(z)?;
        let (logits, _) = model.forward(&mut g, z, false)?;
        let loss = g.softmax_cross_entropy_with(logits, labels, Reduction::Sum)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Contract(format!("relaxed loss became {value} at step {j}")));
        }
        trace.relaxed_loss.push(value);
        trace.temperature.push(temperature);
        if j == cfg.steps {
            break;
        }
        g.backward(loss)?;
        let grad = g.grad(uv).expect("logits are tracked");
        for ((ui, &gi), &ok) in u.iter_mut().zip(grad.data()).zip(mask.as_slice()) {
            if ok {
                *ui += match cfg.ascent {
                    Ascent::Gradient => cfg.step_size * gi,
                    Ascent::Sign if gi == 0.0 => 0.0,
                    Ascent::Sign => cfg.step_size * gi.signum(),
                };
            }
        }
    }
    let rows = harden(&u, mask);
    let buckets = Buckets::new(mask.shape().to_vec(), rows, k)?;
    let enc = encode(&buckets, encoding)?;
    let (loss, pred) = model.loss_and_predictions(&enc.data, labels)?;
    let success = pred.iter().zip(labels).map(|(p, l)| p != l).collect();
    trace.final_loss = loss.clone();
    Ok((
        Candidate {
            per_example: mask.pixels() / labels.len(),
            rows: buckets.indices().to_vec(),
            loss,
            success,
        },
        trace,
    ))
}

/// Top allowed bucket per pixel; ties go to the lower index.
fn harden(u: &[f64], mask: &Mask) -> Vec<usize> {
    let k = mask.k();
    (0..mask.pixels())
        .map(|p| {
            let mut best = None;
            for b in 0..k {
                if !mask.allowed(p, b) {
                    continue;
                }
                match best {
                    Some(bb) if u[p * k + b] <= u[p * k + bb] => {}
                    _ => best = Some(b),
                }
            }
            best.expect("mask allows at least one bucket per pixel")
        })
        .collect()
}

/// Raw image whose pixels fall in the chosen buckets: each bucket centre,
/// clamped into the pixel's clipped epsilon interval.
pub fn realize_raw(buckets: &Buckets, raw: &Tensor, epsilon: f64) -> Result<Tensor> {
    if buckets.shape() != raw.shape() {
        return Err(Error::Dimension {
            op: "realize_raw",
            lhs: buckets.shape().to_vec(),
            rhs: raw.shape().to_vec(),
        });
    }
    let k = buckets.k() as f64;
    let data = buckets
        .indices()
        .iter()
        .zip(raw.data())
        .map(|(&b, &x)| {
            let lo = (x - epsilon).max(0.0);
            let hi = (x + epsilon).min(1.0);
            ((b as f64 + 0.5) / k).clamp(lo, hi)
        })
        .collect();
    Tensor::new(raw.shape().to_vec(), data)
}

/// Attack with the pipeline hidden: the attacker assumes plain quantization
/// of raw pixels, attacks the model on its own encodings, and hands over raw
/// images. Runs in chunks of `chunk` examples; chunk `i` uses seeds offset
/// by `i << 32`.
pub fn lspga_blind(view: &AttackerView<'_>, cfg: &AttackConfig, chunk: usize) -> Result<AdversarialBatch> {
    if chunk == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    let raw = view.raw_data();
    let labels = view.labels();
    let n = labels.len();
    let mut parts = Vec::new();
    for (i, start) in (0..n).step_by(chunk).enumerate() {
        let end = (start + chunk).min(n);
        let x = raw.slice_outer(start, end)?;
        let mask = compute_mask(&x, cfg.epsilon, view.levels())?;
        let chunk_cfg = AttackConfig {
            seed: cfg.seed.wrapping_add((i as u64) << 32),
            ..cfg.clone()
        };
        let mut adv = lspga(view.model(), view.encoding(), &mask, &labels[start..end], &chunk_cfg)?;
        let buckets = adv.buckets.as_ref().expect("lspga returns buckets");
        adv.raw = Some(realize_raw(buckets, &x, cfg.epsilon)?);
        parts.push(adv);
    }
    concat(parts)
}

/// Attack with full knowledge of the pipeline on one evaluation batch: the
/// mask covers every bucket the pipeline can reach within epsilon, and the
/// chosen encoding goes straight to the model.
pub fn lspga_full(
    model: &Model,
    pipeline: &Pipeline,
    raw: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    let encoding = pipeline
        .encoding()
        .ok_or_else(|| Error::Unsupported("pipeline does not end in an encoding".into()))?;
    let mask = Mask::from_range(&pipeline.bucket_range(raw, cfg.epsilon)?)?;
    lspga(model, encoding, &mask, labels, cfg)
}

/// Joins per-chunk results along the batch axis.
pub(crate) fn concat(parts: Vec<AdversarialBatch>) -> Result<AdversarialBatch> {
    let mut it = parts.into_iter();
    let Some(mut out) = it.next() else {
        return Err(Error::Contract("no batches to join".into()));
    };
    let mut enc = vec![out.encoded.data.clone()];
    let mut raws: Vec<Tensor> = out.raw.take().into_iter().collect();
    let mut buckets: Vec<Buckets> = out.buckets.take().into_iter().collect();
    for p in it {
        enc.push(p.encoded.data);
        raws.extend(p.raw);
        buckets.extend(p.buckets);
        out.labels.extend(p.labels);
        out.loss.extend(p.loss);
        out.success.extend(p.success);
        out.traces.extend(p.traces);
    }
    let n = out.labels.len();
    out.encoded = EncodedBatch {
        data: Tensor::concat_outer(&enc)?,
        discrete: out.encoded.discrete,
    };
    if !raws.is_empty() {
        out.raw = Some(Tensor::concat_outer(&raws)?);
    }
    if !buckets.is_empty() {
        let k = buckets[0].k();
        let mut shape = buckets[0].shape().to_vec();
        shape[0] = n;
        let idx = buckets.iter().flat_map(|b| b.indices().iter().copied()).collect();
        out.buckets = Some(Buckets::new(shape, idx, k)?);
    }
    Ok(out)
}
