//! Mini-batch SGD with momentum, optionally on batches partly replaced by
//! adversarial examples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{lspga, pgd_continuous, AttackConfig, AttackMode, Mask, WhiteBox};
use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Model};
use crate::preprocess::Pipeline;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Fraction of each batch replaced by adversarial examples.
    pub adv_mix: f64,
    pub attack: AttackConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 100,
            lr: 0.01,
            momentum: 0.9,
            adv_mix: 0.0,
            attack: AttackConfig {
                mode: AttackMode::FullWhiteBox,
                ..AttackConfig::default()
            },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.adv_mix) {
            return Err(Error::Config("adv_mix must lie in [0, 1]".into()));
        }
        if self.adv_mix > 0.0 {
            self.attack.validate()?;
        }
        Ok(())
    }
}

/// `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &Model, lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Tensor]) {
        for ((p, g), v) in model.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Training accuracy in percent over the epoch's batches.
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

/// Mean loss and number of correct predictions of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

/// Mean cross-entropy gradient of the parameters at `input`.
pub fn parameter_gradients(model: &Model, input: &Tensor, labels: &[usize]) -> Result<(StepStats, Vec<Tensor>)> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let (logits, pvars) = model.forward(&mut g, x, true)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    g.backward(loss)?;
    let correct = argmax_rows(g.value(logits))
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    let grads = pvars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((
        StepStats {
            loss: g.value(loss).item()?,
            correct,
        },
        grads,
    ))
}

/// One SGD step on an already encoded batch.
pub fn train_step(model: &mut Model, opt: &mut Sgd, input: &Tensor, labels: &[usize]) -> Result<StepStats> {
    let (stats, grads) = parameter_gradients(model, input, labels)?;
    opt.step(model, &grads);
    Ok(stats)
}

fn encode(pipeline: Option<&Pipeline>, raw: &Tensor) -> Result<Tensor> {
    match pipeline {
        Some(p) => Ok(p.apply(raw)?.data),
        None => Ok(raw.clone()),
    }
}

/// Result of [`adversarial_train_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialStep {
    pub stats: StepStats,
    /// Leading examples of the batch that were replaced.
    pub replaced: usize,
    /// Model input the step trained on.
    pub input: Tensor,
}

/// Builds the mixed batch: the first `ceil(adv_mix * n)` examples are
/// replaced by attacks on the current parameters. Encoded pipelines use
/// LS-PGA with the full-knowledge mask; otherwise sign PGD differentiates
/// through the (continuous) pipeline.
pub fn mixed_batch(
    model: &Model,
    raw: &Tensor,
    labels: &[usize],
    pipeline: Option<&Pipeline>,
    adv_mix: f64,
    attack: &AttackConfig,
) -> Result<(Tensor, usize)> {
    let n = labels.len();
    let m = ((adv_mix * n as f64).ceil() as usize).min(n);
    if m == 0 {
        return Ok((encode(pipeline, raw)?, 0));
    }
    match pipeline.and_then(|p| p.encoding().map(|e| (p, e))) {
        Some((p, encoding)) => {
            let clean = p.apply(raw)?.data;
            let mask = Mask::from_range(&p.bucket_range(raw, attack.epsilon)?)?.slice_outer(0, m)?;
            let adv = lspga(model, encoding, &mask, &labels[..m], attack)?;
            let rest = clean.slice_outer(m, n)?;
            Ok((Tensor::concat_outer(&[adv.encoded.data, rest])?, m))
        }
        None => {
            let target = WhiteBox::new(model, pipeline, AttackMode::FullWhiteBox)?;
            let head = raw.slice_outer(0, m)?;
            let adv = pgd_continuous(&target, &head, &labels[..m], attack)?;
            let mixed = Tensor::concat_outer(&[adv, raw.slice_outer(m, n)?])?;
            Ok((encode(pipeline, &mixed)?, m))
        }
    }
}

pub fn adversarial_train_step(
    model: &mut Model,
    opt: &mut Sgd,
    raw: &Tensor,
    labels: &[usize],
    pipeline: Option<&Pipeline>,
    adv_mix: f64,
    attack: &AttackConfig,
) -> Result<AdversarialStep> {
    let (input, replaced) = mixed_batch(model, raw, labels, pipeline, adv_mix, attack)?;
    let stats = train_step(model, opt, &input, labels)?;
    Ok(AdversarialStep { stats, replaced, input })
}

pub fn train(model: &mut Model, data: &Dataset, pipeline: Option<&Pipeline>, cfg: &TrainConfig) -> Result<History> {
    train_with(model, data, pipeline, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &mut Model,
    data: &Dataset,
    pipeline: Option<&Pipeline>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    model.architecture().check_pipeline(pipeline, data.channels())?;
    let mut opt = Sgd::new(model, cfg.lr, cfg.momentum);
    let mut history = History::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (step, rows) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.select(rows)?;
            let stats = if cfg.adv_mix > 0.0 {
                let attack = AttackConfig {
                    seed: cfg.attack.seed.wrapping_add(((epoch as u64) << 40) ^ step as u64),
                    ..cfg.attack.clone()
                };
                adversarial_train_step(
                    model,
                    &mut opt,
                    &batch.images,
                    &batch.labels,
                    pipeline,
                    cfg.adv_mix,
                    &attack,
                )?
                .stats
            } else {
                let input = encode(pipeline, &batch.images)?;
                train_step(model, &mut opt, &input, &batch.labels)?
            };
            if !stats.loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("loss became {} at step {step}", stats.loss),
                });
            }
            loss_sum += stats.loss * rows.len() as f64;
            correct += stats.correct;
            seen += rows.len();
        }
        let s = EpochStats {
            epoch,
            loss: loss_sum / seen as f64,
            accuracy: 100.0 * correct as f64 / seen as f64,
        };
        on_epoch(&s);
        history.epochs.push(s);
    }
    Ok(history)
}

/// Predictions over `data` in consecutive batches of `eval_batch_size`.
/// Each batch is encoded on its own, so batch statistics depend on the
/// batch size.
pub fn predictions(
    model: &Model,
    data: &Dataset,
    pipeline: Option<&Pipeline>,
    eval_batch_size: usize,
) -> Result<Vec<usize>> {
    if eval_batch_size == 0 {
        return Err(Error::Config("evaluation batch size must be positive".into()));
    }
    let mut out = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(eval_batch_size) {
        let end = (start + eval_batch_size).min(data.len());
        let x = encode(pipeline, &data.images.slice_outer(start, end)?)?;
        out.extend(model.predict(&x)?);
    }
    Ok(out)
}

/// Top-1 accuracy in percent.
pub fn evaluate_accuracy(
    model: &Model,
    data: &Dataset,
    pipeline: Option<&Pipeline>,
    eval_batch_size: usize,
) -> Result<f64> {
    let pred = predictions(model, data, pipeline, eval_batch_size)?;
    Ok(accuracy(&pred, &data.labels))
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::compute_mask;
    use crate::model::{Architecture, Layer, NUM_CLASSES};
    use crate::preprocess::quantize;

    fn arch(cin: usize) -> Architecture {
        Architecture {
            input: [cin, 4, 4],
            layers: vec![
                Layer::conv(3, 4),
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense { out: NUM_CLASSES },
            ],
        }
    }

    /// Ten classes of 4x4 images, class `c` brightening pixel `c`.
    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Tensor::uniform(&[n, 1, 4, 4], 0.0, 0.3, &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
        let mut img = noise.into_data();
        for (i, &l) in labels.iter().enumerate() {
            img[i * 16 + l] = 0.9;
        }
        Dataset::new(Tensor::new(vec![n, 1, 4, 4], img).unwrap(), labels, "toy").unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 20,
            lr: 0.05,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_data(60, 0);
        let run = || {
            let mut m = Model::build(arch(1), 3).unwrap();
            let h = train(&mut m, &data, None, &cfg(2)).unwrap();
            (m, h)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(ha.epochs.len(), 2);
    }

    #[test]
    fn one_batch_is_memorized() {
        let data = toy_data(20, 1);
        let mut m = Model::build(arch(1), 0).unwrap();
        let mut opt = Sgd::new(&m, 0.05, 0.9);
        for _ in 0..100 {
            train_step(&mut m, &mut opt, &data.images, &data.labels).unwrap();
        }
        assert_eq!(evaluate_accuracy(&m, &data, None, 20).unwrap(), 100.0);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        // Labels independent of the pixels and balanced: any fixed
        // classifier scores 10% in expectation.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1000;
        let images = Tensor::uniform(&[n, 1, 4, 4], 0.0, 1.0, &mut rng);
        let mut labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
        labels.shuffle(&mut rng);
        let data = Dataset::new(images, labels, "noise").unwrap();
        let mut accs = Vec::new();
        for seed in 0..20 {
            let m = Model::build(arch(1), seed).unwrap();
            accs.push(evaluate_accuracy(&m, &data, None, 100).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 10.0).abs() <= 3.0, "{mean}");
        let m = Model::build(arch(1), 0).unwrap();
        assert_eq!(
            evaluate_accuracy(&m, &data, None, 100).unwrap(),
            evaluate_accuracy(&m, &data, None, 100).unwrap()
        );
    }

    #[test]
    fn divergence_reports_epoch() {
        let data = toy_data(20, 3);
        let mut m = Model::build(arch(1), 0).unwrap();
        m.params_mut()[0].data_mut()[0] = f64::NAN;
        let err = train(&mut m, &data, None, &cfg(1)).unwrap_err();
        assert!(matches!(err, Error::Training { epoch: 0, .. }), "{err}");
    }

    #[test]
    fn zero_mix_matches_clean_step() {
        let data = toy_data(20, 4);
        let p = Pipeline::thermometer(5).unwrap();
        let mut a = Model::build(arch(5), 1).unwrap();
        let mut b = a.clone();
        let (mut oa, mut ob) = (Sgd::new(&a, 0.05, 0.9), Sgd::new(&b, 0.05, 0.9));
        let attack = AttackConfig::default();
        adversarial_train_step(&mut a, &mut oa, &data.images, &data.labels, Some(&p), 0.0, &attack).unwrap();
        let input = p.apply(&data.images).unwrap().data;
        train_step(&mut b, &mut ob, &input, &data.labels).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_mix_replaces_every_example_within_budget() {
        let data = toy_data(10, 5);
        let p = Pipeline::thermometer(5).unwrap();
        let m = Model::build(arch(5), 1).unwrap();
        let attack = AttackConfig {
            epsilon: 0.2,
            ..AttackConfig::default()
        };
        let (input, replaced) = mixed_batch(&m, &data.images, &data.labels, Some(&p), 1.0, &attack).unwrap();
        assert_eq!(replaced, 10);
        let mask = compute_mask(&data.images, 0.2, 5).unwrap();
        // Recover buckets from the thermometer code: b = k - (number of ones).
        let plane = 16;
        let idx: Vec<usize> = (0..10 * plane)
            .map(|q| {
                let (i, pix) = (q / plane, q % plane);
                let ones: f64 = (0..5).map(|l| input.data()[(i * 5 + l) * plane + pix]).sum();
                5 - ones as usize
            })
            .collect();
        let b = crate::preprocess::Buckets::new(vec![10, 1, 4, 4], idx, 5).unwrap();
        assert!(mask.contains(&b));
        assert_ne!(b, quantize(&data.images, 5).unwrap());
        let (_, half) = mixed_batch(&m, &data.images, &data.labels, Some(&p), 0.25, &attack).unwrap();
        assert_eq!(half, 3);
    }

    #[test]
    fn raw_model_mixes_with_pgd() {
        let data = toy_data(10, 6);
        let m = Model::build(arch(1), 1).unwrap();
        let attack = AttackConfig {
            epsilon: 0.1,
            step_size: 0.05,
            ..AttackConfig::default()
        };
        let (input, replaced) = mixed_batch(&m, &data.images, &data.labels, None, 0.5, &attack).unwrap();
        assert_eq!(replaced, 5);
        assert!(input.max_abs_diff(&data.images).unwrap() <= 0.1 + 1e-12);
        let tail = input.slice_outer(5, 10).unwrap();
        assert_eq!(tail, data.images.slice_outer(5, 10).unwrap());
    }

    #[test]
    fn a_step_lowers_the_frozen_batch_loss() {
        let p = Pipeline::thermometer(5).unwrap();
        let attack = AttackConfig::default();
        let mut lowered = 0;
        for trial in 0..100u64 {
            let data = toy_data(10, 100 + trial);
            let mut m = Model::build(arch(5), trial).unwrap();
            let (input, _) = mixed_batch(&m, &data.images, &data.labels, Some(&p), 0.5, &attack).unwrap();
            let before = parameter_gradients(&m, &input, &data.labels).unwrap().0.loss;
            let mut opt = Sgd::new(&m, 0.01, 0.0);
            train_step(&mut m, &mut opt, &input, &data.labels).unwrap();
            let after = parameter_gradients(&m, &input, &data.labels).unwrap().0.loss;
            lowered += usize::from(after < before);
        }
        assert!(lowered >= 90, "{lowered}");
    }
}
