//! Robustness measurements: clean and attacked accuracy scored by the
//! defender, the attacked-accuracy ratio, sweeps, pixel histograms and
//! report files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::attacks::{
    bpda_attack, fgsm, lspga_blind, lspga_full, pgd_continuous, AttackConfig, AttackKind, AttackMode, Surrogate,
    WhiteBox,
};
use crate::blind::{AttackerView, BlindGate, BlindKey, TrainingAlgorithm};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::preprocess::Pipeline;
use crate::tensor::Tensor;
use crate::train::accuracy;

pub const HISTOGRAM_BINS: usize = 256;

/// `y / (x + y) * 100` for clean accuracy `x` and attacked accuracy `y`.
pub fn alpha_ratio(clean: f64, attacked: f64) -> Result<f64> {
    if !(clean >= 0.0 && attacked >= 0.0) {
        return Err(Error::Range(format!(
            "accuracies must be non-negative, got {clean} and {attacked}"
        )));
    }
    if clean + attacked == 0.0 {
        return Err(Error::UndefinedRatio);
    }
    Ok(attacked / (clean + attacked) * 100.0)
}

/// The deployed model as the defender runs it: raw pixels go through the
/// gated pipeline (if any) in evaluation batches, then the model.
#[derive(Clone, Copy, Debug)]
pub struct Defender<'a> {
    pub model: &'a Model,
    gate: Option<(&'a BlindGate, &'a BlindKey)>,
    pub training: TrainingAlgorithm,
}

impl<'a> Defender<'a> {
    /// A model fed raw pixels.
    pub fn undefended(model: &'a Model, training: TrainingAlgorithm) -> Self {
        Defender {
            model,
            gate: None,
            training,
        }
    }

    /// A model behind `gate`, operated with `key`.
    pub fn gated(model: &'a Model, training: TrainingAlgorithm, gate: &'a BlindGate, key: &'a BlindKey) -> Self {
        Defender {
            model,
            gate: Some((gate, key)),
            training,
        }
    }

    pub fn pipeline(&self) -> Result<Option<&'a Pipeline>> {
        self.gate.map(|(g, k)| g.unlock(k)).transpose()
    }

    /// Transform invocations of the gated pipeline so far.
    pub fn invocations(&self) -> u64 {
        self.gate.map_or(0, |(g, _)| g.invocations())
    }

    pub fn predict(&self, raw: &Tensor, eval_batch_size: usize) -> Result<Vec<usize>> {
        check_batch_size(eval_batch_size)?;
        let n = raw.shape().first().copied().unwrap_or(0);
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(eval_batch_size) {
            let x = raw.slice_outer(start, (start + eval_batch_size).min(n))?;
            let input = match self.gate {
                Some((g, k)) => g.apply(k, &x)?.data,
                None => x,
            };
            out.extend(self.model.predict(&input)?);
        }
        Ok(out)
    }

    pub fn clean_accuracy(&self, data: &Dataset, eval_batch_size: usize) -> Result<f64> {
        Ok(accuracy(&self.predict(&data.images, eval_batch_size)?, &data.labels))
    }

    /// What the attacker gets to see in the blind setting.
    pub fn attacker_view(&self, data: &'a Dataset, eval_batch_size: usize) -> Result<AttackerView<'a>> {
        let (gate, key) = self
            .gate
            .ok_or_else(|| Error::Unsupported("a blind attack needs a gated pipeline".into()))?;
        AttackerView::new(
            self.model,
            self.training,
            gate,
            key,
            &data.images,
            &data.labels,
            eval_batch_size,
        )
    }
}

fn check_batch_size(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("evaluation batch size must be positive".into()));
    }
    Ok(())
}

/// Result of one attack run over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackOutcome {
    pub kind: AttackKind,
    pub mode: AttackMode,
    #[serde(serialize_with = "fixed4")]
    pub epsilon: f64,
    pub examples: usize,
    /// Accuracy on the adversarial inputs as the defender scores them.
    #[serde(serialize_with = "fixed4")]
    pub attack_acc: f64,
    /// Accuracy the attacker believed it left, when it tracks one.
    #[serde(serialize_with = "fixed4_opt")]
    pub attacker_acc: Option<f64>,
    /// Pipeline transform invocations while the attack itself ran.
    pub pipeline_calls: u64,
    #[serde(skip)]
    pub predictions: Vec<usize>,
}

fn chunk_seed(cfg: &AttackConfig, i: usize) -> AttackConfig {
    AttackConfig {
        seed: cfg.seed.wrapping_add((i as u64) << 32),
        ..cfg.clone()
    }
}

fn fgsm_config(cfg: &AttackConfig) -> AttackConfig {
    AttackConfig {
        steps: 1,
        step_size: cfg.epsilon,
        random_start: false,
        restarts: 1,
        ..cfg.clone()
    }
}

/// Runs `kind` under `cfg.mode` on `data` in chunks of `eval_batch_size`
/// and scores the result the way the defender would.
///
/// Raw-pixel attacks hand their images to the defender. A full-knowledge
/// LS-PGA attack picks encodings, which go straight to the model.
pub fn run_attack(
    def: &Defender<'_>,
    data: &Dataset,
    kind: AttackKind,
    cfg: &AttackConfig,
    eval_batch_size: usize,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    check_batch_size(eval_batch_size)?;
    let n = data.len();
    let mut attacker_acc = None;
    let (predictions, pipeline_calls) = match (kind, cfg.mode) {
        (AttackKind::Lspga, AttackMode::Blind) => {
            let view = def.attacker_view(data, eval_batch_size)?;
            let before = def.invocations();
            let adv = lspga_blind(&view, cfg, eval_batch_size)?;
            let calls = def.invocations() - before;
            attacker_acc = Some(adv.accuracy());
            let raw = adv.raw.expect("blind attack realizes raw images");
            (def.predict(&raw, eval_batch_size)?, calls)
        }
        (AttackKind::Lspga, AttackMode::FullWhiteBox) => {
            let pipeline = def
                .pipeline()?
                .ok_or_else(|| Error::Unsupported("LS-PGA needs a pipeline that ends in an encoding".into()))?;
            let mut pred = Vec::with_capacity(n);
            let mut hits = 0;
            for (i, start) in (0..n).step_by(eval_batch_size).enumerate() {
                let end = (start + eval_batch_size).min(n);
                let x = data.images.slice_outer(start, end)?;
                let adv = lspga_full(def.model, pipeline, &x, &data.labels[start..end], &chunk_seed(cfg, i))?;
                hits += adv.success.len() - adv.success_count();
                pred.extend(def.model.predict(&adv.encoded.data)?);
            }
            attacker_acc = Some(100.0 * hits as f64 / n.max(1) as f64);
            (pred, 0)
        }
        (AttackKind::Lspga, AttackMode::Bpda) => {
            return Err(Error::Unsupported(
                "the straight-through attack perturbs raw pixels; use pgd or fgsm".into(),
            ))
        }
        (_, AttackMode::Bpda) => {
            let view = def.attacker_view(data, eval_batch_size)?;
            let cfg = if kind == AttackKind::Fgsm {
                fgsm_config(cfg)
            } else {
                cfg.clone()
            };
            let before = def.invocations();
            let adv = bpda_attack(&view, Surrogate::Identity, &cfg, eval_batch_size)?;
            let calls = def.invocations() - before;
            attacker_acc = Some(adv.accuracy());
            let raw = adv.raw.expect("straight-through attack returns raw images");
            (def.predict(&raw, eval_batch_size)?, calls)
        }
        (_, mode) => {
            let pipeline = def.pipeline()?;
            let target = WhiteBox::new(def.model, pipeline, mode)?;
            let mut parts = Vec::new();
            for (i, start) in (0..n).step_by(eval_batch_size).enumerate() {
                let end = (start + eval_batch_size).min(n);
                let x = data.images.slice_outer(start, end)?;
                let y = &data.labels[start..end];
                parts.push(match kind {
                    AttackKind::Fgsm => fgsm(&target, &x, y, cfg.epsilon)?,
                    _ => pgd_continuous(&target, &x, y, &chunk_seed(cfg, i))?,
                });
            }
            let raw = Tensor::concat_outer(&parts)?;
            (def.predict(&raw, eval_batch_size)?, 0)
        }
    };
    Ok(AttackOutcome {
        kind,
        mode: cfg.mode,
        epsilon: cfg.epsilon,
        examples: n,
        attack_acc: accuracy(&predictions, &data.labels),
        attacker_acc,
        pipeline_calls,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonRecord {
    #[serde(serialize_with = "fixed4")]
    pub epsilon: f64,
    #[serde(serialize_with = "fixed4")]
    pub attack_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch_size: usize,
    #[serde(serialize_with = "fixed4")]
    pub attack_acc: f64,
    #[serde(serialize_with = "fixed4")]
    pub clean_acc: f64,
}

/// Attacked accuracy at each budget, every other attack setting fixed.
pub fn epsilon_sweep(
    def: &Defender<'_>,
    data: &Dataset,
    kind: AttackKind,
    epsilons: &[f64],
    base: &AttackConfig,
    eval_batch_size: usize,
) -> Result<Vec<EpsilonRecord>> {
    if epsilons
        .windows(2)
        .any(|w| w[0].is_nan() || w[1].is_nan() || w[0] > w[1])
    {
        return Err(Error::Config("epsilon list must be sorted ascending".into()));
    }
    epsilons
        .iter()
        .map(|&epsilon| {
            let cfg = AttackConfig {
                epsilon,
                ..base.clone()
            };
            let out = run_attack(def, data, kind, &cfg, eval_batch_size)?;
            Ok(EpsilonRecord {
                epsilon,
                attack_acc: out.attack_acc,
            })
        })
        .collect()
}

/// Clean and attacked accuracy when the defender evaluates in batches of
/// each size; the attack works on the same partition.
pub fn batch_size_sweep(
    def: &Defender<'_>,
    data: &Dataset,
    kind: AttackKind,
    cfg: &AttackConfig,
    sizes: &[usize],
) -> Result<Vec<BatchRecord>> {
    sizes
        .iter()
        .map(|&batch_size| {
            check_batch_size(batch_size)?;
            Ok(BatchRecord {
                batch_size,
                clean_acc: def.clean_accuracy(data, batch_size)?,
                attack_acc: run_attack(def, data, kind, cfg, batch_size)?.attack_acc,
            })
        })
        .collect()
}

/// Pixel frequency distribution over 256 uniform bins.
///
/// Values already inside `[0, 1]` are binned as they are; anything else is
/// min-max rescaled to `[0, 1]` for binning only. `range` records the
/// interval that was mapped onto `[0, 1]`; `mean` and `std` describe the
/// unscaled values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub label: String,
    #[serde(serialize_with = "fixed4_pair")]
    pub range: [f64; 2],
    pub counts: Vec<u64>,
    #[serde(serialize_with = "fixed4")]
    pub mean: f64,
    #[serde(serialize_with = "fixed4")]
    pub std: f64,
}

impl Histogram {
    /// Bin edges in binning units.
    pub fn edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..=n).map(|i| i as f64 / n as f64).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Histogram of `batch`, optionally after running it through `after`.
pub fn pixel_histogram(batch: &Tensor, after: Option<&Pipeline>, label: impl Into<String>) -> Result<Histogram> {
    let values = match after {
        Some(p) => p.apply(batch)?.data,
        None => batch.clone(),
    };
    let v = values.data();
    if v.is_empty() {
        return Err(Error::Contract("histogram of an empty batch".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Range("histogram of non-finite values".into()));
    }
    let (min, max) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    });
    let range = if min >= 0.0 && max <= 1.0 {
        [0.0, 1.0]
    } else {
        [min, max]
    };
    let width = range[1] - range[0];
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &x in v {
        let unit = if width > 0.0 { (x - range[0]) / width } else { 0.0 };
        let bin = ((unit * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    Ok(Histogram {
        label: label.into(),
        range,
        counts,
        mean: values.mean(),
        std: values.std(),
    })
}

/// Everything an evaluation run produces. The ratio is derived from the two
/// accuracies whenever it is needed and checked when a report is read back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ReportWire", try_from = "ReportWire")]
pub struct EvalReport {
    pub clean_acc: f64,
    pub attack_acc: f64,
    /// Resolved configuration of the run.
    pub config: serde_json::Value,
    pub epsilon_sweep: Vec<EpsilonRecord>,
    pub batch_sweep: Vec<BatchRecord>,
    pub histograms: Vec<Histogram>,
}

impl EvalReport {
    pub fn alpha(&self) -> Result<f64> {
        alpha_ratio(self.clean_acc, self.attack_acc)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportWire {
    #[serde(serialize_with = "fixed4")]
    clean_acc: f64,
    #[serde(serialize_with = "fixed4")]
    attack_acc: f64,
    #[serde(serialize_with = "fixed4_opt")]
    alpha: Option<f64>,
    config: serde_json::Value,
    epsilon_sweep: Vec<EpsilonRecord>,
    batch_sweep: Vec<BatchRecord>,
    histograms: Vec<Histogram>,
}

fn round4(x: f64) -> f64 {
    format!("{x:.4}").parse().unwrap_or(x)
}

impl From<EvalReport> for ReportWire {
    fn from(r: EvalReport) -> Self {
        // The ratio of the printed accuracies, so a reader recomputing it
        // from the file gets the printed value.
        let alpha = alpha_ratio(round4(r.clean_acc), round4(r.attack_acc)).ok();
        ReportWire {
            clean_acc: r.clean_acc,
            attack_acc: r.attack_acc,
            alpha,
            config: r.config,
            epsilon_sweep: r.epsilon_sweep,
            batch_sweep: r.batch_sweep,
            histograms: r.histograms,
        }
    }
}

impl TryFrom<ReportWire> for EvalReport {
    type Error = Error;

    fn try_from(w: ReportWire) -> Result<Self> {
        let expected = alpha_ratio(w.clean_acc, w.attack_acc).ok();
        let agrees = match (w.alpha, expected) {
            (Some(a), Some(b)) => (a - b).abs() <= 5.1e-5,
            (None, None) => true,
            _ => false,
        };
        if !agrees {
            return Err(Error::Consistency(format!(
                "alpha {:?} does not match accuracies {} and {}",
                w.alpha, w.clean_acc, w.attack_acc
            )));
        }
        Ok(EvalReport {
            clean_acc: w.clean_acc,
            attack_acc: w.attack_acc,
            config: w.config,
            epsilon_sweep: w.epsilon_sweep,
            batch_sweep: w.batch_sweep,
            histograms: w.histograms,
        })
    }
}

fn fixed4<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    let text = if x.is_finite() {
        format!("{x:.4}")
    } else {
        "null".into()
    };
    RawValue::from_string(text)
        .map_err(serde::ser::Error::custom)?
        .serialize(s)
}

fn fixed4_opt<S: Serializer>(x: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match x {
        Some(v) => fixed4(v, s),
        None => s.serialize_none(),
    }
}

fn fixed4_pair<S: Serializer>(x: &[f64; 2], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeTuple;
    struct F(f64);
    impl Serialize for F {
        fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
            fixed4(&self.0, s)
        }
    }
    let mut t = s.serialize_tuple(2)?;
    t.serialize_element(&F(x[0]))?;
    t.serialize_element(&F(x[1]))?;
    t.end()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::Config(format!("unknown report format {s:?}"))),
        }
    }
}

pub fn report_json(report: &EvalReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn parse_report_json(text: &str) -> Result<EvalReport> {
    serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))
}

/// One row per sweep record, epsilon sweep first.
pub fn report_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["sweep", "epsilon", "batch_size", "clean_acc", "attack_acc"])
        .map_err(err)?;
    for r in &report.epsilon_sweep {
        w.write_record([
            "epsilon".to_string(),
            format!("{:.4}", r.epsilon),
            String::new(),
            String::new(),
            format!("{:.4}", r.attack_acc),
        ])
        .map_err(err)?;
    }
    for r in &report.batch_sweep {
        w.write_record([
            "batch_size".to_string(),
            String::new(),
            r.batch_size.to_string(),
            format!("{:.4}", r.clean_acc),
            format!("{:.4}", r.attack_acc),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Json => report_json(report)?,
        ReportFormat::Csv => report_csv(report)?,
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
