//! Input pre-processing: filtering, batch normalization, smoothing,
//! quantization and level encodings.
//!
//! Images are `[n, c, h, w]` tensors. Encodings expand each channel into `k`
//! channels, channel `c * k + i` holding level `i` of source channel `c`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{smooth_planes, WindowReduce};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LEVELS: usize = 15;
pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_FILTER_SCALE: f64 = 4.0;
/// Range that canonical pipelines quantize batch-normalized values over.
pub const DEFAULT_NORMALIZED_RANGE: [f64; 2] = [-3.0, 3.0];
/// How far a soft level distribution may be from summing to one.
pub const NORMALIZATION_TOL: f64 = 1e-6;

const FILTER_CENTER: f64 = 0.5;

fn default_scale() -> f64 {
    DEFAULT_FILTER_SCALE
}

fn default_eps() -> f64 {
    DEFAULT_BN_EPS
}

fn default_window() -> usize {
    3
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothKind {
    Max,
    Avg,
}

impl From<SmoothKind> for WindowReduce {
    fn from(k: SmoothKind) -> Self {
        match k {
            SmoothKind::Max => WindowReduce::Max,
            SmoothKind::Avg => WindowReduce::Mean,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    OneHot,
    Thermometer,
}

/// One pipeline stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    TanhFilter {
        #[serde(default = "default_scale")]
        scale: f64,
    },
    SigmoidFilter {
        #[serde(default = "default_scale")]
        scale: f64,
    },
    BatchNorm {
        #[serde(default = "default_eps")]
        eps: f64,
    },
    MaxSmooth {
        #[serde(default = "default_window")]
        window: usize,
    },
    AvgSmooth {
        #[serde(default = "default_window")]
        window: usize,
    },
    /// `range` maps `[lo, hi]` onto the unit interval (clamping) before
    /// bucketing; without it inputs must already lie in `[0, 1]`.
    Quantize {
        k: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        range: Option<[f64; 2]>,
    },
    OneHot {
        k: usize,
    },
    Thermometer {
        k: usize,
    },
}

impl Transform {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::Config(format!("{self:?}: {why}")));
        match *self {
            Transform::TanhFilter { scale } | Transform::SigmoidFilter { scale } => {
                if !(scale > 0.0 && scale.is_finite()) {
                    return bad("scale must be positive".into());
                }
            }
            Transform::BatchNorm { eps } => {
                if !(eps > 0.0 && eps.is_finite()) {
                    return bad("eps must be positive".into());
                }
            }
            Transform::MaxSmooth { window } | Transform::AvgSmooth { window } => {
                if window < 3 || window % 2 == 0 {
                    return bad("window must be odd and >= 3".into());
                }
            }
            Transform::Quantize { k, range } => {
                if k < 2 {
                    return bad("k must be >= 2".into());
                }
                if let Some([lo, hi]) = range {
                    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                        return bad("range must satisfy lo < hi".into());
                    }
                }
            }
            Transform::OneHot { k } | Transform::Thermometer { k } => {
                if k < 2 {
                    return bad("k must be >= 2".into());
                }
            }
        }
        Ok(())
    }

    fn encoding(&self) -> Option<(Encoding, usize)> {
        match *self {
            Transform::OneHot { k } => Some((Encoding::OneHot, k)),
            Transform::Thermometer { k } => Some((Encoding::Thermometer, k)),
            _ => None,
        }
    }

    /// Applies a continuous stage. `frozen` replaces the batch statistics of
    /// a batch-norm stage.
    fn apply_continuous(&self, x: &Tensor, frozen: Option<(f64, f64)>) -> Result<(Tensor, Option<(f64, f64)>)> {
        Ok(match *self {
            Transform::TanhFilter { scale } => (tanh_filter_with(x, scale), None),
            Transform::SigmoidFilter { scale } => (sigmoid_filter(x, scale), None),
            Transform::BatchNorm { eps } => {
                let stats = frozen.unwrap_or_else(|| (x.mean(), x.std()));
                (normalize_with(x, stats, eps), Some(stats))
            }
            Transform::MaxSmooth { window } => (smooth(x, SmoothKind::Max, window)?, None),
            Transform::AvgSmooth { window } => (smooth(x, SmoothKind::Avg, window)?, None),
            _ => unreachable!("discrete stage {self:?} applied as continuous"),
        })
    }
}

/// Output of a pipeline or an encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub data: Tensor,
    /// Every entry is exactly 0 or 1.
    pub discrete: bool,
}

/// Quantization bucket per pixel, shaped like the quantized tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Buckets {
    shape: Vec<usize>,
    indices: Vec<usize>,
    k: usize,
}

impl Buckets {
    pub fn new(shape: Vec<usize>, indices: Vec<usize>, k: usize) -> Result<Self> {
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::Dimension {
                op: "buckets",
                lhs: shape,
                rhs: vec![indices.len()],
            });
        }
        if let Some(&b) = indices.iter().find(|&&b| b >= k) {
            return Err(Error::Index(format!("bucket {b} with k = {k}")));
        }
        Ok(Buckets { shape, indices, k })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// `tanh(s (x - 0.5))` rescaled so that 0 and 1 stay fixed.
pub fn tanh_filter(batch: &Tensor) -> Tensor {
    tanh_filter_with(batch, DEFAULT_FILTER_SCALE)
}

pub fn tanh_filter_with(batch: &Tensor, scale: f64) -> Tensor {
    let lo = (-scale * FILTER_CENTER).tanh();
    let hi = (scale * (1.0 - FILTER_CENTER)).tanh();
    batch.map(|x| ((scale * (x - FILTER_CENTER)).tanh() - lo) / (hi - lo))
}

/// Logistic counterpart of [`tanh_filter_with`].
pub fn sigmoid_filter(batch: &Tensor, scale: f64) -> Tensor {
    let s = |v: f64| 1.0 / (1.0 + (-v).exp());
    let lo = s(-scale * FILTER_CENTER);
    let hi = s(scale * (1.0 - FILTER_CENTER));
    batch.map(|x| (s(scale * (x - FILTER_CENTER)) - lo) / (hi - lo))
}

/// `(x - mean) / (std + eps)` with one population mean and std per batch.
pub fn batch_normalize(batch: &Tensor, eps: f64) -> Tensor {
    normalize_with(batch, (batch.mean(), batch.std()), eps)
}

fn normalize_with(batch: &Tensor, (mean, std): (f64, f64), eps: f64) -> Tensor {
    batch.map(|x| (x - mean) / (std + eps))
}

/// Edge-replicated sliding-window max or mean over `[n, c, h, w]`.
pub fn smooth(batch: &Tensor, kind: SmoothKind, window: usize) -> Result<Tensor> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::Config(format!(
            "smoothing window must be odd and >= 3, got {window}"
        )));
    }
    let [n, c, h, w] = dims4(batch)?;
    let (out, _) = smooth_planes(batch.data(), n * c, h, w, window, kind.into());
    Tensor::new(batch.shape().to_vec(), out)
}

fn bucket_of(x: f64, k: usize) -> usize {
    ((x * k as f64).floor() as usize).min(k - 1)
}

/// `b = min(floor(x k), k - 1)` for values in `[0, 1]`.
pub fn quantize(batch: &Tensor, k: usize) -> Result<Buckets> {
    if k < 2 {
        return Err(Error::Config(format!("k must be >= 2, got {k}")));
    }
    if let Some(&x) = batch.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Range(format!("quantize input {x} outside [0, 1]")));
    }
    let indices = batch.data().iter().map(|&x| bucket_of(x, k)).collect();
    Buckets::new(batch.shape().to_vec(), indices, k)
}

/// Maps `[lo, hi]` affinely onto `[0, 1]`, clamping, then quantizes.
pub fn quantize_range(batch: &Tensor, k: usize, [lo, hi]: [f64; 2]) -> Result<Buckets> {
    quantize(&rescale(batch, [lo, hi]), k)
}

fn rescale(batch: &Tensor, [lo, hi]: [f64; 2]) -> Tensor {
    batch.map(|x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// Representative value `(b + 0.5) / k` of each bucket.
pub fn decode(buckets: &Buckets) -> Tensor {
    let k = buckets.k as f64;
    let data = buckets.indices.iter().map(|&b| (b as f64 + 0.5) / k).collect();
    Tensor::new(buckets.shape.clone(), data).expect("bucket shape")
}

pub fn one_hot(buckets: &Buckets) -> Result<EncodedBatch> {
    encode(buckets, Encoding::OneHot)
}

/// Level `i` is 1 iff `i >= b`.
pub fn thermometer_encode(buckets: &Buckets) -> Result<EncodedBatch> {
    encode(buckets, Encoding::Thermometer)
}

pub fn encode(buckets: &Buckets, encoding: Encoding) -> Result<EncodedBatch> {
    let n = buckets.shape.first().copied().unwrap_or(0);
    let [_, c, h, w] = dims4_shape(&buckets.shape)?;
    let k = buckets.k;
    let plane = h * w;
    let mut out = vec![0.0; buckets.indices.len() * k];
    for nc in 0..n * c {
        for p in 0..plane {
            let b = buckets.indices[nc * plane + p];
            match encoding {
                Encoding::OneHot => out[(nc * k + b) * plane + p] = 1.0,
                Encoding::Thermometer => {
                    for i in b..k {
                        out[(nc * k + i) * plane + p] = 1.0;
                    }
                }
            }
        }
    }
    Ok(EncodedBatch {
        data: Tensor::new(vec![n, c * k, h, w], out)?,
        discrete: true,
    })
}

/// Cumulative sums `t_i = sum_{j <= i} soft_j` along the last axis, so a
/// one-hot row at `b` gives the thermometer code of `b`. Each row of `soft`
/// must sum to one.
pub fn relaxed_thermometer(soft: &Tensor) -> Result<Tensor> {
    let k = *soft
        .shape()
        .last()
        .ok_or_else(|| Error::Contract("relaxed thermometer of a scalar".into()))?;
    let mut out = soft.data().to_vec();
    for (r, row) in out.chunks_exact_mut(k).enumerate() {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Contract(format!("row {r} sums to {total}, not 1")));
        }
        for i in 1..k {
            row[i] += row[i - 1];
        }
    }
    Tensor::new(soft.shape().to_vec(), out)
}

fn dims4(t: &Tensor) -> Result<[usize; 4]> {
    dims4_shape(t.shape())
}

fn dims4_shape(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::Dimension {
            op: "image batch",
            lhs: shape.to_vec(),
            rhs: vec![0; 4],
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineSpec {
    transforms: Vec<Transform>,
}

/// Ordered transforms with a shared counter of stage executions.
///
/// Clones share the counter, so a gate and the pipeline it wraps report the
/// same count.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "PipelineSpec", into = "PipelineSpec")]
pub struct Pipeline {
    transforms: Vec<Transform>,
    executed: Arc<AtomicU64>,
}

impl PartialEq for Pipeline {
    fn eq(&self, other: &Self) -> bool {
        self.transforms == other.transforms
    }
}

impl TryFrom<PipelineSpec> for Pipeline {
    type Error = Error;

    fn try_from(spec: PipelineSpec) -> Result<Self> {
        Pipeline::new(spec.transforms)
    }
}

impl From<Pipeline> for PipelineSpec {
    fn from(p: Pipeline) -> Self {
        PipelineSpec {
            transforms: p.transforms,
        }
    }
}

/// Per-pixel inclusive bucket interval `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BucketRange {
    pub lo: Buckets,
    pub hi: Buckets,
}

type QuantizeStage = (usize, Option<[f64; 2]>);

impl Pipeline {
    /// Validates ordering: at most one quantize, at most one encoding, the
    /// encoding last and right after a quantize with the same `k`, and no
    /// batch norm before an unranged quantize.
    pub fn new(transforms: Vec<Transform>) -> Result<Self> {
        let mut quantize_at = None;
        let mut batch_norm_seen = false;
        for (i, t) in transforms.iter().enumerate() {
            t.validate()?;
            match *t {
                Transform::Quantize { k, range } => {
                    if quantize_at.is_some() {
                        return Err(Error::Config("more than one quantize stage".into()));
                    }
                    if batch_norm_seen && range.is_none() {
                        return Err(Error::Config(
                            "quantize after batch_norm needs an explicit range".into(),
                        ));
                    }
                    quantize_at = Some((i, k));
                }
                Transform::OneHot { k } | Transform::Thermometer { k } => match quantize_at {
                    Some((q, qk)) if q + 1 == i && qk == k && i + 1 == transforms.len() => {}
                    Some((_, qk)) if qk != k => {
                        return Err(Error::Config(format!(
                            "encoding k = {k} differs from quantize k = {qk}"
                        )))
                    }
                    _ => {
                        return Err(Error::Config(
                            "an encoding must directly follow quantize and end the pipeline".into(),
                        ))
                    }
                },
                _ => {
                    batch_norm_seen |= matches!(t, Transform::BatchNorm { .. });
                    if quantize_at.is_some() {
                        return Err(Error::Config(format!("{t:?} cannot follow quantize")));
                    }
                }
            }
        }
        Ok(Pipeline {
            transforms,
            executed: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn empty() -> Self {
        Pipeline::new(Vec::new()).expect("empty pipeline")
    }

    /// tanh filter, batch norm, `k`-level quantization, thermometer.
    pub fn canonical(k: usize) -> Result<Self> {
        Pipeline::new(vec![
            Transform::TanhFilter {
                scale: DEFAULT_FILTER_SCALE,
            },
            Transform::BatchNorm { eps: DEFAULT_BN_EPS },
            Transform::Quantize {
                k,
                range: Some(DEFAULT_NORMALIZED_RANGE),
            },
            Transform::Thermometer { k },
        ])
    }

    /// [`canonical`](Self::canonical) with 3x3 max smoothing after the filter.
    pub fn canonical_smoothed(k: usize) -> Result<Self> {
        let mut p = Self::canonical(k)?.transforms;
        p.insert(1, Transform::MaxSmooth { window: 3 });
        Pipeline::new(p)
    }

    /// Plain quantization and thermometer encoding of raw pixels.
    pub fn thermometer(k: usize) -> Result<Self> {
        Pipeline::new(vec![
            Transform::Quantize { k, range: None },
            Transform::Thermometer { k },
        ])
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    /// Quantization levels, if the pipeline quantizes.
    pub fn levels(&self) -> Option<usize> {
        self.transforms.iter().find_map(|t| match *t {
            Transform::Quantize { k, .. } => Some(k),
            _ => None,
        })
    }

    pub fn encoding(&self) -> Option<Encoding> {
        self.transforms.last().and_then(|t| t.encoding()).map(|e| e.0)
    }

    pub fn uses_batch_statistics(&self) -> bool {
        self.transforms.iter().any(|t| matches!(t, Transform::BatchNorm { .. }))
    }

    pub fn output_channels(&self, in_channels: usize) -> usize {
        match self.transforms.last().and_then(|t| t.encoding()) {
            Some((_, k)) => in_channels * k,
            None => in_channels,
        }
    }

    /// Number of transform stages executed so far, across all clones.
    pub fn invocations(&self) -> u64 {
        self.executed.load(Ordering::Relaxed)
    }

    fn tick(&self) {
        self.executed.fetch_add(1, Ordering::Relaxed);
    }

    /// Continuous prefix, quantizer levels and range, trailing encoding.
    fn split(&self) -> (&[Transform], Option<QuantizeStage>, Option<Encoding>) {
        match self
            .transforms
            .iter()
            .position(|t| matches!(t, Transform::Quantize { .. }))
        {
            Some(q) => {
                let Transform::Quantize { k, range } = self.transforms[q] else {
                    unreachable!()
                };
                (&self.transforms[..q], Some((k, range)), self.encoding())
            }
            None => (&self.transforms[..], None, None),
        }
    }

    fn run_prefix(&self, batch: &Tensor, frozen: Option<&[(f64, f64)]>) -> Result<(Tensor, Vec<(f64, f64)>)> {
        let (prefix, _, _) = self.split();
        let mut x = batch.clone();
        let mut stats = Vec::new();
        for t in prefix {
            self.tick();
            let f = frozen.and_then(|s| s.get(stats.len()).copied());
            let (y, s) = t.apply_continuous(&x, f)?;
            x = y;
            stats.extend(s);
        }
        Ok((x, stats))
    }

    fn bucketize(&self, x: &Tensor, k: usize, range: Option<[f64; 2]>) -> Result<Buckets> {
        self.tick();
        match range {
            Some(r) => quantize_range(x, k, r),
            None => quantize(x, k),
        }
    }

    /// Runs every transform in order. The result is discrete iff the
    /// pipeline ends in an encoding; a trailing quantize decodes to bucket
    /// centres.
    pub fn apply(&self, batch: &Tensor) -> Result<EncodedBatch> {
        let (x, _) = self.run_prefix(batch, None)?;
        let Some((k, range)) = self.split().1 else {
            return Ok(EncodedBatch {
                data: x,
                discrete: false,
            });
        };
        let buckets = self.bucketize(&x, k, range)?;
        match self.encoding() {
            Some(e) => {
                self.tick();
                encode(&buckets, e)
            }
            None => Ok(EncodedBatch {
                data: decode(&buckets),
                discrete: false,
            }),
        }
    }

    /// Buckets the pipeline assigns to `batch`.
    pub fn buckets(&self, batch: &Tensor) -> Result<Buckets> {
        let (k, range) = self.quantizer()?;
        let (x, _) = self.run_prefix(batch, None)?;
        self.bucketize(&x, k, range)
    }

    /// Inclusive bucket interval reachable by any image within `epsilon` of
    /// `batch` (clipped to `[0, 1]`).
    ///
    /// Every continuous stage is monotone non-decreasing once batch-norm
    /// statistics are frozen at those of the clean batch, so pushing the
    /// lower and upper corner images through the stages bounds each pixel.
    pub fn bucket_range(&self, batch: &Tensor, epsilon: f64) -> Result<BucketRange> {
        let (k, range) = self.quantizer()?;
        let (_, stats) = self.run_prefix(batch, None)?;
        let corner = |d: f64| -> Result<Buckets> {
            let img = batch.map(|x| (x + d).clamp(0.0, 1.0));
            let (y, _) = self.run_prefix(&img, Some(&stats))?;
            self.bucketize(&y, k, range)
        };
        let (lo, hi) = (corner(-epsilon)?, corner(epsilon)?);
        Ok(BucketRange { lo, hi })
    }

    fn quantizer(&self) -> Result<(usize, Option<[f64; 2]>)> {
        self.split()
            .1
            .ok_or_else(|| Error::Unsupported("pipeline has no quantize stage".into()))
    }
}
