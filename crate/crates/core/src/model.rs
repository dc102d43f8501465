//! Small convolutional classifiers over raw or level-encoded images.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_cross_entropy_rows, Graph, Padding, Reduction, Var};
use crate::error::{Error, Result};
use crate::preprocess::Pipeline;
use crate::tensor::Tensor;

/// Number of output classes of every architecture here.
pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Conv {
        kernel: usize,
        out: usize,
        #[serde(default = "valid")]
        padding: Padding,
    },
    Maxpool2,
    Relu,
    Flatten,
    Dense {
        out: usize,
    },
}

fn valid() -> Padding {
    Padding::Valid
}

impl Layer {
    pub fn conv(kernel: usize, out: usize) -> Self {
        Layer::Conv {
            kernel,
            out,
            padding: Padding::Valid,
        }
    }
}

/// Layer stack plus the `[channels, height, width]` input it expects.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
}

impl Architecture {
    /// LeNet-style MNIST net:
    /// conv(5,32) relu pool conv(5,64) relu pool flatten dense(128) relu dense(10).
    pub fn mnist(in_channels: usize) -> Self {
        Architecture {
            input: [in_channels, 28, 28],
            layers: vec![
                Layer::conv(5, 32),
                Layer::Relu,
                Layer::Maxpool2,
                Layer::conv(5, 64),
                Layer::Relu,
                Layer::Maxpool2,
                Layer::Flatten,
                Layer::Dense { out: 128 },
                Layer::Relu,
                Layer::Dense { out: NUM_CLASSES },
            ],
        }
    }

    /// Compact CIFAR-10 net with same-padded 3x3 convolutions.
    pub fn cifar_small(in_channels: usize) -> Self {
        let same = |out| Layer::Conv {
            kernel: 3,
            out,
            padding: Padding::Same,
        };
        Architecture {
            input: [in_channels, 32, 32],
            layers: vec![
                same(32),
                Layer::Relu,
                Layer::Maxpool2,
                same(64),
                Layer::Relu,
                Layer::Maxpool2,
                Layer::Flatten,
                Layer::Dense { out: 128 },
                Layer::Relu,
                Layer::Dense { out: NUM_CLASSES },
            ],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.input[0]
    }

    /// Propagates shapes through the stack and returns the parameter shapes
    /// in declaration order.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let bad = |i: usize, layer: &Layer, why: String| Error::Config(format!("layer {i} ({layer:?}): {why}"));
        let mut shape: Vec<usize> = self.input.to_vec();
        if shape.contains(&0) {
            return Err(Error::Config(format!("empty input shape {:?}", self.input)));
        }
        let mut params = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv { kernel, out, padding } => {
                    let [c, h, w] = match shape[..] {
                        [c, h, w] => [c, h, w],
                        _ => return Err(bad(i, layer, format!("needs a 3-d input, got {shape:?}"))),
                    };
                    if kernel % 2 == 0 || *out == 0 {
                        return Err(bad(i, layer, "kernel must be odd and out > 0".into()));
                    }
                    let pad = match padding {
                        Padding::Valid => 0,
                        Padding::Same => kernel / 2,
                    };
                    if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                        return Err(bad(i, layer, format!("kernel larger than input {shape:?}")));
                    }
                    params.push(vec![*out, c, *kernel, *kernel]);
                    params.push(vec![*out]);
                    shape = vec![*out, h + 2 * pad + 1 - kernel, w + 2 * pad + 1 - kernel];
                }
                Layer::Maxpool2 => match shape[..] {
                    [c, h, w] if h >= 2 && w >= 2 => shape = vec![c, h / 2, w / 2],
                    _ => return Err(bad(i, layer, format!("cannot pool {shape:?}"))),
                },
                Layer::Relu => {}
                Layer::Flatten => shape = vec![shape.iter().product()],
                Layer::Dense { out } => {
                    let [n] = shape[..] else {
                        return Err(bad(i, layer, format!("needs a flat input, got {shape:?}")));
                    };
                    params.push(vec![n, *out]);
                    params.push(vec![*out]);
                    shape = vec![*out];
                }
            }
        }
        if shape != [NUM_CLASSES] {
            return Err(Error::Config(format!(
                "architecture ends in {shape:?}, expected {NUM_CLASSES} logits"
            )));
        }
        Ok(params)
    }

    /// Checks that the input channels match what `pipeline` emits for images
    /// with `raw_channels` channels.
    pub fn check_pipeline(&self, pipeline: Option<&Pipeline>, raw_channels: usize) -> Result<()> {
        let expected = pipeline.map_or(raw_channels, |p| p.output_channels(raw_channels));
        if self.in_channels() != expected {
            return Err(Error::Config(format!(
                "architecture takes {} input channels but the pipeline produces {expected}",
                self.in_channels()
            )));
        }
        Ok(())
    }
}

/// An architecture with concrete parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Architecture,
    params: Vec<Tensor>,
}

impl Model {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn build(arch: Architecture, seed: u64) -> Result<Self> {
        let shapes = arch.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes
            .iter()
            .map(|shape| {
                if shape.len() == 1 {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = if shape.len() == 4 {
                        shape[1..].iter().product()
                    } else {
                        shape[0]
                    };
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::uniform(shape, -bound, bound, &mut rng)
                }
            })
            .collect();
        Ok(Model { arch, params })
    }

    /// Rebuilds a model from stored parameters, checking their shapes.
    pub fn from_parts(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        let shapes = arch.param_shapes()?;
        if shapes.len() != params.len() {
            return Err(Error::Consistency(format!(
                "architecture has {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (s, p) in shapes.iter().zip(&params) {
            p.expect_shape("model parameter", s)?;
        }
        Ok(Model { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records the forward pass on `g`. Parameters become tracked leaves when
    /// `track_params` is set; their vars are returned in declaration order.
    pub fn forward(&self, g: &mut Graph, input: Var, track_params: bool) -> Result<(Var, Vec<Var>)> {
        let shape = g.value(input).shape();
        if shape.len() != 4 || shape[1..] != self.arch.input[..] {
            return Err(Error::Dimension {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: self.arch.input.to_vec(),
            });
        }
        let pvars: Vec<Var> = self.params.iter().map(|p| g.leaf(p.clone(), track_params)).collect();
        let mut next = pvars.iter().copied();
        let mut x = input;
        for layer in &self.arch.layers {
            x = match layer {
                Layer::Conv { padding, .. } => {
                    let (k, b) = (next.next().unwrap(), next.next().unwrap());
                    let y = g.conv2d(x, k, *padding)?;
                    g.add_channel_bias(y, b)?
                }
                Layer::Maxpool2 => g.maxpool2(x)?,
                Layer::Relu => g.relu(x),
                Layer::Flatten => g.flatten(x)?,
                Layer::Dense { .. } => {
                    let (w, b) = (next.next().unwrap(), next.next().unwrap());
                    let y = g.matmul(x, w)?;
                    g.add_row_bias(y, b)?
                }
            };
        }
        Ok((x, pvars))
    }

    /// Forward pass without gradient tracking.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let (out, _) = self.forward(&mut g, x, false)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, input: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(input)?))
    }

    /// Per-example cross-entropy and predictions.
    pub fn loss_and_predictions(&self, input: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
        let logits = self.logits(input)?;
        Ok((softmax_cross_entropy_rows(&logits, labels)?, argmax_rows(&logits)))
    }

    /// Gradient of the summed per-example cross-entropy with respect to the
    /// model input. Returns `(summed loss, gradient)`.
    pub fn input_gradient(&self, input: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let x = g.param(input.clone());
        let (logits, _) = self.forward(&mut g, x, false)?;
        let loss = g.softmax_cross_entropy_with(logits, labels, Reduction::Sum)?;
        g.backward(loss)?;
        let grad = g.grad(x).unwrap_or_else(|| Tensor::zeros(input.shape()));
        Ok((g.value(loss).item()?, grad))
    }
}

/// Index of the largest entry of each row; ties go to the lower index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
