use super::kernels::{self, ConvGeom, WindowReduce};
use super::{Activation, Graph, Node, Op, Padding, Reduction, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::Dimension {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0, 0, 0],
        }),
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<[usize; 2]> {
    match *t.shape() {
        [a, b] => Ok([a, b]),
        _ => Err(Error::Dimension {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

/// Per-row softmax cross-entropy, `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy_rows(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let [batch, classes] = dims2(logits, "softmax_cross_entropy")?;
    check_labels(batch, classes, labels)?;
    Ok(logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            lse - row[y]
        })
        .collect())
}

fn check_labels(batch: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            lhs: vec![batch, classes],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

impl Graph {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let [m, k] = dims2(av, "matmul")?;
        let [k2, n] = dims2(bv, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, av.data(), false, bv.data(), false, 0.0, &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let [_, n] = dims2(xv, "add_row_bias")?;
        bv.expect_shape("add_row_bias", &[n])?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(t, Op::AddRowBias(x, bias), rg))
    }

    /// Adds a per-channel bias to a `[b, c, h, w]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let [_, c, h, w] = dims4(xv, "add_channel_bias")?;
        bv.expect_shape("add_channel_bias", &[c])?;
        let mut out = xv.data().to_vec();
        for (i, plane) in out.chunks_exact_mut(h * w).enumerate() {
            let b = bv.data()[i % c];
            plane.iter_mut().for_each(|o| *o += b);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(t, Op::AddChannelBias(x, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Affine(x, scale), rg)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.value(x).map(|v| kind.apply(v));
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Activation(x, kind), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Stride-1 cross-correlation (no kernel flip).
    ///
    /// `input: [batch, cin, h, w]`, `kernel: [cout, cin, r, r]` with odd `r`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let (xv, kv) = (self.value(input), self.value(kernel));
        let [batch, cin, h, w] = dims4(xv, "conv2d")?;
        let [cout, kcin, r, r2] = dims4(kv, "conv2d")?;
        if kcin != cin {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: xv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        if r != r2 || r % 2 == 0 {
            return Err(Error::Contract(format!(
                "conv2d kernel must be square with odd side, got {r}x{r2}"
            )));
        }
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => r / 2,
        };
        if h + 2 * pad < r || w + 2 * pad < r {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: xv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        let geom = ConvGeom {
            channels: cin,
            height: h,
            width: w,
            kernel: r,
            pad,
        };
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let mut cols = vec![0.0; geom.col_rows() * geom.col_cols()];
        let mut out = vec![0.0; batch * cout * ho * wo];
        let img = cin * h * w;
        let oimg = cout * ho * wo;
        for b in 0..batch {
            kernels::im2col(&xv.data()[b * img..(b + 1) * img], &geom, &mut cols);
            kernels::gemm(
                cout,
                geom.col_rows(),
                geom.col_cols(),
                1.0,
                kv.data(),
                false,
                &cols,
                false,
                0.0,
                &mut out[b * oimg..(b + 1) * oimg],
            );
        }
        let t = Tensor::new(vec![batch, cout, ho, wo], out)?;
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(t, Op::Conv2d { input, kernel, pad }, rg))
    }

    /// 2x2 stride-2 max pooling on `[b, c, h, w]`.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let xv = self.value(input);
        let [b, c, h, w] = dims4(xv, "maxpool2")?;
        if h < 2 || w < 2 {
            return Err(Error::Dimension {
                op: "maxpool2",
                lhs: xv.shape().to_vec(),
                rhs: vec![2, 2],
            });
        }
        let (out, argmax) = kernels::maxpool2(xv.data(), b * c, h, w);
        let t = Tensor::new(vec![b, c, h / 2, w / 2], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(t, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Collapses everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let lead = *shape
            .first()
            .ok_or_else(|| Error::Contract("flatten of a scalar".into()))?;
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[lead, rest])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.softmax_cross_entropy_with(logits, labels, Reduction::Mean)
    }

    pub fn softmax_cross_entropy_with(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let lv = self.value(logits);
        let [batch, classes] = dims2(lv, "softmax_cross_entropy")?;
        check_labels(batch, classes, labels)?;
        let mut probs = vec![0.0; lv.len()];
        kernels::softmax_rows(lv.data(), classes, 1.0, &mut probs);
        let total: f64 = softmax_cross_entropy_rows(lv, labels)?.iter().sum();
        let loss = match reduction {
            Reduction::Mean => total / batch as f64,
            Reduction::Sum => total,
        };
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                reduction,
            },
            rg,
        ))
    }

    /// `softmax(x / temperature)` along the last axis.
    pub fn softmax_last(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::Contract(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let xv = self.value(x);
        let row = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("softmax of a scalar".into()))?;
        let mut out = vec![0.0; xv.len()];
        kernels::softmax_rows(xv.data(), row, temperature, &mut out);
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::SoftmaxLast { input: x, temperature }, rg))
    }

    /// `y_i = sum_{j <= i} x_j` along the last axis.
    pub fn cumsum_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let row = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("cumulative sum of a scalar".into()))?;
        let mut out = xv.data().to_vec();
        for r in out.chunks_exact_mut(row) {
            for i in 1..row {
                r[i] += r[i - 1];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::CumsumLast(x), rg))
    }

    /// `[b, c, h, w, k] -> [b, c*k, h, w]`, channel `c*k + i` holding level `i`.
    pub fn last_to_channels(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w, k] = match *xv.shape() {
            [b, c, h, w, k] => [b, c, h, w, k],
            _ => {
                return Err(Error::Dimension {
                    op: "last_to_channels",
                    lhs: xv.shape().to_vec(),
                    rhs: vec![0; 5],
                })
            }
        };
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        let plane = h * w;
        for bc in 0..b * c {
            for p in 0..plane {
                for i in 0..k {
                    out[(bc * k + i) * plane + p] = src[(bc * plane + p) * k + i];
                }
            }
        }
        let t = Tensor::new(vec![b, c * k, h, w], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::LastToChannels(x), rg))
    }

    /// Forward value `hard`, gradient routed unchanged to `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        hard.expect_shape("straight_through", self.value(soft).shape())?;
        let rg = self.any_grad(&[soft]);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    /// `(x - mean) / (std + eps)` with one population mean/std over the whole
    /// tensor; no learnable parameters.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (mean, std) = (xv.mean(), xv.std());
        let t = xv.map(|v| (v - mean) / (std + eps));
        let rg = self.any_grad(&[x]);
        self.push(
            t,
            Op::BatchNorm {
                input: x,
                mean,
                std,
                eps,
            },
            rg,
        )
    }

    /// Edge-replicated sliding-window max or mean over each `h x w` plane of
    /// a `[b, c, h, w]` tensor.
    pub fn smooth(&mut self, x: Var, reduce: WindowReduce, window: usize) -> Result<Var> {
        if window % 2 == 0 || window < 3 {
            return Err(Error::Config(format!(
                "smoothing window must be odd and >= 3, got {window}"
            )));
        }
        let xv = self.value(x);
        let [b, c, h, w] = dims4(xv, "smooth")?;
        let (out, arg) = kernels::smooth_planes(xv.data(), b * c, h, w, window, reduce);
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        let op = match arg {
            Some(argmax) => Op::MaxSmooth { input: x, argmax },
            None => Op::MeanSmooth { input: x, window },
        };
        Ok(self.push(t, op, rg))
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let t = xv.map(&f);
        let derivative = xv.data().iter().map(|&v| df(v)).collect();
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Unary { input: x, derivative }, rg)
    }

    pub(super) fn propagate(&mut self, i: usize, g: &[f64]) {
        let (nodes, grads) = (&self.nodes, &mut self.grads);
        let node = &nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            accumulate(nodes, grads, v, f);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                acc(*a, &mut |da| {
                    kernels::gemm(m, n, k, 1.0, g, false, bv.data(), true, 1.0, da)
                });
                acc(*b, &mut |db| {
                    kernels::gemm(k, m, n, 1.0, av.data(), true, g, false, 1.0, db)
                });
            }
            Op::AddRowBias(x, bias) => {
                let n = nodes[bias.0].value.len();
                acc(*x, &mut |dx| add_into(dx, g));
                acc(*bias, &mut |db| {
                    for row in g.chunks_exact(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::AddChannelBias(x, bias) => {
                let shape = nodes[x.0].value.shape();
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                acc(*x, &mut |dx| add_into(dx, g));
                acc(*bias, &mut |db| {
                    for (p, chunk) in g.chunks_exact(plane).enumerate() {
                        db[p % c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |da| {
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Affine(x, scale) => {
                acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, gi)| *d += scale * gi));
            }
            Op::Activation(x, kind) => {
                let y = node.value.data();
                let xs = nodes[x.0].value.data();
                acc(*x, &mut |dx| {
                    for (((d, gi), yi), xi) in dx.iter_mut().zip(g).zip(y).zip(xs) {
                        let local = match kind {
                            Activation::Relu => {
                                if *xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Tanh => 1.0 - yi * yi,
                            Activation::Sigmoid => yi * (1.0 - yi),
                        };
                        *d += gi * local;
                    }
                });
            }
            Op::Conv2d { input, kernel, pad } => {
                conv2d_backward(nodes, grads, *input, *kernel, *pad, g);
            }
            Op::MaxPool2 { input, argmax } => {
                acc(*input, &mut |dx| {
                    for (gi, &src) in g.iter().zip(argmax) {
                        dx[src] += gi;
                    }
                });
            }
            Op::Reshape(x) | Op::StraightThrough(x) => {
                acc(*x, &mut |dx| add_into(dx, g));
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g0));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
                reduction,
            } => {
                let classes = probs.len() / labels.len();
                let scale = match reduction {
                    Reduction::Mean => g[0] / labels.len() as f64,
                    Reduction::Sum => g[0],
                };
                acc(*logits, &mut |dl| {
                    for (r, &y) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == y { 1.0 } else { 0.0 };
                            dl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                });
            }
            Op::SoftmaxLast { input, temperature } => {
                let y = node.value.data();
                let row = *node.value.shape().last().unwrap_or(&1);
                acc(*input, &mut |dx| {
                    for ((d, gr), yr) in dx
                        .chunks_exact_mut(row)
                        .zip(g.chunks_exact(row))
                        .zip(y.chunks_exact(row))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((di, gi), yi) in d.iter_mut().zip(gr).zip(yr) {
                            *di += yi * (gi - dot) / temperature;
                        }
                    }
                });
            }
            Op::CumsumLast(x) => {
                let row = *node.value.shape().last().unwrap_or(&1);
                acc(*x, &mut |dx| {
                    for (d, gr) in dx.chunks_exact_mut(row).zip(g.chunks_exact(row)) {
                        let mut running = 0.0;
                        for (di, gi) in d.iter_mut().zip(gr).rev() {
                            running += gi;
                            *di += running;
                        }
                    }
                });
            }
            Op::LastToChannels(x) => {
                let shape = nodes[x.0].value.shape();
                let (bc, plane, k) = (shape[0] * shape[1], shape[2] * shape[3], shape[4]);
                acc(*x, &mut |dx| {
                    for q in 0..bc {
                        for p in 0..plane {
                            for i in 0..k {
                                dx[(q * plane + p) * k + i] += g[(q * k + i) * plane + p];
                            }
                        }
                    }
                });
            }
            Op::BatchNorm { input, mean, std, eps } => {
                let xs = nodes[input.0].value.data();
                let n = xs.len() as f64;
                let s = std + eps;
                let gbar = g.iter().sum::<f64>() / n;
                let cross: f64 = g.iter().zip(xs).map(|(gi, xi)| gi * (xi - mean)).sum();
                acc(*input, &mut |dx| {
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xs) {
                        let mut v = (gi - gbar) / s;
                        if *std > 0.0 {
                            v -= cross / (s * s) * (xi - mean) / (n * std);
                        }
                        *d += v;
                    }
                });
            }
            Op::MaxSmooth { input, argmax } => {
                acc(*input, &mut |dx| {
                    for (gi, &src) in g.iter().zip(argmax) {
                        dx[src] += gi;
                    }
                });
            }
            Op::MeanSmooth { input, window } => {
                let s = node.value.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                acc(*input, &mut |dx| {
                    kernels::smooth_mean_backward(g, planes, h, w, *window, dx)
                });
            }
            Op::Unary { input, derivative } => {
                acc(*input, &mut |dx| {
                    for ((d, gi), di) in dx.iter_mut().zip(g).zip(derivative) {
                        *d += gi * di;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.len();
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
    f(slot);
}

fn conv2d_backward(nodes: &[Node], grads: &mut [Option<Vec<f64>>], input: Var, kernel: Var, pad: usize, g: &[f64]) {
    let (xv, kv) = (&nodes[input.0].value, &nodes[kernel.0].value);
    let (batch, cin, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (cout, r) = (kv.shape()[0], kv.shape()[2]);
    let geom = ConvGeom {
        channels: cin,
        height: h,
        width: w,
        kernel: r,
        pad,
    };
    let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
    let img = cin * h * w;
    let oimg = cout * cols_n;
    let want_x = nodes[input.0].requires_grad;
    let want_k = nodes[kernel.0].requires_grad;
    let mut cols = vec![0.0; rows * cols_n];
    let mut dk = if want_k { vec![0.0; kv.len()] } else { Vec::new() };
    let mut dx = if want_x { vec![0.0; xv.len()] } else { Vec::new() };
    for b in 0..batch {
        let gb = &g[b * oimg..(b + 1) * oimg];
        if want_k {
            kernels::im2col(&xv.data()[b * img..(b + 1) * img], &geom, &mut cols);
            kernels::gemm(cout, cols_n, rows, 1.0, gb, false, &cols, true, 1.0, &mut dk);
        }
        if want_x {
            kernels::gemm(rows, cout, cols_n, 1.0, kv.data(), true, gb, false, 0.0, &mut cols);
            kernels::col2im(&cols, &geom, &mut dx[b * img..(b + 1) * img]);
        }
    }
    if want_k {
        accumulate(nodes, grads, kernel, &mut |d| add_into(d, &dk));
    }
    if want_x {
        accumulate(nodes, grads, input, &mut |d| add_into(d, &dx));
    }
}
