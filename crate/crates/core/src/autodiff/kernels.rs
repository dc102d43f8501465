//! Raw numeric kernels shared by the graph ops and the pre-processing stages.
//!
//! Everything here works on flat row-major slices; shape checking happens in
//! the callers.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`. With `trans_a` the slice `a` holds
/// the `k x m` matrix, likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the debug assertions above spell out the slice extents; the
    // strides address exactly those row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1 square-kernel convolution over one image.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds one `C x H x W` image into a `(C*r*r) x (Ho*Wo)` column matrix.
pub fn im2col(image: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo, r) = (g.out_height(), g.out_width(), g.kernel);
    let plane = ho * wo;
    for c in 0..g.channels {
        let src = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..r {
            for kj in 0..r {
                let row = (c * r + ki) * r + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oh in 0..ho {
                    let ih = oh as isize + ki as isize - g.pad as isize;
                    let line = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &src[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, out) in line.iter_mut().enumerate() {
                        let iw = ow as isize + kj as isize - g.pad as isize;
                        *out = if iw < 0 || iw >= g.width as isize {
                            0.0
                        } else {
                            srow[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back into an image.
pub fn col2im(cols: &[f64], g: &ConvGeom, image: &mut [f64]) {
    let (ho, wo, r) = (g.out_height(), g.out_width(), g.kernel);
    let plane = ho * wo;
    for c in 0..g.channels {
        let dst = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..r {
            for kj in 0..r {
                let row = (c * r + ki) * r + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oh in 0..ho {
                    let ih = oh as isize + ki as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let drow = &mut dst[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..wo {
                        let iw = ow as isize + kj as isize - g.pad as isize;
                        if iw >= 0 && iw < g.width as isize {
                            drow[iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling over `planes` independent `h x w` planes.
/// Returns pooled values and the flat input index of each maximum.
pub fn maxpool2(input: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + (2 * oh) * w + 2 * ow;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oh + di) * w + 2 * ow + dj;
                    if input[idx] > input[best] || input[idx].is_nan() {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Window reduction used by smoothing filters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowReduce {
    Max,
    Mean,
}

/// Sliding `window x window` max or mean over each `h x w` plane with edge
/// replication, so the output keeps the input shape.
///
/// For `Max` the second return value holds the flat source index of each
/// output's maximum (first occurrence in scan order).
pub fn smooth_planes(
    input: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    reduce: WindowReduce,
) -> (Vec<f64>, Option<Vec<usize>>) {
    let half = (window / 2) as isize;
    let mut out = Vec::with_capacity(input.len());
    let mut arg = match reduce {
        WindowReduce::Max => Some(Vec::with_capacity(input.len())),
        WindowReduce::Mean => None,
    };
    let norm = (window * window) as f64;
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut best_idx = usize::MAX;
                let mut best = f64::NEG_INFINITY;
                let mut acc = 0.0;
                for di in -half..=half {
                    let si = (i + di).clamp(0, h as isize - 1) as usize;
                    for dj in -half..=half {
                        let sj = (j + dj).clamp(0, w as isize - 1) as usize;
                        let idx = base + si * w + sj;
                        let v = input[idx];
                        match reduce {
                            WindowReduce::Max => {
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                            WindowReduce::Mean => acc += v,
                        }
                    }
                }
                match reduce {
                    WindowReduce::Max => {
                        out.push(best);
                        if let Some(a) = arg.as_mut() {
                            a.push(best_idx);
                        }
                    }
                    WindowReduce::Mean => out.push(acc / norm),
                }
            }
        }
    }
    (out, arg)
}

/// Adjoint of mean smoothing with edge replication.
pub fn smooth_mean_backward(grad_out: &[f64], planes: usize, h: usize, w: usize, window: usize, grad_in: &mut [f64]) {
    let half = (window / 2) as isize;
    let norm = (window * window) as f64;
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h as isize {
            for j in 0..w as isize {
                let g = grad_out[base + i as usize * w + j as usize] / norm;
                for di in -half..=half {
                    let si = (i + di).clamp(0, h as isize - 1) as usize;
                    for dj in -half..=half {
                        let sj = (j + dj).clamp(0, w as isize - 1) as usize;
                        grad_in[base + si * w + sj] += g;
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax of each `row`-long chunk, with temperature.
pub fn softmax_rows(input: &[f64], row: usize, temperature: f64, out: &mut [f64]) {
    for (src, dst) in input.chunks_exact(row).zip(out.chunks_exact_mut(row)) {
        let max = src.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) / temperature;
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s / temperature - max).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            gemm(m, k, n, 1.0, aa, ta, bb, tb, 0.0, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            pad: 1,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.13).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.29).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn mean_smoothing_adjoint() {
        let (h, w) = (4, 5);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.3).cos()).collect();
        let (sx, _) = smooth_planes(&x, 1, h, w, 3, WindowReduce::Mean);
        let lhs: f64 = sx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        smooth_mean_backward(&y, 1, h, w, 3, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
