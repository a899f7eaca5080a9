//! Forward and backward kernels on [`Tensor`]s.
//!
//! Every kernel is single-threaded with a fixed summation order, so results
//! are bit-reproducible on a given machine. Dense convolutions go through the
//! (single-threaded) GEMM behind `ndarray`.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use num_traits::Float;

use super::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const UNIT_NORM_EPS: f64 = 1e-8;

/// Square kernel of odd size `k` with `k / 2` zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.pad() - self.k) / self.stride + 1
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Valid output range `[lo, hi)` for a tap offset `d` with stride 1.
fn tap_range(d: isize, out_len: usize, in_len: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (in_len as isize - d).min(out_len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

/// `out += correlate(input, kernel)` for one plane pair.
#[allow(clippy::too_many_arguments)]
fn corr_acc(
    out: &mut [f32],
    ho: usize,
    wo: usize,
    input: &[f32],
    h: usize,
    w: usize,
    kernel: &[f32],
    g: ConvGeom,
) {
    let p = g.pad() as isize;
    for ky in 0..g.k {
        let dy = ky as isize - p;
        for kx in 0..g.k {
            let dx = kx as isize - p;
            let wv = kernel[ky * g.k + kx];
            if g.stride == 1 {
                let (y0, y1) = tap_range(dy, ho, h);
                let (x0, x1) = tap_range(dx, wo, w);
                for y in y0..y1 {
                    let iy = (y as isize + dy) as usize;
                    let orow = &mut out[y * wo + x0..y * wo + x1];
                    let start = iy * w + (x0 as isize + dx) as usize;
                    let irow = &input[start..start + (x1 - x0)];
                    for (o, i) in orow.iter_mut().zip(irow) {
                        *o += wv * i;
                    }
                }
            } else {
                let s = g.stride as isize;
                for y in 0..ho {
                    let iy = y as isize * s + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = &input[iy as usize * w..(iy as usize + 1) * w];
                    let orow = &mut out[y * wo..(y + 1) * wo];
                    for (x, o) in orow.iter_mut().enumerate() {
                        let ix = x as isize * s + dx;
                        if ix >= 0 && ix < w as isize {
                            *o += wv * irow[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// `din += correlate^T(dout, kernel)` and `dk += correlate(dout, input)`.
#[allow(clippy::too_many_arguments)]
fn corr_backward(
    dout: &[f32],
    ho: usize,
    wo: usize,
    input: &[f32],
    din: &mut [f32],
    h: usize,
    w: usize,
    kernel: &[f32],
    dk: &mut [f32],
    g: ConvGeom,
) {
    let p = g.pad() as isize;
    for ky in 0..g.k {
        let dy = ky as isize - p;
        for kx in 0..g.k {
            let dx = kx as isize - p;
            let wv = kernel[ky * g.k + kx];
            let mut acc = 0.0f32;
            if g.stride == 1 {
                let (y0, y1) = tap_range(dy, ho, h);
                let (x0, x1) = tap_range(dx, wo, w);
                for y in y0..y1 {
                    let iy = (y as isize + dy) as usize;
                    let grow = &dout[y * wo + x0..y * wo + x1];
                    let start = iy * w + (x0 as isize + dx) as usize;
                    let len = x1 - x0;
                    acc += dot(grow, &input[start..start + len]);
                    for (d, gv) in din[start..start + len].iter_mut().zip(grow) {
                        *d += wv * gv;
                    }
                }
            } else {
                let s = g.stride as isize;
                for y in 0..ho {
                    let iy = y as isize * s + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for x in 0..wo {
                        let ix = x as isize * s + dx;
                        if ix >= 0 && ix < w as isize {
                            let gv = dout[y * wo + x];
                            acc += gv * input[base + ix as usize];
                            din[base + ix as usize] += wv * gv;
                        }
                    }
                }
            }
            dk[ky * g.k + kx] += acc;
        }
    }
}

/// Unrolls one image (`c × h × w`) into `[c·k·k][ho·wo]` patch columns.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, g: ConvGeom) -> Vec<f32> {
    let (ho, wo) = (g.out_dim(h), g.out_dim(w));
    let (kk, plane_out) = (g.k * g.k, ho * wo);
    let p = g.pad() as isize;
    let mut cols = vec![0.0f32; c * kk * plane_out];
    for ic in 0..c {
        let input = &x[ic * h * w..(ic + 1) * h * w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((ic * kk) + ky * g.k + kx) * plane_out..][..plane_out];
                if g.stride == 1 {
                    let (dy, dx) = (ky as isize - p, kx as isize - p);
                    let (y0, y1) = tap_range(dy, ho, h);
                    let (x0, x1) = tap_range(dx, wo, w);
                    for y in y0..y1 {
                        let start = (y as isize + dy) as usize * w + (x0 as isize + dx) as usize;
                        row[y * wo + x0..y * wo + x1].copy_from_slice(&input[start..start + (x1 - x0)]);
                    }
                    continue;
                }
                for y in 0..ho {
                    let iy = (y * g.stride) as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = &input[iy as usize * w..(iy as usize + 1) * w];
                    for (x, o) in row[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                        let ix = (x * g.stride) as isize + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            *o = irow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch columns back onto `dx`.
fn col2im_acc(cols: &[f32], dx: &mut [f32], c: usize, h: usize, w: usize, g: ConvGeom) {
    let (ho, wo) = (g.out_dim(h), g.out_dim(w));
    let (kk, plane_out) = (g.k * g.k, ho * wo);
    let p = g.pad() as isize;
    for ic in 0..c {
        let out = &mut dx[ic * h * w..(ic + 1) * h * w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((ic * kk) + ky * g.k + kx) * plane_out..][..plane_out];
                if g.stride == 1 {
                    let (dy, dx) = (ky as isize - p, kx as isize - p);
                    let (y0, y1) = tap_range(dy, ho, h);
                    let (x0, x1) = tap_range(dx, wo, w);
                    for y in y0..y1 {
                        let start = (y as isize + dy) as usize * w + (x0 as isize + dx) as usize;
                        let dst = &mut out[start..start + (x1 - x0)];
                        for (d, &v) in dst.iter_mut().zip(&row[y * wo + x0..y * wo + x1]) {
                            *d += v;
                        }
                    }
                    continue;
                }
                for y in 0..ho {
                    let iy = (y * g.stride) as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let orow = &mut out[iy as usize * w..(iy as usize + 1) * w];
                    for (x, &v) in row[y * wo..(y + 1) * wo].iter().enumerate() {
                        let ix = (x * g.stride) as isize + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            orow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: ConvGeom) -> bool {
    g.k == 1 && g.stride == 1
}

/// Dense convolution as a GEMM over im2col patches; `weight` is
/// `[cout][cin][k][k]`.
pub fn conv2d_forward(
    x: &Tensor,
    weight: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
    g: ConvGeom,
) -> Tensor {
    let (ho, wo) = (g.out_dim(x.h), g.out_dim(x.w));
    let (ckk, plane_out) = (x.c * g.k * g.k, ho * wo);
    debug_assert_eq!(weight.len(), cout * ckk);
    let wmat = ArrayView2::from_shape((cout, ckk), weight).expect("kernel shape");
    let mut out = Tensor::zeros(x.n, cout, ho, wo);
    let image_len = x.c * x.plane_len();
    for n in 0..x.n {
        let image = &x.data[n * image_len..(n + 1) * image_len];
        let owned;
        let cols = if is_pointwise(g) {
            image
        } else {
            owned = im2col(image, x.c, x.h, x.w, g);
            &owned
        };
        let cols = ArrayView2::from_shape((ckk, plane_out), cols).expect("patch shape");
        let dst = &mut out.data[n * cout * plane_out..(n + 1) * cout * plane_out];
        if let Some(b) = bias {
            for (oc, plane) in dst.chunks_exact_mut(plane_out).enumerate() {
                plane.fill(b[oc]);
            }
        }
        let mut dst = ArrayViewMut2::from_shape((cout, plane_out), dst).expect("output shape");
        general_mat_mul(1.0, &wmat, &cols, 1.0, &mut dst);
    }
    out
}

/// Returns `dx`; accumulates into `dweight` and `dbias`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &[f32],
    dy: &Tensor,
    g: ConvGeom,
    dweight: &mut [f32],
    dbias: Option<&mut [f32]>,
) -> Tensor {
    let cout = dy.c;
    let (ckk, plane_out) = (x.c * g.k * g.k, dy.plane_len());
    let wmat = ArrayView2::from_shape((cout, ckk), weight).expect("kernel shape");
    let mut dw = ArrayViewMut2::from_shape((cout, ckk), dweight).expect("kernel shape");
    let mut dx = Tensor::zeros_like(x);
    let image_len = x.c * x.plane_len();
    let mut dcols = vec![0.0f32; ckk * plane_out];
    for n in 0..x.n {
        let image = &x.data[n * image_len..(n + 1) * image_len];
        let owned;
        let cols = if is_pointwise(g) {
            image
        } else {
            owned = im2col(image, x.c, x.h, x.w, g);
            &owned
        };
        let cols = ArrayView2::from_shape((ckk, plane_out), cols).expect("patch shape");
        let grad = &dy.data[n * cout * plane_out..(n + 1) * cout * plane_out];
        let grad = ArrayView2::from_shape((cout, plane_out), grad).expect("output shape");
        general_mat_mul(1.0, &grad, &cols.t(), 1.0, &mut dw);
        let dst = &mut dx.data[n * image_len..(n + 1) * image_len];
        if is_pointwise(g) {
            let mut dst = ArrayViewMut2::from_shape((ckk, plane_out), dst).expect("patch shape");
            general_mat_mul(1.0, &wmat.t(), &grad, 0.0, &mut dst);
        } else {
            let mut dc = ArrayViewMut2::from_shape((ckk, plane_out), &mut dcols[..]).expect("patch shape");
            general_mat_mul(1.0, &wmat.t(), &grad, 0.0, &mut dc);
            col2im_acc(&dcols, dst, x.c, x.h, x.w, g);
        }
    }
    if let Some(db) = dbias {
        for n in 0..dy.n {
            for (oc, b) in db.iter_mut().enumerate() {
                *b += dy.plane(n, oc).iter().sum::<f32>();
            }
        }
    }
    dx
}

/// Per-channel convolution; `weight` is `[c][k][k]`.
pub fn depthwise_forward(x: &Tensor, weight: &[f32], g: ConvGeom) -> Tensor {
    let (ho, wo) = (g.out_dim(x.h), g.out_dim(x.w));
    let kk = g.k * g.k;
    let mut out = Tensor::zeros(x.n, x.c, ho, wo);
    for n in 0..x.n {
        for c in 0..x.c {
            let kernel = &weight[c * kk..(c + 1) * kk];
            corr_acc(out.plane_mut(n, c), ho, wo, x.plane(n, c), x.h, x.w, kernel, g);
        }
    }
    out
}

pub fn depthwise_backward(
    x: &Tensor,
    weight: &[f32],
    dy: &Tensor,
    g: ConvGeom,
    dweight: &mut [f32],
) -> Tensor {
    let kk = g.k * g.k;
    let mut dx = Tensor::zeros_like(x);
    let plane = x.plane_len();
    for n in 0..x.n {
        for c in 0..x.c {
            let start = (n * x.c + c) * plane;
            corr_backward(
                dy.plane(n, c),
                dy.h,
                dy.w,
                x.plane(n, c),
                &mut dx.data[start..start + plane],
                x.h,
                x.w,
                &weight[c * kk..(c + 1) * kk],
                &mut dweight[c * kk..(c + 1) * kk],
                g,
            );
        }
    }
    dx
}

pub fn relu(x: &Tensor) -> Tensor {
    // NaN passes through so that a poisoned forward pass is detected
    let data = x.data.iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
    Tensor::from_vec(x.n, x.c, x.h, x.w, data)
}

/// Gradient of ReLU given its output.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(y.n, y.c, y.h, y.w, data)
}

/// 2×2 max pooling; returns the output and the winning offset (0..4) of each
/// output pixel. Ties go to the first offset in raster order.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u8>) {
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, ho, wo);
    let mut arg = vec![0u8; out.data.len()];
    let mut k = 0;
    for n in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(n, c);
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best = src[2 * y * x.w + 2 * xx];
                    let mut which = 0u8;
                    for (o, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let v = src[(2 * y + dy) * x.w + 2 * xx + dx];
                        if v > best {
                            best = v;
                            which = o as u8 + 1;
                        }
                    }
                    out.data[k] = best;
                    arg[k] = which;
                    k += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(dy: &Tensor, arg: &[u8], in_h: usize, in_w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.n, dy.c, in_h, in_w);
    let mut k = 0;
    for n in 0..dy.n {
        for c in 0..dy.c {
            let g = dy.plane(n, c).to_vec();
            let plane = dx.plane_mut(n, c);
            for y in 0..dy.h {
                for x in 0..dy.w {
                    let (oy, ox) = [(0, 0), (0, 1), (1, 0), (1, 1)][arg[k] as usize];
                    plane[(2 * y + oy) * in_w + 2 * x + ox] += g[y * dy.w + x];
                    k += 1;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (ho, wo) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.n, x.c, ho, wo);
    for n in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(n, c).to_vec();
            let dst = out.plane_mut(n, c);
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / 2) * x.w + xx / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for n in 0..dy.n {
        for c in 0..dy.c {
            let g = dy.plane(n, c).to_vec();
            let dst = dx.plane_mut(n, c);
            for y in 0..h {
                for x in 0..w {
                    let i = 2 * y * dy.w + 2 * x;
                    dst[y * w + x] = (g[i] + g[i + 1]) + (g[i + dy.w] + g[i + dy.w + 1]);
                }
            }
        }
    }
    dx
}

pub struct BatchNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
}

/// Per-channel mean and biased variance over batch and space.
pub fn channel_stats(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let m = (x.n * x.plane_len()) as f64;
    let mut mean = vec![0.0f32; x.c];
    let mut var = vec![0.0f32; x.c];
    for c in 0..x.c {
        let s: f64 = (0..x.n)
            .map(|n| x.plane(n, c).iter().map(|&v| f64::from(v)).sum::<f64>())
            .sum();
        let mu = s / m;
        let v: f64 = (0..x.n)
            .map(|n| {
                x.plane(n, c)
                    .iter()
                    .map(|&v| (f64::from(v) - mu).powi(2))
                    .sum::<f64>()
            })
            .sum();
        mean[c] = mu as f32;
        var[c] = (v / m) as f32;
    }
    (mean, var)
}

/// Normalization with batch statistics; returns the output, the cache, and
/// the batch mean and variance.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
) -> (Tensor, BatchNormCache, Vec<f32>, Vec<f32>) {
    let (mean, var) = channel_stats(x);
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Tensor::zeros_like(x);
    let mut y = Tensor::zeros_like(x);
    for n in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(n, c);
            let (mu, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
            let start = (n * x.c + c) * x.plane_len();
            let xh = &mut xhat.data[start..start + src.len()];
            for (o, &v) in xh.iter_mut().zip(src) {
                *o = (v - mu) * is;
            }
            for (o, &v) in y.data[start..start + src.len()].iter_mut().zip(xh.iter()) {
                *o = g * v + b;
            }
        }
    }
    (y, BatchNormCache { xhat, inv_std }, mean, var)
}

pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
) -> Tensor {
    let mut y = Tensor::zeros_like(x);
    for n in 0..x.n {
        for c in 0..x.c {
            let scale = gamma[c] / (var[c] + BN_EPS).sqrt();
            let shift = beta[c] - mean[c] * scale;
            let start = (n * x.c + c) * x.plane_len();
            for (o, &v) in y.data[start..start + x.plane_len()]
                .iter_mut()
                .zip(x.plane(n, c))
            {
                *o = v * scale + shift;
            }
        }
    }
    y
}

pub fn batch_norm_backward(
    cache: &BatchNormCache,
    gamma: &[f32],
    dy: &Tensor,
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) -> Tensor {
    let xhat = &cache.xhat;
    let m = (xhat.n * xhat.plane_len()) as f32;
    let mut dx = Tensor::zeros_like(dy);
    for c in 0..dy.c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for n in 0..dy.n {
            let g = dy.plane(n, c);
            sum_dy += g.iter().map(|&v| f64::from(v)).sum::<f64>();
            sum_dy_xhat += f64::from(dot(g, xhat.plane(n, c)));
        }
        dgamma[c] += sum_dy_xhat as f32;
        dbeta[c] += sum_dy as f32;
        // dx = γ·inv_std/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
        let k = gamma[c] * cache.inv_std[c] / m;
        let (sd, sdx) = (sum_dy as f32, sum_dy_xhat as f32);
        for n in 0..dy.n {
            let start = (n * dy.c + c) * dy.plane_len();
            let g = dy.plane(n, c);
            let xh = xhat.plane(n, c);
            for ((o, &gv), &xv) in dx.data[start..start + g.len()]
                .iter_mut()
                .zip(g)
                .zip(xh)
            {
                *o = k * (m * gv - sd - xv * sdx);
            }
        }
    }
    dx
}

/// Softmax over channels at every pixel.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let mut y = Tensor::zeros_like(x);
    let p = x.plane_len();
    for n in 0..x.n {
        for i in 0..p {
            let at = |c: usize| (n * x.c + c) * p + i;
            let max = (0..x.c).map(|c| x.data[at(c)]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for c in 0..x.c {
                let e = (x.data[at(c)] - max).exp();
                y.data[at(c)] = e;
                sum += e;
            }
            for c in 0..x.c {
                y.data[at(c)] /= sum;
            }
        }
    }
    y
}

/// Gradient through the channel softmax given its output `y`.
pub fn softmax_channels_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros_like(y);
    let p = y.plane_len();
    for n in 0..y.n {
        for i in 0..p {
            let at = |c: usize| (n * y.c + c) * p + i;
            let inner: f32 = (0..y.c).map(|c| y.data[at(c)] * dy.data[at(c)]).sum();
            for c in 0..y.c {
                dx.data[at(c)] = y.data[at(c)] * (dy.data[at(c)] - inner);
            }
        }
    }
    dx
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    Tensor::from_vec(x.n, x.c, x.h, x.w, data)
}

pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::from_vec(y.n, y.c, y.h, y.w, data)
}

/// `v / sqrt(|v|² + ε)` for one 3-vector.
pub fn unit_normalize<F: Float>(v: [F; 3], eps: F) -> [F; 3] {
    let s = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + eps).sqrt();
    [v[0] / s, v[1] / s, v[2] / s]
}

/// Vector-Jacobian product of [`unit_normalize`]: `(g − y (y·g)) / s`.
pub fn unit_normalize_backward<F: Float>(v: [F; 3], g: [F; 3], eps: F) -> [F; 3] {
    let s = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + eps).sqrt();
    let y = [v[0] / s, v[1] / s, v[2] / s];
    let yg = y[0] * g[0] + y[1] * g[1] + y[2] * g[2];
    [
        (g[0] - y[0] * yg) / s,
        (g[1] - y[1] * yg) / s,
        (g[2] - y[2] * yg) / s,
    ]
}

fn pixel_vec(t: &Tensor, n: usize, i: usize) -> [f32; 3] {
    let p = t.plane_len();
    let base = n * t.c * p + i;
    [t.data[base], t.data[base + p], t.data[base + 2 * p]]
}

/// Unit-normalize the 3-channel vector at every pixel.
pub fn unit_normalize_channels(x: &Tensor) -> Tensor {
    assert_eq!(x.c, 3, "unit normalization expects 3 channels");
    let mut y = Tensor::zeros_like(x);
    let p = x.plane_len();
    for n in 0..x.n {
        for i in 0..p {
            let u = unit_normalize(pixel_vec(x, n, i), UNIT_NORM_EPS as f32);
            for (c, v) in u.iter().enumerate() {
                y.data[(n * 3 + c) * p + i] = *v;
            }
        }
    }
    y
}

pub fn unit_normalize_channels_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros_like(x);
    let p = x.plane_len();
    for n in 0..x.n {
        for i in 0..p {
            let d = unit_normalize_backward(
                pixel_vec(x, n, i),
                pixel_vec(dy, n, i),
                UNIT_NORM_EPS as f32,
            );
            for (c, v) in d.iter().enumerate() {
                dx.data[(n * 3 + c) * p + i] = *v;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(n, c, h, w, data)
    }

    /// Direct definition of a padded correlation, for comparison.
    fn naive_conv(x: &Tensor, w: &[f32], cout: usize, g: ConvGeom) -> Tensor {
        let (ho, wo) = (g.out_dim(x.h), g.out_dim(x.w));
        let p = g.pad() as isize;
        let mut out = Tensor::zeros(x.n, cout, ho, wo);
        for n in 0..x.n {
            for oc in 0..cout {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = 0.0f64;
                        for ic in 0..x.c {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (y * g.stride) as isize + ky as isize - p;
                                    let ix = (xx * g.stride) as isize + kx as isize - p;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                        acc += f64::from(w[((oc * x.c + ic) * g.k + ky) * g.k + kx])
                                            * f64::from(x.plane(n, ic)[iy as usize * x.w + ix as usize]);
                                    }
                                }
                            }
                        }
                        out.plane_mut(n, oc)[y * wo + xx] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, stride) in &[(3, 1), (3, 2), (1, 1)] {
            let g = ConvGeom { k, stride };
            let x = random(2, 3, 6, 8, &mut rng);
            let w: Vec<f32> = (0..4 * 3 * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv2d_forward(&x, &w, None, 4, g);
            let slow = naive_conv(&x, &w, 4, g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    /// Scalar objective `Σ r ⊙ f(x)` differentiated numerically in f64 around
    /// f32 inputs; the tolerance covers f32 rounding.
    fn check_grad(
        x: &Tensor,
        analytic: &[f32],
        mut f: impl FnMut(&Tensor) -> f64,
        what: &str,
    ) {
        let h = 1e-2f32;
        for (i, &a) in analytic.iter().enumerate() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * f64::from(h));
            let a = f64::from(a);
            assert!(
                (num - a).abs() <= 2e-3 + 2e-3 * a.abs(),
                "{what}[{i}]: numeric {num} analytic {a}"
            );
        }
    }

    fn weighted_sum(t: &Tensor, r: &Tensor) -> f64 {
        t.data.iter().zip(&r.data).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, stride) in &[(3, 1), (3, 2), (1, 1)] {
            let g = ConvGeom { k, stride };
            let x = random(2, 2, 4, 6, &mut rng);
            let w: Vec<f32> = (0..3 * 2 * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = vec![0.1, -0.2, 0.3];
            let y = conv2d_forward(&x, &w, Some(&b), 3, g);
            let r = random(y.n, y.c, y.h, y.w, &mut rng);
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; 3];
            let dx = conv2d_backward(&x, &w, &r, g, &mut dw, Some(&mut db));
            check_grad(&x, &dx.data, |xx| weighted_sum(&conv2d_forward(xx, &w, Some(&b), 3, g), &r), "conv dx");
            let wt = Tensor::from_vec(1, 1, 1, w.len(), w.clone());
            check_grad(&wt, &dw, |ww| weighted_sum(&conv2d_forward(&x, &ww.data, Some(&b), 3, g), &r), "conv dw");
            let bt = Tensor::from_vec(1, 1, 1, 3, b.clone());
            check_grad(&bt, &db, |bb| weighted_sum(&conv2d_forward(&x, &w, Some(&bb.data), 3, g), &r), "conv db");
        }
    }

    #[test]
    fn depthwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeom { k: 3, stride: 1 };
        let x = random(2, 3, 5, 4, &mut rng);
        let w: Vec<f32> = (0..3 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = depthwise_forward(&x, &w, g);
        let r = random(y.n, y.c, y.h, y.w, &mut rng);
        let mut dw = vec![0.0; w.len()];
        let dx = depthwise_backward(&x, &w, &r, g, &mut dw);
        check_grad(&x, &dx.data, |xx| weighted_sum(&depthwise_forward(xx, &w, g), &r), "dw dx");
        let wt = Tensor::from_vec(1, 1, 1, w.len(), w.clone());
        check_grad(&wt, &dw, |ww| weighted_sum(&depthwise_forward(&x, &ww.data, g), &r), "dw dw");
    }

    #[test]
    fn pool_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(2, 2, 4, 6, &mut rng);
        let (y, arg) = max_pool2(&x);
        let r = random(y.n, y.c, y.h, y.w, &mut rng);
        let dx = max_pool2_backward(&r, &arg, x.h, x.w);
        check_grad(&x, &dx.data, |xx| weighted_sum(&max_pool2(xx).0, &r), "pool");

        let u = upsample2(&x);
        let r = random(u.n, u.c, u.h, u.w, &mut rng);
        let dx = upsample2_backward(&r);
        check_grad(&x, &dx.data, |xx| weighted_sum(&upsample2(xx), &r), "upsample");
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(3, 2, 3, 3, &mut rng);
        let gamma = vec![1.3, 0.7];
        let beta = vec![0.1, -0.4];
        let (y, cache, _, _) = batch_norm_train(&x, &gamma, &beta);
        let r = random(y.n, y.c, y.h, y.w, &mut rng);
        let mut dg = vec![0.0; 2];
        let mut dbeta = vec![0.0; 2];
        let dx = batch_norm_backward(&cache, &gamma, &r, &mut dg, &mut dbeta);
        check_grad(&x, &dx.data, |xx| weighted_sum(&batch_norm_train(xx, &gamma, &beta).0, &r), "bn dx");
        let gt = Tensor::from_vec(1, 1, 1, 2, gamma.clone());
        check_grad(&gt, &dg, |gg| weighted_sum(&batch_norm_train(&x, &gg.data, &beta).0, &r), "bn dgamma");
    }

    #[test]
    fn batch_norm_zero_input_is_finite() {
        let x = Tensor::zeros(2, 3, 4, 4);
        let (y, _, _, var) = batch_norm_train(&x, &[1.0; 3], &[0.0; 3]);
        assert!(y.all_finite());
        assert_eq!(var, vec![0.0; 3]);
    }

    #[test]
    fn softmax_sigmoid_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(2, 3, 2, 3, &mut rng);
        let y = softmax_channels(&x);
        for n in 0..2 {
            for i in 0..6 {
                let s: f32 = (0..3).map(|c| y.plane(n, c)[i]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        let r = random(2, 3, 2, 3, &mut rng);
        let dx = softmax_channels_backward(&y, &r);
        check_grad(&x, &dx.data, |xx| weighted_sum(&softmax_channels(xx), &r), "softmax");

        let y = sigmoid(&x);
        let dx = sigmoid_backward(&y, &r);
        check_grad(&x, &dx.data, |xx| weighted_sum(&sigmoid(xx), &r), "sigmoid");

        let y = unit_normalize_channels(&x);
        let dx = unit_normalize_channels_backward(&x, &r);
        check_grad(&x, &dx.data, |xx| weighted_sum(&unit_normalize_channels(xx), &r), "unit norm");
        for n in 0..2 {
            for i in 0..6 {
                let s: f32 = (0..3).map(|c| y.plane(n, c)[i].powi(2)).sum();
                assert!((s.sqrt() - 1.0).abs() < 1e-6);
            }
        }
    }
}
