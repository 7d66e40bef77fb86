//! Layer kernels with hand-written backward passes.
//!
//! Feature maps are channel-major `[C][H][W]` buffers of `f64`. Every
//! forward returns what its backward needs; backward functions accumulate
//! parameter gradients in place and return the input gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureMap { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_data(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), c * h * w);
        FeatureMap { c, h, w, data }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.hw();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Row-major `C = alpha * A(m×k) * B(k×n) + beta * C`, with arbitrary strides
/// on A and B.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    unsafe {
        // SAFETY: the strides describe in-bounds views of `a`, `b` and `c`,
        // checked by the callers' shape bookkeeping.
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1 "same" convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn pad(&self) -> isize {
        (self.dilation * (self.kernel - 1) / 2) as isize
    }
}

fn im2col(x: &FeatureMap, g: ConvGeom) -> Vec<f64> {
    let (h, w, k) = (x.h, x.w, g.kernel);
    let hw = h * w;
    let pad = g.pad();
    let mut cols = vec![0.0; g.rows() * hw];
    for ci in 0..g.cin {
        let plane = x.channel(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let oy = (ky * g.dilation) as isize - pad;
                let ox = (kx * g.dilation) as isize - pad;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    for xx in x0..x1 {
                        dst_row[xx] = src_row[(xx as isize + ox) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: ConvGeom, h: usize, w: usize) -> FeatureMap {
    let hw = h * w;
    let k = g.kernel;
    let pad = g.pad();
    let mut out = FeatureMap::zeros(g.cin, h, w);
    for ci in 0..g.cin {
        let plane = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let oy = (ky * g.dilation) as isize - pad;
                let ox = (kx * g.dilation) as isize - pad;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    for xx in x0..x1 {
                        plane[sy as usize * w + (xx as isize + ox) as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

/// Convolution without bias. `weight` is `[cout][cin][k][k]`.
pub fn conv_forward(x: &FeatureMap, weight: &[f64], g: ConvGeom) -> FeatureMap {
    debug_assert_eq!(x.c, g.cin);
    let hw = x.hw();
    let mut out = FeatureMap::zeros(g.cout, x.h, x.w);
    if g.kernel == 1 && g.dilation == 1 {
        gemm(g.cout, g.cin, hw, weight, (g.cin, 1), &x.data, (hw, 1), 0.0, &mut out.data);
    } else {
        let cols = im2col(x, g);
        gemm(g.cout, g.rows(), hw, weight, (g.rows(), 1), &cols, (hw, 1), 0.0, &mut out.data);
    }
    out
}

/// Accumulates the weight gradient into `dweight` and returns the input gradient.
pub fn conv_backward(x: &FeatureMap, weight: &[f64], g: ConvGeom, dout: &FeatureMap, dweight: &mut [f64]) -> FeatureMap {
    let hw = x.hw();
    let rows = g.rows();
    if g.kernel == 1 && g.dilation == 1 {
        gemm(g.cout, hw, rows, &dout.data, (hw, 1), &x.data, (1, hw), 1.0, dweight);
        let mut dx = FeatureMap::zeros(g.cin, x.h, x.w);
        gemm(rows, g.cout, hw, weight, (1, rows), &dout.data, (hw, 1), 0.0, &mut dx.data);
        return dx;
    }
    let cols = im2col(x, g);
    gemm(g.cout, hw, rows, &dout.data, (hw, 1), &cols, (1, hw), 1.0, dweight);
    let mut dcols = vec![0.0; rows * hw];
    gemm(rows, g.cout, hw, weight, (1, rows), &dout.data, (hw, 1), 0.0, &mut dcols);
    col2im(&dcols, g, x.h, x.w)
}

/// Per-channel (instance) normalization statistics.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: FeatureMap,
    pub inv_std: Vec<f64>,
}

pub fn instance_norm_forward(x: &FeatureMap, gamma: &[f64], beta: &[f64]) -> (FeatureMap, NormCache) {
    let n = x.hw() as f64;
    let mut xhat = FeatureMap::zeros(x.c, x.h, x.w);
    let mut out = FeatureMap::zeros(x.c, x.h, x.w);
    let mut inv_std = Vec::with_capacity(x.c);
    for c in 0..x.c {
        let src = x.channel(c);
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(istd);
        let range = c * x.hw()..(c + 1) * x.hw();
        for ((xh, o), &v) in xhat.data[range.clone()].iter_mut().zip(&mut out.data[range]).zip(src) {
            *xh = (v - mean) * istd;
            *o = gamma[c] * *xh + beta[c];
        }
    }
    (out, NormCache { xhat, inv_std })
}

pub fn instance_norm_backward(
    cache: &NormCache,
    gamma: &[f64],
    dout: &FeatureMap,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> FeatureMap {
    let xhat = &cache.xhat;
    let n = xhat.hw() as f64;
    let mut dx = FeatureMap::zeros(xhat.c, xhat.h, xhat.w);
    for c in 0..xhat.c {
        let xh = xhat.channel(c);
        let dy = dout.channel(c);
        let mut sum_dy = 0.0;
        let mut sum_dy_xh = 0.0;
        for (&g, &x) in dy.iter().zip(xh) {
            sum_dy += g;
            sum_dy_xh += g * x;
        }
        dgamma[c] += sum_dy_xh;
        dbeta[c] += sum_dy;
        // dxhat = dy * gamma
        let scale = gamma[c] * cache.inv_std[c] / n;
        let range = c * xhat.hw()..(c + 1) * xhat.hw();
        for ((o, &g), &x) in dx.data[range].iter_mut().zip(dy).zip(xh) {
            *o = scale * (n * g - sum_dy - x * sum_dy_xh);
        }
    }
    dx
}

pub fn relu_inplace(x: &mut FeatureMap) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_inplace(out: &FeatureMap, grad: &mut FeatureMap) {
    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max pooling, stride 2. Returns the pooled map and the flat argmax of
/// each output cell; ties resolve to the first position in row-major order.
pub fn maxpool_forward(x: &FeatureMap) -> (FeatureMap, Vec<u32>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = FeatureMap::zeros(x.c, h2, w2);
    let mut arg = Vec::with_capacity(x.c * h2 * w2);
    for c in 0..x.c {
        let base = c * x.hw();
        for y in 0..h2 {
            for xx in 0..w2 {
                let mut best = base + 2 * y * x.w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * x.w + 2 * xx + dx;
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                out.data[(c * h2 + y) * w2 + xx] = x.data[best];
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(arg: &[u32], dout: &FeatureMap, c: usize, h: usize, w: usize) -> FeatureMap {
    let mut dx = FeatureMap::zeros(c, h, w);
    for (&i, &g) in arg.iter().zip(&dout.data) {
        dx.data[i as usize] += g;
    }
    dx
}

/// Transposed 2×2 convolution with stride 2. `weight` is `[cin][cout][2][2]`.
pub fn upconv_forward(x: &FeatureMap, weight: &[f64], bias: &[f64], cout: usize) -> FeatureMap {
    let hw = x.hw();
    let taps = cout * 4;
    let mut t = vec![0.0; taps * hw];
    gemm(taps, x.c, hw, weight, (1, taps), &x.data, (hw, 1), 0.0, &mut t);
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = FeatureMap::zeros(cout, h2, w2);
    for co in 0..cout {
        for a in 0..2 {
            for b in 0..2 {
                let row = &t[((co * 4) + a * 2 + b) * hw..][..hw];
                for y in 0..x.h {
                    for xx in 0..x.w {
                        out.data[(co * h2 + 2 * y + a) * w2 + 2 * xx + b] = row[y * x.w + xx] + bias[co];
                    }
                }
            }
        }
    }
    out
}

pub fn upconv_backward(
    x: &FeatureMap,
    weight: &[f64],
    dout: &FeatureMap,
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> FeatureMap {
    let cout = dout.c;
    let hw = x.hw();
    let taps = cout * 4;
    let (h2, w2) = (dout.h, dout.w);
    let mut dt = vec![0.0; taps * hw];
    for co in 0..cout {
        dbias[co] += dout.channel(co).iter().sum::<f64>();
        for a in 0..2 {
            for b in 0..2 {
                let row = &mut dt[((co * 4) + a * 2 + b) * hw..][..hw];
                for y in 0..x.h {
                    for xx in 0..x.w {
                        row[y * x.w + xx] = dout.data[(co * h2 + 2 * y + a) * w2 + 2 * xx + b];
                    }
                }
            }
        }
    }
    gemm(x.c, hw, taps, &x.data, (hw, 1), &dt, (1, hw), 1.0, dweight);
    let mut dx = FeatureMap::zeros(x.c, x.h, x.w);
    gemm(x.c, taps, hw, weight, (taps, 1), &dt, (hw, 1), 0.0, &mut dx.data);
    dx
}

/// Inverted-dropout mask: each entry is `0` or `1 / (1 - p)`.
pub fn dropout_mask(len: usize, p: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
}

/// Channel softmax at every pixel of a logit map.
pub fn softmax_channels(logits: &FeatureMap) -> FeatureMap {
    let hw = logits.hw();
    let mut out = FeatureMap::zeros(logits.c, logits.h, logits.w);
    for p in 0..hw {
        let max = (0..logits.c).map(|c| logits.data[c * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..logits.c {
            let e = (logits.data[c * hw + p] - max).exp();
            out.data[c * hw + p] = e;
            sum += e;
        }
        for c in 0..logits.c {
            out.data[c * hw + p] /= sum;
        }
    }
    out
}

/// Gradient of a channel softmax: `dz = p ⊙ (dp - Σ_c p dp)`.
pub fn softmax_channels_backward(probs: &FeatureMap, dprobs: &FeatureMap) -> FeatureMap {
    let hw = probs.hw();
    let mut dz = FeatureMap::zeros(probs.c, probs.h, probs.w);
    for p in 0..hw {
        let dot: f64 = (0..probs.c).map(|c| probs.data[c * hw + p] * dprobs.data[c * hw + p]).sum();
        for c in 0..probs.c {
            let i = c * hw + p;
            dz.data[i] = probs.data[i] * (dprobs.data[i] - dot);
        }
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_data(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct nested-loop convolution.
    fn conv_naive(x: &FeatureMap, weight: &[f64], g: ConvGeom) -> FeatureMap {
        let mut out = FeatureMap::zeros(g.cout, x.h, x.w);
        let pad = g.pad();
        for co in 0..g.cout {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut acc = 0.0;
                    for ci in 0..g.cin {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let sy = y + (ky * g.dilation) as isize - pad;
                                let sx = xx + (kx * g.dilation) as isize - pad;
                                if sy >= 0 && sx >= 0 && sy < x.h as isize && sx < x.w as isize {
                                    acc += weight[((co * g.cin + ci) * g.kernel + ky) * g.kernel + kx]
                                        * x.data[(ci * x.h + sy as usize) * x.w + sx as usize];
                                }
                            }
                        }
                    }
                    out.data[(co * x.h + y as usize) * x.w + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (k, dil) in [(3, 1), (3, 2), (3, 4), (1, 1)] {
            let g = ConvGeom { cin: 3, cout: 5, kernel: k, dilation: dil };
            let x = rand_map(3, 6, 7, 1);
            let w = rand_map(5, 3, k * k, 2).data;
            let fast = conv_forward(&x, &w, g);
            let slow = conv_naive(&x, &w, g);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Finite-difference check of a scalar functional `sum(out * r)`.
    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((num - analytic[i]).abs() < 1e-6 * (1.0 + num.abs()), "index {i}: {num} vs {}", analytic[i]);
        }
    }

    fn dot(a: &FeatureMap, b: &FeatureMap) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_backward_matches_fd() {
        let g = ConvGeom { cin: 2, cout: 3, kernel: 3, dilation: 2 };
        let x = rand_map(2, 5, 5, 3);
        let w = rand_map(3, 2, 9, 4).data;
        let r = rand_map(3, 5, 5, 5);
        let mut dw = vec![0.0; w.len()];
        let dx = conv_backward(&x, &w, g, &r, &mut dw);
        fd_check(|wv| dot(&conv_forward(&x, wv, g), &r), &w, &dw);
        fd_check(|xv| dot(&conv_forward(&FeatureMap::from_data(2, 5, 5, xv.to_vec()), &w, g), &r), &x.data, &dx.data);
    }

    #[test]
    fn norm_backward_matches_fd() {
        let x = rand_map(3, 4, 4, 6);
        let gamma = vec![0.5, 1.5, -1.0];
        let beta = vec![0.1, 0.0, 0.3];
        let r = rand_map(3, 4, 4, 7);
        let (_, cache) = instance_norm_forward(&x, &gamma, &beta);
        let (mut dg, mut db) = (vec![0.0; 3], vec![0.0; 3]);
        let dx = instance_norm_backward(&cache, &gamma, &r, &mut dg, &mut db);
        fd_check(|xv| dot(&instance_norm_forward(&FeatureMap::from_data(3, 4, 4, xv.to_vec()), &gamma, &beta).0, &r), &x.data, &dx.data);
        fd_check(|gv| dot(&instance_norm_forward(&x, gv, &beta).0, &r), &gamma, &dg);
        fd_check(|bv| dot(&instance_norm_forward(&x, &gamma, bv).0, &r), &beta, &db);
    }

    #[test]
    fn upconv_backward_matches_fd() {
        let x = rand_map(3, 3, 2, 8);
        let w = rand_map(3, 2, 4, 9).data;
        let b = vec![0.2, -0.1];
        let r = rand_map(2, 6, 4, 10);
        let (mut dw, mut db) = (vec![0.0; w.len()], vec![0.0; 2]);
        let dx = upconv_backward(&x, &w, &r, &mut dw, &mut db);
        fd_check(|wv| dot(&upconv_forward(&x, wv, &b, 2), &r), &w, &dw);
        fd_check(|bv| dot(&upconv_forward(&x, &w, bv, 2), &r), &b, &db);
        fd_check(|xv| dot(&upconv_forward(&FeatureMap::from_data(3, 3, 2, xv.to_vec()), &w, &b, 2), &r), &x.data, &dx.data);
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let z = rand_map(4, 2, 3, 11);
        let r = rand_map(4, 2, 3, 12);
        let p = softmax_channels(&z);
        let dz = softmax_channels_backward(&p, &r);
        fd_check(|zv| dot(&softmax_channels(&FeatureMap::from_data(4, 2, 3, zv.to_vec())), &r), &z.data, &dz.data);
    }

    #[test]
    fn maxpool_routes_to_argmax() {
        let x = FeatureMap::from_data(1, 2, 4, vec![1.0, 5.0, 0.0, 0.0, 2.0, 3.0, 0.0, 0.0]);
        let (out, arg) = maxpool_forward(&x);
        assert_eq!(out.data, vec![5.0, 0.0]);
        assert_eq!(arg, vec![1, 2]);
        let dx = maxpool_backward(&arg, &FeatureMap::from_data(1, 1, 2, vec![1.0, 2.0]), 1, 2, 4);
        assert_eq!(dx.data, vec![0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
