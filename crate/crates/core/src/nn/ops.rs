//! Forward and backward kernels for the layers of the segmentation network.
//!
//! Every backward function takes the values cached by its forward and the
//! upstream gradient, and returns (or accumulates) the downstream gradients.

use super::tensor::Tensor;

/// `c += a * b` for row-major `a: m×k`, `b: k×n`, `c: m×n` given by strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    // SAFETY: callers pass slices whose extents cover the strided views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

fn im2col3(x: &[f64], c: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = 0.0;
                            out[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..w - 1].copy_from_slice(&src[1..]);
                            out[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

fn col2im3(col: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Square convolution with kernel size 1 or 3 (zero padding keeps the size).
/// `weight` is `[cout, cin, k, k]` flattened.
pub fn conv2d(x: &Tensor, weight: &[f64], bias: Option<&[f64]>, cout: usize, k: usize) -> Tensor {
    debug_assert!(k == 1 || k == 3);
    let (n, cin, h, w) = (x.n, x.c, x.h, x.w);
    let hw = h * w;
    let kk = cin * k * k;
    debug_assert_eq!(weight.len(), cout * kk);
    let mut y = Tensor::zeros(n, cout, h, w);
    let mut col = if k == 3 { vec![0.0; kk * hw] } else { Vec::new() };
    for s in 0..n {
        let xs = x.sample(s);
        let b: &[f64] = if k == 3 {
            im2col3(xs, cin, h, w, &mut col);
            &col
        } else {
            xs
        };
        let ys = y.sample_mut(s);
        if let Some(bias) = bias {
            for (co, bv) in bias.iter().enumerate() {
                ys[co * hw..(co + 1) * hw].fill(*bv);
            }
        }
        gemm(
            cout,
            kk,
            hw,
            weight,
            kk as isize,
            1,
            b,
            hw as isize,
            1,
            if bias.is_some() { 1.0 } else { 0.0 },
            ys,
        );
    }
    y
}

/// Backward of [`conv2d`]. Accumulates into `dweight`/`dbias` and returns `dx`
/// when `need_dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &Tensor,
    weight: &[f64],
    dy: &Tensor,
    k: usize,
    dweight: &mut [f64],
    dbias: Option<&mut [f64]>,
    need_dx: bool,
) -> Option<Tensor> {
    let (n, cin, h, w) = (x.n, x.c, x.h, x.w);
    let cout = dy.c;
    let hw = h * w;
    let kk = cin * k * k;
    let mut col = if k == 3 { vec![0.0; kk * hw] } else { Vec::new() };
    let mut dcol = vec![0.0; kk * hw];
    let mut dx = need_dx.then(|| Tensor::zeros(n, cin, h, w));
    if let Some(db) = dbias {
        for s in 0..n {
            let g = dy.sample(s);
            for (co, d) in db.iter_mut().enumerate() {
                *d += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
            }
        }
    }
    for s in 0..n {
        let xs = x.sample(s);
        let b: &[f64] = if k == 3 {
            im2col3(xs, cin, h, w, &mut col);
            &col
        } else {
            xs
        };
        let g = dy.sample(s);
        // dW (cout×kk) += dy (cout×hw) · colᵀ (hw×kk)
        gemm(cout, hw, kk, g, hw as isize, 1, b, 1, hw as isize, 1.0, dweight);
        if let Some(dx) = dx.as_mut() {
            // dcol (kk×hw) = Wᵀ (kk×cout) · dy (cout×hw)
            gemm(kk, cout, hw, weight, 1, kk as isize, g, hw as isize, 1, 0.0, &mut dcol);
            let dxs = dx.sample_mut(s);
            if k == 3 {
                col2im3(&dcol, cin, h, w, dxs);
            } else {
                dxs.copy_from_slice(&dcol);
            }
        }
    }
    dx
}

/// Values cached by a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over (n, h, w) per channel using batch statistics.
/// Returns the normalized-affine output, the cache, and the batch mean and
/// unbiased variance (for running-average updates).
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
) -> (Tensor, BatchNormCache, Vec<f64>, Vec<f64>) {
    let (n, c, hw) = (x.n, x.c, x.plane());
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for s in 0..n {
        let xs = x.sample(s);
        for ch in 0..c {
            mean[ch] += xs[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    for s in 0..n {
        let xs = x.sample(s);
        for ch in 0..c {
            let mu = mean[ch];
            var[ch] += xs[ch * hw..(ch + 1) * hw]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / m + BN_EPS).sqrt()).collect();
    let unbiased: Vec<f64> = var
        .iter()
        .map(|v| if m > 1.0 { v / (m - 1.0) } else { 0.0 })
        .collect();
    let mut xhat = Tensor::zeros(n, c, x.h, x.w);
    let mut y = Tensor::zeros(n, c, x.h, x.w);
    for s in 0..n {
        let xs = x.sample(s);
        let off = s * c * hw;
        for ch in 0..c {
            let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in ch * hw..(ch + 1) * hw {
                let xh = (xs[i] - mu) * is;
                xhat.data[off + i] = xh;
                y.data[off + i] = g * xh + b;
            }
        }
    }
    (y, BatchNormCache { xhat, inv_std }, mean, unbiased)
}

pub fn batch_norm_eval(x: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Tensor {
    let (n, c, hw) = (x.n, x.c, x.plane());
    let mut y = Tensor::zeros(n, c, x.h, x.w);
    for s in 0..n {
        let off = s * c * hw;
        for ch in 0..c {
            let is = 1.0 / (var[ch] + BN_EPS).sqrt();
            let (mu, g, b) = (mean[ch], gamma[ch], beta[ch]);
            for i in off + ch * hw..off + (ch + 1) * hw {
                y.data[i] = g * (x.data[i] - mu) * is + b;
            }
        }
    }
    y
}

/// Backward of [`batch_norm_train`]; accumulates `dgamma`, `dbeta`.
pub fn batch_norm_backward(
    cache: &BatchNormCache,
    gamma: &[f64],
    dy: &Tensor,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Tensor {
    let (n, c, hw) = (dy.n, dy.c, dy.plane());
    let m = (n * hw) as f64;
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for s in 0..n {
        let off = s * c * hw;
        for ch in 0..c {
            for i in off + ch * hw..off + (ch + 1) * hw {
                sum_dy[ch] += dy.data[i];
                sum_dy_xhat[ch] += dy.data[i] * cache.xhat.data[i];
            }
        }
    }
    for ch in 0..c {
        dgamma[ch] += sum_dy_xhat[ch];
        dbeta[ch] += sum_dy[ch];
    }
    let mut dx = Tensor::zeros(n, c, dy.h, dy.w);
    for s in 0..n {
        let off = s * c * hw;
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / m;
            let (sd, sdx) = (sum_dy[ch], sum_dy_xhat[ch]);
            for i in off + ch * hw..off + (ch + 1) * hw {
                dx.data[i] = k * (m * dy.data[i] - sd - cache.xhat.data[i] * sdx);
            }
        }
    }
    dx
}

pub fn leaky_relu_inplace(x: &mut Tensor, slope: f64) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Backward of leaky ReLU given the activation output (sign-preserving for
/// positive slopes).
pub fn leaky_relu_backward_inplace(out: &Tensor, dy: &mut Tensor, slope: f64) {
    for (g, o) in dy.data.iter_mut().zip(&out.data) {
        if *o < 0.0 {
            *g *= slope;
        }
    }
}

/// 2×2 max pooling with stride 2. Returns the output and the argmax offset
/// (0..4) of each output element.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u8; y.len()];
    let mut o = 0;
    for p in 0..x.n * x.c {
        let plane = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
        for yy in 0..oh {
            for xx in 0..ow {
                let base = 2 * yy * x.w + 2 * xx;
                let cands = [base, base + 1, base + x.w, base + x.w + 1];
                let mut best = 0;
                for (j, &ci) in cands.iter().enumerate().skip(1) {
                    if plane[ci] > plane[cands[best]] {
                        best = j;
                    }
                }
                y.data[o] = plane[cands[best]];
                arg[o] = best as u8;
                o += 1;
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward(dy: &Tensor, arg: &[u8], in_h: usize, in_w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.n, dy.c, in_h, in_w);
    let mut o = 0;
    for p in 0..dy.n * dy.c {
        let plane = &mut dx.data[p * in_h * in_w..(p + 1) * in_h * in_w];
        for yy in 0..dy.h {
            for xx in 0..dy.w {
                let a = arg[o] as usize;
                let idx = (2 * yy + a / 2) * in_w + 2 * xx + a % 2;
                plane[idx] += dy.data[o];
                o += 1;
            }
        }
    }
    dx
}

/// 1D linear interpolation taps for resizing `n_in` samples to `n_out`
/// with half-pixel centers (`align_corners = false`).
pub fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every plane to `oh × ow`.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    if x.h == oh && x.w == ow {
        return x.clone();
    }
    let ty = linear_taps(x.h, oh);
    let tx = linear_taps(x.w, ow);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    let mut tmp = vec![0.0; x.h * ow];
    for p in 0..x.n * x.c {
        let plane = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
        for r in 0..x.h {
            let row = &plane[r * x.w..(r + 1) * x.w];
            for (c, &(i0, i1, l)) in tx.iter().enumerate() {
                tmp[r * ow + c] = row[i0] * (1.0 - l) + row[i1] * l;
            }
        }
        let out = &mut y.data[p * oh * ow..(p + 1) * oh * ow];
        for (r, &(i0, i1, l)) in ty.iter().enumerate() {
            for c in 0..ow {
                out[r * ow + c] = tmp[i0 * ow + c] * (1.0 - l) + tmp[i1 * ow + c] * l;
            }
        }
    }
    y
}

pub fn resize_bilinear_backward(dy: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    if dy.h == in_h && dy.w == in_w {
        return dy.clone();
    }
    let (oh, ow) = (dy.h, dy.w);
    let ty = linear_taps(in_h, oh);
    let tx = linear_taps(in_w, ow);
    let mut dx = Tensor::zeros(dy.n, dy.c, in_h, in_w);
    let mut tmp = vec![0.0; in_h * ow];
    for p in 0..dy.n * dy.c {
        tmp.fill(0.0);
        let g = &dy.data[p * oh * ow..(p + 1) * oh * ow];
        for (r, &(i0, i1, l)) in ty.iter().enumerate() {
            for c in 0..ow {
                let v = g[r * ow + c];
                tmp[i0 * ow + c] += v * (1.0 - l);
                tmp[i1 * ow + c] += v * l;
            }
        }
        let out = &mut dx.data[p * in_h * in_w..(p + 1) * in_h * in_w];
        for r in 0..in_h {
            for (c, &(i0, i1, l)) in tx.iter().enumerate() {
                let v = tmp[r * ow + c];
                out[r * in_w + i0] += v * (1.0 - l);
                out[r * in_w + i1] += v * l;
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
    let mut y = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for s in 0..a.n {
        let out = y.sample_mut(s);
        let sa = a.sample(s);
        out[..sa.len()].copy_from_slice(sa);
        out[sa.len()..].copy_from_slice(b.sample(s));
    }
    y
}

pub fn split_channels(dy: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let cb = dy.c - ca;
    let mut a = Tensor::zeros(dy.n, ca, dy.h, dy.w);
    let mut b = Tensor::zeros(dy.n, cb, dy.h, dy.w);
    let la = ca * dy.plane();
    for s in 0..dy.n {
        let g = dy.sample(s);
        a.sample_mut(s).copy_from_slice(&g[..la]);
        b.sample_mut(s).copy_from_slice(&g[la..]);
    }
    (a, b)
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let (c, hw) = (logits.c, logits.plane());
    let mut p = Tensor::zeros(logits.n, c, logits.h, logits.w);
    let mut buf = vec![0.0; c];
    for s in 0..logits.n {
        let src = logits.sample(s);
        let dst = p.sample_mut(s);
        for i in 0..hw {
            let mut mx = f64::NEG_INFINITY;
            for k in 0..c {
                buf[k] = src[k * hw + i];
                mx = mx.max(buf[k]);
            }
            let mut z = 0.0;
            for b in buf.iter_mut() {
                *b = (*b - mx).exp();
                z += *b;
            }
            for k in 0..c {
                dst[k * hw + i] = buf[k] / z;
            }
        }
    }
    p
}
