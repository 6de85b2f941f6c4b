//! Forward and backward kernels. Convolutional activations use a
//! channel-major `[C, N, H, W]` layout so that a whole batch is one GEMM and
//! batch-norm statistics are contiguous per channel.

use super::tensor::{matmul, Scalar};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Geom {
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn per_channel(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// `[N, C, H, W]` -> `[C, N, H, W]`.
pub fn to_channel_major<S: Scalar>(x: &[S], c: usize, g: Geom) -> Vec<S> {
    let p = g.plane();
    let mut out = vec![S::zero(); x.len()];
    for n in 0..g.n {
        for ch in 0..c {
            let src = &x[(n * c + ch) * p..(n * c + ch + 1) * p];
            out[(ch * g.n + n) * p..(ch * g.n + n + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// 3x3, stride 1, zero padding 1. Rows are `(ci, ky, kx)`, columns `(n, y, x)`.
pub fn im2col<S: Scalar>(x: &[S], cin: usize, g: Geom) -> Vec<S> {
    let cols_n = g.per_channel();
    let mut cols = vec![S::zero(); cin * 9 * cols_n];
    let (h, w) = (g.h as isize, g.w as isize);
    for ci in 0..cin {
        let xc = &x[ci * cols_n..(ci + 1) * cols_n];
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row = &mut cols[(ci * 9 + (ky * 3 + kx) as usize) * cols_n..][..cols_n];
                for n in 0..g.n {
                    let xs = &xc[n * g.plane()..(n + 1) * g.plane()];
                    let rs = &mut row[n * g.plane()..(n + 1) * g.plane()];
                    for y in 0..h {
                        let sy = y + ky - 1;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let x_lo = (1 - kx).max(0);
                        let x_hi = (w + 1 - kx).min(w);
                        for x in x_lo..x_hi {
                            rs[(y * w + x) as usize] = xs[(sy * w + x + kx - 1) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im<S: Scalar>(cols: &[S], cin: usize, g: Geom) -> Vec<S> {
    let cols_n = g.per_channel();
    let mut x = vec![S::zero(); cin * cols_n];
    let (h, w) = (g.h as isize, g.w as isize);
    for ci in 0..cin {
        let xc = &mut x[ci * cols_n..(ci + 1) * cols_n];
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row = &cols[(ci * 9 + (ky * 3 + kx) as usize) * cols_n..][..cols_n];
                for n in 0..g.n {
                    let xs = &mut xc[n * g.plane()..(n + 1) * g.plane()];
                    let rs = &row[n * g.plane()..(n + 1) * g.plane()];
                    for y in 0..h {
                        let sy = y + ky - 1;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let x_lo = (1 - kx).max(0);
                        let x_hi = (w + 1 - kx).min(w);
                        for x in x_lo..x_hi {
                            xs[(sy * w + x + kx - 1) as usize] += rs[(y * w + x) as usize];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Returns the `[Cout, N*H*W]` output and the column buffer for backward.
pub fn conv_forward<S: Scalar>(x: &[S], weight: &[S], bias: Option<&[S]>, cin: usize, cout: usize, g: Geom) -> (Vec<S>, Vec<S>) {
    let cols = im2col(x, cin, g);
    let m = g.per_channel();
    let mut out = vec![S::zero(); cout * m];
    matmul(weight, false, &cols, false, &mut out, cout, cin * 9, m, false);
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(m).enumerate() {
            row.iter_mut().for_each(|v| *v += b[co]);
        }
    }
    (out, cols)
}

/// Returns `(d_weight, d_bias, d_input)`.
pub fn conv_backward<S: Scalar>(
    dout: &[S],
    cols: &[S],
    weight: &[S],
    cin: usize,
    cout: usize,
    g: Geom,
    need_dx: bool,
) -> (Vec<S>, Vec<S>, Option<Vec<S>>) {
    let m = g.per_channel();
    let k = cin * 9;
    let mut dw = vec![S::zero(); cout * k];
    matmul(dout, false, cols, true, &mut dw, cout, m, k, false);
    let db = dout.chunks(m).map(|row| row.iter().copied().sum()).collect();
    let dx = need_dx.then(|| {
        let mut dcols = vec![S::zero(); k * m];
        matmul(weight, true, dout, false, &mut dcols, k, cout, m, false);
        col2im(&dcols, cin, g)
    });
    (dw, db, dx)
}

pub struct BnCache<S> {
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
    pub batch_mean: Vec<S>,
    pub batch_var: Vec<S>,
    pub train: bool,
}

/// Batch normalization over channel-major activations. With `running = None`
/// batch statistics are used; otherwise the given `(mean, var)`.
pub fn bn_forward<S: Scalar>(x: &[S], gamma: &[S], beta: &[S], c: usize, running: Option<(&[S], &[S])>) -> (Vec<S>, BnCache<S>) {
    let m = x.len() / c;
    let eps = S::c(BN_EPS);
    let mut out = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); x.len()];
    let mut inv_std = vec![S::zero(); c];
    let mut batch_mean = vec![S::zero(); c];
    let mut batch_var = vec![S::zero(); c];
    for ch in 0..c {
        let xs = &x[ch * m..(ch + 1) * m];
        let (mean, var) = match running {
            Some((rm, rv)) => (rm[ch], rv[ch]),
            None => {
                let mf = S::c(m as f64);
                let mean = xs.iter().copied().sum::<S>() / mf;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / mf;
                (mean, var)
            }
        };
        batch_mean[ch] = mean;
        batch_var[ch] = var;
        let is = S::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        for i in 0..m {
            let xh = (xs[i] - mean) * is;
            xhat[ch * m + i] = xh;
            out[ch * m + i] = gamma[ch] * xh + beta[ch];
        }
    }
    (
        out,
        BnCache {
            xhat,
            inv_std,
            batch_mean,
            batch_var,
            train: running.is_none(),
        },
    )
}

/// Returns `(d_gamma, d_beta, d_input)`.
pub fn bn_backward<S: Scalar>(dy: &[S], gamma: &[S], cache: &BnCache<S>, c: usize) -> (Vec<S>, Vec<S>, Vec<S>) {
    let m = dy.len() / c;
    let mf = S::c(m as f64);
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    let mut dx = vec![S::zero(); dy.len()];
    for ch in 0..c {
        let d = &dy[ch * m..(ch + 1) * m];
        let xh = &cache.xhat[ch * m..(ch + 1) * m];
        let sum_dy: S = d.iter().copied().sum();
        let sum_dy_xh: S = d.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let g = gamma[ch];
        let is = cache.inv_std[ch];
        let out = &mut dx[ch * m..(ch + 1) * m];
        if cache.train {
            for i in 0..m {
                out[i] = g * is / mf * (mf * d[i] - sum_dy - xh[i] * sum_dy_xh);
            }
        } else {
            for i in 0..m {
                out[i] = g * is * d[i];
            }
        }
    }
    (dgamma, dbeta, dx)
}

pub fn relu_inplace<S: Scalar>(x: &mut [S]) {
    x.iter_mut().for_each(|v| {
        if *v < S::zero() {
            *v = S::zero();
        }
    });
}

/// Masks `dy` where the forward output was not positive.
pub fn relu_backward<S: Scalar>(dy: &mut [S], out: &[S]) {
    dy.iter_mut().zip(out).for_each(|(d, &o)| {
        if o <= S::zero() {
            *d = S::zero();
        }
    });
}

/// 2x2 average pooling with stride 2 over channel-major activations; odd
/// trailing rows/columns are dropped.
pub fn avgpool_forward<S: Scalar>(x: &[S], c: usize, g: Geom) -> (Vec<S>, Geom) {
    let og = Geom {
        n: g.n,
        h: g.h / 2,
        w: g.w / 2,
    };
    let quarter = S::c(0.25);
    let mut out = vec![S::zero(); c * og.per_channel()];
    for plane in 0..c * g.n {
        let src = &x[plane * g.plane()..(plane + 1) * g.plane()];
        let dst = &mut out[plane * og.plane()..(plane + 1) * og.plane()];
        for y in 0..og.h {
            for xx in 0..og.w {
                let (sy, sx) = (2 * y, 2 * xx);
                dst[y * og.w + xx] = (src[sy * g.w + sx]
                    + src[sy * g.w + sx + 1]
                    + src[(sy + 1) * g.w + sx]
                    + src[(sy + 1) * g.w + sx + 1])
                    * quarter;
            }
        }
    }
    (out, og)
}

pub fn avgpool_backward<S: Scalar>(dy: &[S], c: usize, g: Geom) -> Vec<S> {
    let og = Geom {
        n: g.n,
        h: g.h / 2,
        w: g.w / 2,
    };
    let quarter = S::c(0.25);
    let mut dx = vec![S::zero(); c * g.per_channel()];
    for plane in 0..c * g.n {
        let src = &dy[plane * og.plane()..(plane + 1) * og.plane()];
        let dst = &mut dx[plane * g.plane()..(plane + 1) * g.plane()];
        for y in 0..og.h {
            for xx in 0..og.w {
                let v = src[y * og.w + xx] * quarter;
                let (sy, sx) = (2 * y, 2 * xx);
                dst[sy * g.w + sx] = v;
                dst[sy * g.w + sx + 1] = v;
                dst[(sy + 1) * g.w + sx] = v;
                dst[(sy + 1) * g.w + sx + 1] = v;
            }
        }
    }
    dx
}

/// Global average pool: channel-major `[C, N, H, W]` -> `[N, C]`.
pub fn gap_forward<S: Scalar>(x: &[S], c: usize, g: Geom) -> Vec<S> {
    let p = g.plane();
    let inv = S::c(1.0 / p as f64);
    let mut out = vec![S::zero(); g.n * c];
    for ch in 0..c {
        for n in 0..g.n {
            let s: S = x[(ch * g.n + n) * p..(ch * g.n + n + 1) * p].iter().copied().sum();
            out[n * c + ch] = s * inv;
        }
    }
    out
}

pub fn gap_backward<S: Scalar>(dy: &[S], c: usize, g: Geom) -> Vec<S> {
    let p = g.plane();
    let inv = S::c(1.0 / p as f64);
    let mut dx = vec![S::zero(); c * g.per_channel()];
    for ch in 0..c {
        for n in 0..g.n {
            let v = dy[n * c + ch] * inv;
            dx[(ch * g.n + n) * p..(ch * g.n + n + 1) * p]
                .iter_mut()
                .for_each(|d| *d = v);
        }
    }
    dx
}

/// `y = x W^T + b` for `x: [N, in]`, `W: [out, in]`.
pub fn linear_forward<S: Scalar>(x: &[S], weight: &[S], bias: &[S], n: usize, fin: usize, fout: usize) -> Vec<S> {
    let mut y = vec![S::zero(); n * fout];
    for row in y.chunks_mut(fout) {
        row.copy_from_slice(bias);
    }
    matmul(x, false, weight, true, &mut y, n, fin, fout, true);
    y
}

/// Returns `(d_weight, d_bias, d_input)`.
pub fn linear_backward<S: Scalar>(dy: &[S], x: &[S], weight: &[S], n: usize, fin: usize, fout: usize) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut dw = vec![S::zero(); fout * fin];
    matmul(dy, true, x, false, &mut dw, fout, n, fin, false);
    let mut db = vec![S::zero(); fout];
    for row in dy.chunks(fout) {
        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    let mut dx = vec![S::zero(); n * fin];
    matmul(dy, false, weight, false, &mut dx, n, fout, fin, false);
    (dw, db, dx)
}

/// Row-wise L2 normalization; returns `(normalized, norms)`.
pub fn l2_normalize<S: Scalar>(x: &[S], d: usize) -> (Vec<S>, Vec<S>) {
    let floor = S::c(1e-12);
    let mut out = vec![S::zero(); x.len()];
    let mut norms = Vec::with_capacity(x.len() / d);
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt().max(floor);
        norms.push(norm);
        o.iter_mut().zip(row).for_each(|(o, &v)| *o = v / norm);
    }
    (out, norms)
}

pub fn l2_normalize_backward<S: Scalar>(dz: &[S], z: &[S], norms: &[S], d: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); dz.len()];
    for (i, ((dzr, zr), dxr)) in dz.chunks(d).zip(z.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
        let dot: S = dzr.iter().zip(zr).map(|(&a, &b)| a * b).sum();
        for j in 0..d {
            dxr[j] = (dzr[j] - zr[j] * dot) / norms[i];
        }
    }
    dx
}

/// Mean softmax cross-entropy over rows of `logits: [N, K]`. Returns the loss,
/// the gradient w.r.t. the logits, and the number of rows whose arg-max equals
/// the target (ties resolved towards the lowest index).
pub fn softmax_cross_entropy<S: Scalar>(logits: &[S], targets: &[usize], k: usize) -> (f64, Vec<S>, usize) {
    let n = targets.len();
    let mut grad = vec![S::zero(); logits.len()];
    let mut loss = 0.0f64;
    let mut correct = 0;
    let inv_n = S::c(1.0 / n as f64);
    for (i, (row, g)) in logits.chunks(k).zip(grad.chunks_mut(k)).enumerate() {
        let t = targets[i];
        let (arg, max) = row
            .iter()
            .enumerate()
            .fold((0, S::neg_infinity()), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) });
        if arg == t {
            correct += 1;
        }
        let mut sum = S::zero();
        for (gj, &v) in g.iter_mut().zip(row) {
            let e = (v - max).exp();
            *gj = e;
            sum += e;
        }
        loss += (sum.ln() + max - row[t]).f64();
        for gj in g.iter_mut() {
            *gj = *gj / sum * inv_n;
        }
        g[t] -= inv_n;
    }
    (loss / n as f64, grad, correct)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], cin: usize, cout: usize, g: Geom) -> Vec<f64> {
        let mut out = vec![0.0; cout * g.per_channel()];
        for co in 0..cout {
            for n in 0..g.n {
                for y in 0..g.h as isize {
                    for xx in 0..g.w as isize {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                    if sy < 0 || sx < 0 || sy >= g.h as isize || sx >= g.w as isize {
                                        continue;
                                    }
                                    let xv = x[((ci * g.n + n) * g.h + sy as usize) * g.w + sx as usize];
                                    acc += xv * w[(co * cin + ci) * 9 + (ky * 3 + kx) as usize];
                                }
                            }
                        }
                        out[((co * g.n + n) * g.h + y as usize) * g.w + xx as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let g = Geom { n: 2, h: 4, w: 5 };
        let (cin, cout) = (2, 3);
        let x: Vec<f64> = (0..cin * g.per_channel()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..cout * cin * 9).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let (out, _) = conv_forward(&x, &w, None, cin, cout, g);
        assert_eq!(out, naive_conv(&x, &w, cin, cout, g));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = Geom { n: 2, h: 3, w: 4 };
        let cin = 2;
        let x: Vec<f64> = (0..cin * g.per_channel()).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..cin * 9 * g.per_channel()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col(&x, cin, g).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&c, cin, g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_uniform() {
        let (loss, grad, _) = softmax_cross_entropy(&[0.0f64; 8], &[3, 0], 4);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let s: f64 = grad.iter().sum();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn channel_major_layout() {
        let g = Geom { n: 2, h: 1, w: 2 };
        // [N=2, C=2, 1, 2]
        let x = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_eq!(to_channel_major(&x, 2, g), vec![1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
    }
}
