//! Forward and backward kernels on raw row-major buffers.
//!
//! Every function here is pure; the tape in `graph.rs` owns bookkeeping.

use rayon::prelude::*;

use super::Real;

/// `[m,k] x [k,n] -> [m,n]`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a, (k, 1), b, (n, 1), T::zero(), &mut c, (n, 1));
    c
}

/// Gradients of `a x b` given the output gradient `g`.
pub fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    // da = g . b^T, db = a^T . g
    let mut da = vec![T::zero(); m * k];
    T::gemm(m, n, k, T::one(), g, (n, 1), b, (1, n), T::zero(), &mut da, (k, 1));
    let mut db = vec![T::zero(); k * n];
    T::gemm(k, m, n, T::one(), a, (1, k), g, (n, 1), T::zero(), &mut db, (n, 1));
    (da, db)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col<T: Real>(x: &[T], geo: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let p = oh * ow;
    let mut cols = vec![T::zero(); geo.patch_len() * p];
    for c in 0..geo.channels {
        let plane = &x[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for i in 0..geo.kernel_h {
            for j in 0..geo.kernel_w {
                let row = (c * geo.kernel_h + i) * geo.kernel_w + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let y = (oy * geo.stride + i) as isize - geo.padding as isize;
                    if y < 0 || y >= geo.height as isize {
                        continue;
                    }
                    let src = &plane[y as usize * geo.width..(y as usize + 1) * geo.width];
                    for ox in 0..ow {
                        let xx = (ox * geo.stride + j) as isize - geo.padding as isize;
                        if xx >= 0 && xx < geo.width as isize {
                            dst[oy * ow + ox] = src[xx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], geo: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let p = oh * ow;
    let mut x = vec![T::zero(); geo.channels * geo.height * geo.width];
    for c in 0..geo.channels {
        let plane = &mut x[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for i in 0..geo.kernel_h {
            for j in 0..geo.kernel_w {
                let row = (c * geo.kernel_h + i) * geo.kernel_w + j;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let y = (oy * geo.stride + i) as isize - geo.padding as isize;
                    if y < 0 || y >= geo.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let xx = (ox * geo.stride + j) as isize - geo.padding as isize;
                        if xx >= 0 && xx < geo.width as isize {
                            let d = &mut plane[y as usize * geo.width + xx as usize];
                            *d = *d + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation over a batch `[B,C,H,W]`. Returns the output and, when
/// `keep_cols` is set, the per-item im2col buffers for the backward pass.
pub fn conv2d<T: Real>(
    x: &[T],
    batch: usize,
    w: &[T],
    bias: Option<&[T]>,
    geo: &ConvGeometry,
    keep_cols: bool,
) -> (Vec<T>, Vec<Vec<T>>) {
    let in_len = geo.channels * geo.height * geo.width;
    let p = geo.positions();
    let kl = geo.patch_len();
    let per_item: Vec<(Vec<T>, Vec<T>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let cols = im2col(&x[b * in_len..(b + 1) * in_len], geo);
            let mut out = vec![T::zero(); geo.filters * p];
            if let Some(bias) = bias {
                for (f, chunk) in out.chunks_mut(p).enumerate() {
                    chunk.fill(bias[f]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(geo.filters, kl, p, T::one(), w, (kl, 1), &cols, (p, 1), beta, &mut out, (p, 1));
            (out, if keep_cols { cols } else { Vec::new() })
        })
        .collect();
    let mut out = Vec::with_capacity(batch * geo.filters * p);
    let mut cols = Vec::with_capacity(if keep_cols { batch } else { 0 });
    for (o, c) in per_item {
        out.extend_from_slice(&o);
        if keep_cols {
            cols.push(c);
        }
    }
    (out, cols)
}

/// Returns `(dx, dw, dbias)`; per-item partial sums are reduced in batch order.
pub fn conv2d_backward<T: Real>(
    g: &[T],
    batch: usize,
    w: &[T],
    cols: &[Vec<T>],
    geo: &ConvGeometry,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let p = geo.positions();
    let kl = geo.patch_len();
    let out_len = geo.filters * p;
    let per_item: Vec<(Vec<T>, Vec<T>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let gb = &g[b * out_len..(b + 1) * out_len];
            let mut dw = vec![T::zero(); geo.filters * kl];
            T::gemm(geo.filters, p, kl, T::one(), gb, (p, 1), &cols[b], (1, p), T::zero(), &mut dw, (kl, 1));
            let mut dcols = vec![T::zero(); kl * p];
            T::gemm(kl, geo.filters, p, T::one(), w, (1, kl), gb, (p, 1), T::zero(), &mut dcols, (p, 1));
            (col2im(&dcols, geo), dw)
        })
        .collect();
    let mut dx = Vec::with_capacity(batch * geo.channels * geo.height * geo.width);
    let mut dw = vec![T::zero(); geo.filters * kl];
    for (dxb, dwb) in per_item {
        dx.extend_from_slice(&dxb);
        for (a, b) in dw.iter_mut().zip(dwb) {
            *a = *a + b;
        }
    }
    let mut db = vec![T::zero(); geo.filters];
    for b in 0..batch {
        for (f, d) in db.iter_mut().enumerate() {
            let start = b * out_len + f * p;
            *d = *d + g[start..start + p].iter().copied().sum::<T>();
        }
    }
    (dx, dw, db)
}

/// Normalization statistics saved for the backward pass.
#[derive(Clone, Debug)]
pub struct NormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Statistics came from the batch itself (true) or were constants (false).
    pub batch_stats: bool,
}

/// Per-row normalization over the last `d` elements; returns `(y, saved)`.
pub fn layer_norm<T: Real>(x: &[T], d: usize, gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, NormSaved<T>) {
    let rows = x.len() / d;
    let dn = T::of(d as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for i in 0..d {
            let h = (row[i] - mean) * is;
            xhat[r * d + i] = h;
            y[r * d + i] = gamma[i] * h + beta[i];
        }
    }
    (
        y,
        NormSaved {
            xhat,
            inv_std,
            batch_stats: true,
        },
    )
}

pub fn layer_norm_backward<T: Real>(g: &[T], d: usize, gamma: &[T], saved: &NormSaved<T>) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = g.len() / d;
    let dn = T::of(d as f64);
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    for r in 0..rows {
        let gr = &g[r * d..(r + 1) * d];
        let hr = &saved.xhat[r * d..(r + 1) * d];
        let mut sum_dh = T::zero();
        let mut sum_dh_h = T::zero();
        for i in 0..d {
            let dh = gr[i] * gamma[i];
            sum_dh = sum_dh + dh;
            sum_dh_h = sum_dh_h + dh * hr[i];
            dgamma[i] = dgamma[i] + gr[i] * hr[i];
            dbeta[i] = dbeta[i] + gr[i];
        }
        let is = saved.inv_std[r];
        for i in 0..d {
            let dh = gr[i] * gamma[i];
            dx[r * d + i] = is / dn * (dn * dh - sum_dh - hr[i] * sum_dh_h);
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch norm over `[B,C,H*W]`. In training mode statistics come from the
/// batch and the biased/unbiased `(mean, var)` pair is returned for the
/// running-average update; otherwise `running` is used as constants.
#[allow(clippy::type_complexity)]
pub fn batch_norm2d<T: Real>(
    x: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
    eps: T,
) -> (Vec<T>, NormSaved<T>, Option<(Vec<T>, Vec<T>)>) {
    let n = batch * spatial;
    let nn = T::of(n as f64);
    let mut means = vec![T::zero(); channels];
    let mut vars = vec![T::zero(); channels];
    let batch_stats = running.is_none();
    match running {
        None => {
            for c in 0..channels {
                let mut s = T::zero();
                for b in 0..batch {
                    let off = (b * channels + c) * spatial;
                    s = s + x[off..off + spatial].iter().copied().sum::<T>();
                }
                let mean = s / nn;
                let mut v = T::zero();
                for b in 0..batch {
                    let off = (b * channels + c) * spatial;
                    v = v + x[off..off + spatial].iter().map(|&e| (e - mean) * (e - mean)).sum::<T>();
                }
                means[c] = mean;
                vars[c] = v / nn;
            }
        }
        Some((rm, rv)) => {
            means.copy_from_slice(rm);
            vars.copy_from_slice(rv);
        }
    }
    let inv_std: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * spatial;
            for i in off..off + spatial {
                let h = (x[i] - means[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    let stats = batch_stats.then(|| {
        let unbias = if n > 1 { nn / T::of((n - 1) as f64) } else { T::one() };
        (means, vars.iter().map(|&v| v * unbias).collect())
    });
    (
        y,
        NormSaved {
            xhat,
            inv_std,
            batch_stats,
        },
        stats,
    )
}

pub fn batch_norm2d_backward<T: Real>(
    g: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[T],
    saved: &NormSaved<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let nn = T::of((batch * spatial) as f64);
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for c in 0..channels {
        let mut sum_dh = T::zero();
        let mut sum_dh_h = T::zero();
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            for i in off..off + spatial {
                let dh = g[i] * gamma[c];
                sum_dh = sum_dh + dh;
                sum_dh_h = sum_dh_h + dh * saved.xhat[i];
                dgamma[c] = dgamma[c] + g[i] * saved.xhat[i];
                dbeta[c] = dbeta[c] + g[i];
            }
        }
        let is = saved.inv_std[c];
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            for i in off..off + spatial {
                let dh = g[i] * gamma[c];
                dx[i] = if saved.batch_stats {
                    is / nn * (nn * dh - sum_dh - saved.xhat[i] * sum_dh_h)
                } else {
                    dh * is
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `x * Phi(x)` with the erf form of the normal CDF.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    x * half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = T::of(FRAC_1_SQRT_2PI) * (-(x * x) * half).exp();
    cdf + x * pdf
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn pool_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Adaptive average pooling of `[N,H,W]` planes to `[N,oh,ow]`.
pub fn adaptive_avg_pool2d<T: Real>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut y = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let (y0, y1) = pool_bin(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = pool_bin(j, w, ow);
                let mut s = T::zero();
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        s = s + plane[yy * w + xx];
                    }
                }
                y[(p * oh + i) * ow + j] = s / T::of(((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    y
}

pub fn adaptive_avg_pool2d_backward<T: Real>(g: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for i in 0..oh {
            let (y0, y1) = pool_bin(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = pool_bin(j, w, ow);
                let share = g[(p * oh + i) * ow + j] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let d = &mut dx[p * h * w + yy * w + xx];
                        *d = *d + share;
                    }
                }
            }
        }
    }
    dx
}

/// Numerically stable softmax of each length-`c` row.
pub fn softmax_rows<T: Real>(x: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks(c).zip(out.chunks_mut(c)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            z = z + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / z;
        }
    }
    out
}

/// Multi-head scaled dot-product attention over `[B,T,D]` projections.
/// Returns the concatenated head outputs and the attention weights `[B,H,T,T]`.
pub fn attention<T: Real>(q: &[T], k: &[T], v: &[T], batch: usize, tokens: usize, d: usize, heads: usize) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let tt = tokens * tokens;
    let per_task: Vec<(Vec<T>, Vec<T>)> = (0..batch * heads)
        .into_par_iter()
        .map(|task| {
            let (b, h) = (task / heads, task % heads);
            let off = b * tokens * d + h * dh;
            let mut scores = vec![T::zero(); tt];
            T::gemm(tokens, dh, tokens, scale, &q[off..], (d, 1), &k[off..], (1, d), T::zero(), &mut scores, (tokens, 1));
            let probs = softmax_rows(&scores, tokens);
            let mut out = vec![T::zero(); tokens * dh];
            T::gemm(tokens, tokens, dh, T::one(), &probs, (tokens, 1), &v[off..], (d, 1), T::zero(), &mut out, (dh, 1));
            (out, probs)
        })
        .collect();
    let mut out = vec![T::zero(); batch * tokens * d];
    let mut probs = Vec::with_capacity(batch * heads * tt);
    for (task, (o, p)) in per_task.into_iter().enumerate() {
        let (b, h) = (task / heads, task % heads);
        for t in 0..tokens {
            let dst = b * tokens * d + t * d + h * dh;
            out[dst..dst + dh].copy_from_slice(&o[t * dh..(t + 1) * dh]);
        }
        probs.extend_from_slice(&p);
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    batch: usize,
    tokens: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let tt = tokens * tokens;
    let per_task: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..batch * heads)
        .into_par_iter()
        .map(|task| {
            let (b, h) = (task / heads, task % heads);
            let off = b * tokens * d + h * dh;
            let p = &probs[task * tt..(task + 1) * tt];
            // dV = P^T dO
            let mut dv = vec![T::zero(); tokens * dh];
            T::gemm(tokens, tokens, dh, T::one(), p, (1, tokens), &g[off..], (d, 1), T::zero(), &mut dv, (dh, 1));
            // dP = dO V^T
            let mut dp = vec![T::zero(); tt];
            T::gemm(tokens, dh, tokens, T::one(), &g[off..], (d, 1), &v[off..], (1, d), T::zero(), &mut dp, (tokens, 1));
            // dS = P * (dP - rowsum(dP * P)), scaled
            let mut ds = vec![T::zero(); tt];
            for r in 0..tokens {
                let row = r * tokens..(r + 1) * tokens;
                let dot: T = dp[row.clone()].iter().zip(&p[row.clone()]).map(|(&a, &b)| a * b).sum();
                for i in row {
                    ds[i] = p[i] * (dp[i] - dot) * scale;
                }
            }
            let mut dq = vec![T::zero(); tokens * dh];
            T::gemm(tokens, tokens, dh, T::one(), &ds, (tokens, 1), &k[off..], (d, 1), T::zero(), &mut dq, (dh, 1));
            let mut dk = vec![T::zero(); tokens * dh];
            T::gemm(tokens, tokens, dh, T::one(), &ds, (1, tokens), &q[off..], (d, 1), T::zero(), &mut dk, (dh, 1));
            (dq, dk, dv)
        })
        .collect();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    for (task, (tq, tk, tv)) in per_task.into_iter().enumerate() {
        let (b, h) = (task / heads, task % heads);
        for t in 0..tokens {
            let dst = b * tokens * d + t * d + h * dh;
            dq[dst..dst + dh].copy_from_slice(&tq[t * dh..(t + 1) * dh]);
            dk[dst..dst + dh].copy_from_slice(&tk[t * dh..(t + 1) * dh]);
            dv[dst..dst + dh].copy_from_slice(&tv[t * dh..(t + 1) * dh]);
        }
    }
    (dq, dk, dv)
}
