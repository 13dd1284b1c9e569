//! Forward and backward kernels used by the tape. Plain slices in, plain slices out.

use super::gemm::{gemm, Mat, MatMut};
use super::Real;

/// Spatial geometry of a convolution: input `h x w`, square kernel, stride, padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Returns `None` when the output size is not integral.
    pub fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        let out = |n: usize| {
            let span = (n + 2 * pad).checked_sub(k)?;
            (span % stride == 0).then_some(span / stride + 1)
        };
        Some(ConvGeom { channels, h, w, k, stride, pad, out_h: out(h)?, out_w: out(w)? })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + y as usize) * g.w..(c * g.h + y as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let xx = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if xx < 0 || xx >= g.w as isize { T::zero() } else { src[xx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `x`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + y as usize) * g.w..(c * g.h + y as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let xx = (ox * g.stride + kj) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.w as isize {
                            dst[xx as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of one sample: `x [C_in, H, W]`, `w [C_out, C_in*k*k]` -> `out [C_out, Ho*Wo]`.
pub(crate) fn conv_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, c_out: usize, g: &ConvGeom, out: &mut [T]) {
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    im2col(x, g, &mut cols);
    let n = g.col_cols();
    gemm(
        T::one(),
        Mat::new(w, c_out, g.col_rows()),
        Mat::new(&cols, g.col_rows(), n),
        T::zero(),
        MatMut::new(out, c_out, n),
    );
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(n).zip(b) {
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// Accumulates gradients of [`conv_forward`] into `dx`, `dw`, `db`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    c_out: usize,
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let n = g.col_cols();
    let kk = g.col_rows();
    if let Some(dw) = dw {
        let mut cols = vec![T::zero(); kk * n];
        im2col(x, g, &mut cols);
        gemm(T::one(), Mat::new(dout, c_out, n), Mat::new(&cols, kk, n).t(), T::one(), MatMut::new(dw, c_out, kk));
    }
    if let Some(db) = db {
        for (row, d) in dout.chunks(n).zip(db.iter_mut()) {
            *d += row.iter().copied().sum::<T>();
        }
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); kk * n];
        gemm(T::one(), Mat::new(w, c_out, kk).t(), Mat::new(dout, c_out, n), T::zero(), MatMut::new(&mut dcols, kk, n));
        col2im(&dcols, g, dx);
    }
}

/// Transposed convolution of one sample. `g` describes the *adjoint* convolution
/// (from the output grid back to the input grid); `w [C_in, C_out*k*k]`.
pub(crate) fn deconv_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, c_in: usize, g: &ConvGeom, out: &mut [T]) {
    let n = g.col_cols();
    let kk = g.col_rows();
    let mut cols = vec![T::zero(); kk * n];
    gemm(T::one(), Mat::new(w, c_in, kk).t(), Mat::new(x, c_in, n), T::zero(), MatMut::new(&mut cols, kk, n));
    out.fill(T::zero());
    col2im(&cols, g, out);
    if let Some(b) = bias {
        let plane = g.h * g.w;
        for (chunk, &bv) in out.chunks_mut(plane).zip(b) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deconv_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    c_in: usize,
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let n = g.col_cols();
    let kk = g.col_rows();
    if let Some(db) = db {
        let plane = g.h * g.w;
        for (chunk, d) in dout.chunks(plane).zip(db.iter_mut()) {
            *d += chunk.iter().copied().sum::<T>();
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    let mut dcols = vec![T::zero(); kk * n];
    im2col(dout, g, &mut dcols);
    if let Some(dx) = dx {
        gemm(T::one(), Mat::new(w, c_in, kk), Mat::new(&dcols, kk, n), T::one(), MatMut::new(dx, c_in, n));
    }
    if let Some(dw) = dw {
        gemm(T::one(), Mat::new(x, c_in, n), Mat::new(&dcols, kk, n).t(), T::one(), MatMut::new(dw, c_in, kk));
    }
}

/// Shape bookkeeping for grouped multi-head attention over `[N, C]` token matrices.
/// Rows are split into consecutive groups of `group` tokens that attend only
/// among themselves; channels are split into `heads` equal slices.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnGeom {
    pub tokens: usize,
    pub channels: usize,
    pub heads: usize,
    pub group: usize,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    fn groups(&self) -> usize {
        self.tokens / self.group
    }

    pub fn probs_len(&self) -> usize {
        self.groups() * self.heads * self.group * self.group
    }
}

pub(crate) fn softmax_rows<T: Real>(data: &mut [T], width: usize) {
    for row in data.chunks_mut(width) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = T::one() / s;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Returns the attention output and the saved row-stochastic weights.
pub(crate) fn attention_forward<T: Real>(q: &[T], k: &[T], v: &[T], g: &AttnGeom) -> (Vec<T>, Vec<T>) {
    let (n, c, d) = (g.group, g.channels, g.head_dim());
    let scale = T::one() / T::cst(d as f64).sqrt();
    let mut out = vec![T::zero(); g.tokens * c];
    let mut probs = vec![T::zero(); g.probs_len()];
    for grp in 0..g.groups() {
        for h in 0..g.heads {
            let off = grp * n * c + h * d;
            let p = &mut probs[(grp * g.heads + h) * n * n..(grp * g.heads + h + 1) * n * n];
            gemm(
                scale,
                Mat::strided(q, off, n, d, c, 1),
                Mat::strided(k, off, n, d, c, 1).t(),
                T::zero(),
                MatMut::new(p, n, n),
            );
            softmax_rows(p, n);
            gemm(T::one(), Mat::new(p, n, n), Mat::strided(v, off, n, d, c, 1), T::zero(), MatMut::strided(&mut out, off, n, d, c, 1));
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    g: &AttnGeom,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let (n, c, d) = (g.group, g.channels, g.head_dim());
    let scale = T::one() / T::cst(d as f64).sqrt();
    let mut ds = vec![T::zero(); n * n];
    for grp in 0..g.groups() {
        for h in 0..g.heads {
            let off = grp * n * c + h * d;
            let p = &probs[(grp * g.heads + h) * n * n..(grp * g.heads + h + 1) * n * n];
            let dov = Mat::strided(dout, off, n, d, c, 1);
            // dV += P^T dO
            gemm(T::one(), Mat::new(p, n, n).t(), dov, T::one(), MatMut::strided(dv, off, n, d, c, 1));
            // dP = dO V^T
            gemm(T::one(), dov, Mat::strided(v, off, n, d, c, 1).t(), T::zero(), MatMut::new(&mut ds, n, n));
            // dS = P * (dP - rowsum(dP * P))
            for (drow, prow) in ds.chunks_mut(n).zip(p.chunks(n)) {
                let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (dv_, &pv) in drow.iter_mut().zip(prow) {
                    *dv_ = pv * (*dv_ - dot);
                }
            }
            gemm(scale, Mat::new(&ds, n, n), Mat::strided(k, off, n, d, c, 1), T::one(), MatMut::strided(dq, off, n, d, c, 1));
            gemm(scale, Mat::new(&ds, n, n).t(), Mat::strided(q, off, n, d, c, 1), T::one(), MatMut::strided(dk, off, n, d, c, 1));
        }
    }
}

/// Normalizes each row of width `c`; returns `(y, mean, rstd)`.
pub(crate) fn layer_norm_forward<T: Real>(x: &[T], gamma: &[T], beta: &[T], c: usize, eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let mut y = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    let inv_c = T::one() / T::cst(c as f64);
    for (xr, yr) in x.chunks(c).zip(y.chunks_mut(c)) {
        let mu = xr.iter().copied().sum::<T>() * inv_c;
        let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_c;
        let r = T::one() / (var + eps).sqrt();
        for (j, (yv, &xv)) in yr.iter_mut().zip(xr).enumerate() {
            *yv = (xv - mu) * r * gamma[j] + beta[j];
        }
        mean.push(mu);
        rstd.push(r);
    }
    (y, mean, rstd)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Real>(
    x: &[T],
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    dy: &[T],
    c: usize,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let inv_c = T::one() / T::cst(c as f64);
    if let Some(dg) = dgamma {
        for (i, (xr, dr)) in x.chunks(c).zip(dy.chunks(c)).enumerate() {
            for j in 0..c {
                dg[j] += dr[j] * (xr[j] - mean[i]) * rstd[i];
            }
        }
    }
    if let Some(db) = dbeta {
        for dr in dy.chunks(c) {
            for j in 0..c {
                db[j] += dr[j];
            }
        }
    }
    if let Some(dx) = dx {
        let mut dxhat = vec![T::zero(); c];
        for (i, ((xr, dr), dxr)) in x.chunks(c).zip(dy.chunks(c)).zip(dx.chunks_mut(c)).enumerate() {
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for j in 0..c {
                dxhat[j] = dr[j] * gamma[j];
                let xhat = (xr[j] - mean[i]) * rstd[i];
                s1 += dxhat[j];
                s2 += dxhat[j] * xhat;
            }
            s1 *= inv_c;
            s2 *= inv_c;
            for j in 0..c {
                let xhat = (xr[j] - mean[i]) * rstd[i];
                dxr[j] += rstd[i] * (dxhat[j] - s1 - xhat * s2);
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::cst(0.5);
    let inner = T::cst(GELU_K) * (x + T::cst(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::cst(0.5);
    let inner = T::cst(GELU_K) * (x + T::cst(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::cst(GELU_K) * (T::one() + T::cst(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `max(z, 0) - z t + ln(1 + exp(-|z|))`, the stable form of binary cross-entropy on logits.
pub(crate) fn bce_logit<T: Real>(z: T, t: T) -> T {
    z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p()
}
