//! Image quality and message accuracy metrics on 8-bit data.

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Reported PSNR when the images are identical.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const MAX: f64 = 255.0;

/// `round(clamp(x, 0, 1) * 255)`, element order preserved.
pub fn quantize(img: &Tensor<f32>) -> Vec<u8> {
    img.data().iter().map(|&v| quantize_value(v)).collect()
}

pub fn quantize_value(v: f32) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Inverse scaling of 8-bit data back to `[0, 1]` with the given shape.
pub fn dequantize(data: &[u8], shape: &[usize]) -> Result<Tensor<f32>> {
    Tensor::new(shape, data.iter().map(|&v| v as f32 / 255.0).collect())
}

/// `10 log10(255^2 / MSE)`, or [`PSNR_CAP`] when the MSE is zero.
pub fn psnr(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        bail!(Dimension, "PSNR of {} and {} samples", a.len(), b.len());
    }
    let se: u64 = a.iter().zip(b).map(|(&x, &y)| (x as i64 - y as i64).pow(2) as u64).sum();
    if se == 0 {
        return Ok(PSNR_CAP);
    }
    let mse = se as f64 / a.len() as f64;
    Ok((10.0 * (MAX * MAX / mse).log10()).min(PSNR_CAP))
}

fn gaussian_1d() -> [f64; SSIM_WIN] {
    let mut g = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-mode separable Gaussian filter of an `h x w` plane.
fn filter(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WIN]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WIN, w + 1 - SSIM_WIN);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..SSIM_WIN).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..SSIM_WIN).map(|i| k[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean SSIM of two `[channels, h, w]` images on the 0..255 scale, averaged
/// over channels. 11x11 Gaussian window with sigma 1.5, valid positions only.
pub fn ssim_planes(a: &[f64], b: &[f64], channels: usize, h: usize, w: usize) -> Result<f64> {
    if a.len() != channels * h * w || b.len() != a.len() {
        bail!(Dimension, "SSIM inputs do not match [{channels}, {h}, {w}]");
    }
    if h < SSIM_WIN || w < SSIM_WIN {
        bail!(Dimension, "SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {h}x{w}");
    }
    let k = gaussian_1d();
    let c1 = (K1 * MAX).powi(2);
    let c2 = (K2 * MAX).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..channels {
        let pa = &a[c * plane..(c + 1) * plane];
        let pb = &b[c * plane..(c + 1) * plane];
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter(pa, h, w, &k);
        let mu_b = filter(pb, h, w, &k);
        let e_aa = filter(&sq(pa, pa), h, w, &k);
        let e_bb = filter(&sq(pb, pb), h, w, &k);
        let e_ab = filter(&sq(pa, pb), h, w, &k);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / channels as f64)
}

/// SSIM of two 8-bit `[channels, h, w]` images.
pub fn ssim(a: &[u8], b: &[u8], channels: usize, h: usize, w: usize) -> Result<f64> {
    let f = |v: &[u8]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    ssim_planes(&f(a), &f(b), channels, h, w)
}
