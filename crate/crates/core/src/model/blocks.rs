//! Layer building blocks shared by both networks.
//!
//! Feature maps are `[1, C, H, W]`; token sequences are `[H * W, C]` in raster
//! order. Parameters are looked up by `prefix.suffix` names.

use rand::Rng;

use super::config::Activation;
use crate::error::{bail, Result};
use crate::tensor::{Graph, Init, ParamStore, Real, Var};

const ATTN_STD: f64 = 0.02;

/// Registers parameters with the crate's initialization scheme.
pub struct ParamBuilder<'a, T, R: ?Sized> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Real, R: Rng + ?Sized> ParamBuilder<'_, T, R> {
    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        self.store.init(name, shape, init, self.rng)
    }

    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Result<()> {
        self.tensor(&format!("{prefix}.w"), &[d_in, d_out], Init::TruncNormal(ATTN_STD))?;
        self.tensor(&format!("{prefix}.b"), &[d_out], Init::Zeros)
    }

    pub fn layer_norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.tensor(&format!("{prefix}.g"), &[c], Init::Ones)?;
        self.tensor(&format!("{prefix}.b"), &[c], Init::Zeros)
    }

    /// Q, K, V and output projections of a `c`-wide attention layer.
    pub fn attention(&mut self, prefix: &str, c: usize) -> Result<()> {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{p}"), c, c)?;
        }
        Ok(())
    }

    pub fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
        self.tensor(&format!("{prefix}.w"), &[c_out, c_in, k, k], Init::FanInUniform(c_in * k * k))?;
        self.tensor(&format!("{prefix}.b"), &[c_out], Init::Zeros)
    }

    /// Stride-`k` transposed convolution: each output pixel sees `c_in` inputs.
    pub fn deconv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
        self.tensor(&format!("{prefix}.w"), &[c_in, c_out, k, k], Init::FanInUniform(c_in))?;
        self.tensor(&format!("{prefix}.b"), &[c_out], Init::Zeros)
    }
}

fn param<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, prefix: &str, suffix: &str) -> Result<Var> {
    g.param(s, &format!("{prefix}.{suffix}"))
}

pub fn activate<T: Real>(g: &mut Graph<T>, x: Var, a: Activation) -> Result<Var> {
    match a {
        Activation::Gelu => g.gelu(x),
        Activation::Relu => g.relu(x),
    }
}

pub fn linear<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = param(g, s, prefix, "w")?;
    let b = param(g, s, prefix, "b")?;
    g.linear(x, w, Some(b))
}

pub fn layer_norm<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = param(g, s, prefix, "g")?;
    let beta = param(g, s, prefix, "b")?;
    g.layer_norm(x, gamma, beta, T::cst(super::config::LN_EPS))
}

/// `fc2(act(fc1(x)))`.
pub fn mlp<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, prefix: &str, x: Var, a: Activation) -> Result<Var> {
    let h = linear(g, s, &format!("{prefix}.fc1"), x)?;
    let h = activate(g, h, a)?;
    linear(g, s, &format!("{prefix}.fc2"), h)
}

/// Attention with separate query and key/value sources, all projected by
/// `prefix.{q,k,v,o}`; rows attend only within consecutive blocks of `group`.
pub fn cross_attention<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    prefix: &str,
    q_src: Var,
    k_src: Var,
    v_src: Var,
    heads: usize,
    group: usize,
) -> Result<Var> {
    let q = linear(g, s, &format!("{prefix}.q"), q_src)?;
    let k = linear(g, s, &format!("{prefix}.k"), k_src)?;
    let v = linear(g, s, &format!("{prefix}.v"), v_src)?;
    let a = g.attention(q, k, v, heads, group)?;
    linear(g, s, &format!("{prefix}.o"), a)
}

/// Global multi-head self-attention over all rows of `x [N, C]`.
pub fn mhsa<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let n = g.shape(x)[0];
    cross_attention(g, s, prefix, x, x, x, heads, n)
}

/// Row order that lists the tokens of each `win x win` window contiguously,
/// windows in raster order and tokens in raster order inside a window.
pub fn window_order(h: usize, w: usize, win: usize) -> Result<Vec<usize>> {
    if win == 0 || !h.is_multiple_of(win) || !w.is_multiple_of(win) {
        bail!(Config, "{h}x{w} grid is not tiled by {win}x{win} windows");
    }
    let mut order = Vec::with_capacity(h * w);
    for wy in 0..h / win {
        for wx in 0..w / win {
            for iy in 0..win {
                for ix in 0..win {
                    order.push((wy * win + iy) * w + wx * win + ix);
                }
            }
        }
    }
    Ok(order)
}

pub fn inverse_order(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

/// Windowed attention over raster tokens of an `h x w` grid; output stays in raster order.
#[allow(clippy::too_many_arguments)]
pub fn window_attention<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    prefix: &str,
    q_src: Var,
    kv_src: Var,
    h: usize,
    w: usize,
    win: usize,
    heads: usize,
) -> Result<Var> {
    let order = window_order(h, w, win)?;
    let q = g.permute_rows(q_src, &order)?;
    let kv = if kv_src == q_src { q } else { g.permute_rows(kv_src, &order)? };
    let a = cross_attention(g, s, prefix, q, kv, kv, heads, win * win)?;
    g.permute_rows(a, &inverse_order(&order))
}

/// `[1, C, H, W]` map to `[H * W, C]` raster tokens.
pub fn to_tokens<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[0] != 1 {
        bail!(Dimension, "expected a single [1, C, H, W] map, got {s:?}");
    }
    let flat = g.reshape(x, &[s[1], s[2] * s[3]])?;
    g.transpose(flat)
}

/// `[H * W, C]` raster tokens to a `[1, C, H, W]` map.
pub fn to_map<T: Real>(g: &mut Graph<T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(t).to_vec();
    if s.len() != 2 || s[0] != h * w {
        bail!(Dimension, "{s:?} tokens do not form a {h}x{w} grid");
    }
    let ct = g.transpose(t)?;
    g.reshape(ct, &[1, s[1], h, w])
}

pub fn conv<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = param(g, s, prefix, "w")?;
    let b = param(g, s, prefix, "b")?;
    g.conv2d(x, w, Some(b), stride, pad)
}

/// Stride-2, 2x2 transposed convolution doubling both spatial extents.
pub fn upsample<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = param(g, s, prefix, "w")?;
    let b = param(g, s, prefix, "b")?;
    g.deconv2d(x, w, Some(b), 2, 0)
}
