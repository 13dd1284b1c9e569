//! Recovery network: windowed-attention feature extractor and the message head.

use rand::Rng;

use super::blocks::{self, ParamBuilder};
use super::config::{ModelConfig, DECODER_MLP_RATIO};
use crate::error::{bail, Result};
use crate::layout::{denormalize, BitMessage, SegmentedMessage};
use crate::tensor::{sigmoid, Graph, Init, ParamStore, Real, Tensor, Var};

pub(crate) fn init_params<T: Real, R: Rng + ?Sized>(b: &mut ParamBuilder<'_, T, R>, cfg: &ModelConfig) -> Result<()> {
    let dims = cfg.decoder_dims();
    b.conv("dec.embed", 3, dims[0], 3)?;
    for (i, &d) in dims.iter().enumerate() {
        let p = format!("dec.stage{i}");
        b.layer_norm(&format!("{p}.ln1"), d)?;
        b.attention(&format!("{p}.attn"), d)?;
        b.layer_norm(&format!("{p}.ln2"), d)?;
        b.linear(&format!("{p}.mlp.fc1"), d, DECODER_MLP_RATIO * d)?;
        b.linear(&format!("{p}.mlp.fc2"), DECODER_MLP_RATIO * d, d)?;
    }
    b.conv("dec.down0", dims[0], dims[1], 2)?;
    b.conv("dec.down1", dims[1], dims[2], 2)?;
    let (d, l) = (dims[3], cfg.l_ms);
    let n = cfg.layout().positions(4);
    if cfg.use_pe {
        b.tensor("dec.opmd.pos", &[n, d], Init::TruncNormal(0.02))?;
    }
    if cfg.use_mhsa {
        b.attention("dec.opmd.mhsa", d)?;
    }
    b.layer_norm("dec.opmd.ln", d)?;
    b.linear("dec.opmd.mlp.fc1", d, 4 * l)?;
    b.linear("dec.opmd.mlp.fc2", 4 * l, l)
}

/// Pre-norm block: `x + W-MSA(LN x)`, then `x + MLP(LN x)`.
pub fn swin_block<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    let n = blocks::layer_norm(g, s, &format!("{prefix}.ln1"), x)?;
    let a = blocks::window_attention(g, s, &format!("{prefix}.attn"), n, n, h, w, cfg.window, cfg.heads)?;
    let x = g.add(x, a)?;
    let n = blocks::layer_norm(g, s, &format!("{prefix}.ln2"), x)?;
    let m = blocks::mlp(g, s, &format!("{prefix}.mlp"), n, cfg.activation)?;
    g.add(x, m)
}

/// `[1, 3, H, W]` stego image to `[(H/4) * (W/4), 8 L_ms]` raster tokens.
///
/// A 3x3 stride-1 embedding keeps full resolution for the first stage; 2x2
/// stride-2 convolutions after stages 0 and 1 bring the grid to `H/4`.
pub fn extract_features<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &ModelConfig, stego: Var) -> Result<Var> {
    let (h, w) = (cfg.height, cfg.width);
    if g.shape(stego) != [1, 3, h, w] {
        bail!(Config, "stego image {:?} does not match configured {h}x{w}", g.shape(stego));
    }
    if h % (4 * cfg.window) != 0 || w % (4 * cfg.window) != 0 {
        bail!(Config, "{h}x{w} is not divisible by 4 * window");
    }
    let x = blocks::conv(g, s, "dec.embed", stego, 1, 1)?;
    let mut t = blocks::to_tokens(g, x)?;
    let (mut gh, mut gw) = (h, w);
    for i in 0..4 {
        t = swin_block(g, s, cfg, &format!("dec.stage{i}"), t, gh, gw)?;
        if i < 2 {
            let m = blocks::to_map(g, t, gh, gw)?;
            let m = blocks::conv(g, s, &format!("dec.down{i}"), m, 2, 0)?;
            (gh, gw) = (gh / 2, gw / 2);
            t = blocks::to_tokens(g, m)?;
        }
    }
    Ok(t)
}

/// Message head on `[N_ms, 8 L_ms]` features: `MLP(LN(x + MHSA(x)))` with
/// `x = features + E_pos`. Returns `[N_ms, L_ms]` raw predictions.
pub fn opmd_decode<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &ModelConfig, feats: Var) -> Result<Var> {
    let n = cfg.layout().positions(4);
    let d = cfg.decoder_dims()[3];
    if g.shape(feats) != [n, d] {
        bail!(Config, "message head expects [{n}, {d}] features, got {:?}", g.shape(feats));
    }
    let mut x = feats;
    if cfg.use_pe {
        let pos = g.param(s, "dec.opmd.pos")?;
        x = g.add(x, pos)?;
    }
    if cfg.use_mhsa {
        let a = blocks::mhsa(g, s, "dec.opmd.mhsa", x, cfg.heads)?;
        x = g.add(x, a)?;
    }
    let x = blocks::layer_norm(g, s, "dec.opmd.ln", x)?;
    blocks::mlp(g, s, "dec.opmd.mlp", x, cfg.activation)
}

pub fn recover_raw<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &ModelConfig, stego: Var) -> Result<Var> {
    let f = extract_features(g, s, cfg, stego)?;
    opmd_decode(g, s, cfg, f)
}

/// Network output for one image with its hard decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedMessage {
    /// Logits when `N_r = 1`, normalized element predictions otherwise.
    pub raw: Tensor<f32>,
    pub elements: SegmentedMessage,
    pub bits: BitMessage,
}

impl DecodedMessage {
    pub fn from_raw(raw: Tensor<f32>, cfg: &ModelConfig) -> Result<Self> {
        let probs = if cfg.n_r == 1 { raw.map(sigmoid) } else { raw.clone() };
        let elements = denormalize(&probs, cfg.n_r)?;
        let bits = cfg.layout().decode(&elements)?;
        Ok(DecodedMessage { raw, elements, bits })
    }
}
