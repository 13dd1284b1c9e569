//! Concealment network: image feature preparation, message encoding and fusion
//! at three stages, and the up-sampling residual head.

use rand::Rng;

use super::blocks::{self, ParamBuilder};
use super::config::{ModelConfig, QkvVariant};
use crate::error::{bail, Result};
use crate::layout::{normalize_elements, SegmentedMessage};
use crate::tensor::{Graph, ParamStore, Real, Var};

pub(crate) fn init_params<T: Real, R: Rng + ?Sized>(b: &mut ParamBuilder<'_, T, R>, cfg: &ModelConfig) -> Result<()> {
    let c = cfg.channels();
    b.conv("enc.prep1.conv", 3, c, 3)?;
    b.conv("enc.prep1.down", c, 2 * c, 2)?;
    b.conv("enc.prep2.conv", 2 * c, 2 * c, 3)?;
    b.conv("enc.prep2.down", 2 * c, 4 * c, 2)?;
    let layout = cfg.layout();
    for (i, st) in cfg.stages().iter().enumerate() {
        let p = format!("enc.opme{i}");
        let seg_len = layout.segment_len(st.scale);
        b.linear(&format!("{p}.mlp.fc1"), seg_len, st.channels)?;
        b.linear(&format!("{p}.mlp.fc2"), st.channels, st.channels)?;
        if cfg.use_pe {
            b.tensor(&format!("{p}.pos"), &[layout.positions(st.scale), st.channels], crate::tensor::Init::TruncNormal(0.02))?;
        }
        if cfg.use_mhsa {
            b.attention(&format!("{p}.mhsa"), st.channels)?;
        }
        b.layer_norm(&format!("{p}.ln"), st.channels)?;
        b.attention(&format!("enc.gmif{i}.attn"), st.channels)?;
    }
    b.deconv("enc.head.up1", 8 * c, 4 * c, 2)?;
    b.conv("enc.head.fuse", 6 * c, 2 * c, 3)?;
    b.deconv("enc.head.up2", 2 * c, c, 2)?;
    b.conv("enc.head.out", c, 3, 3)
}

/// Image features at half and quarter resolution, `[B, 2C, H/2, W/2]` and `[B, 4C, H/4, W/4]`.
#[derive(Clone, Copy, Debug)]
pub struct ImageFeatures {
    pub half: Var,
    pub quarter: Var,
}

/// Two conv stages, each a 3x3 convolution followed by a 2x2 stride-2
/// convolution that halves the spatial extent and doubles the depth.
pub fn prepare_image<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &ModelConfig, cover: Var) -> Result<ImageFeatures> {
    let sh = g.shape(cover).to_vec();
    if sh.len() != 4 || sh[1] != 3 {
        bail!(Dimension, "cover must be [B, 3, H, W], got {sh:?}");
    }
    if !sh[2].is_multiple_of(4) || !sh[3].is_multiple_of(4) {
        bail!(Config, "cover {}x{} is not divisible by 4", sh[2], sh[3]);
    }
    let a = cfg.activation;
    let x = blocks::conv(g, s, "enc.prep1.conv", cover, 1, 1)?;
    let x = blocks::activate(g, x, a)?;
    let x = blocks::conv(g, s, "enc.prep1.down", x, 2, 0)?;
    let half = blocks::activate(g, x, a)?;
    let x = blocks::conv(g, s, "enc.prep2.conv", half, 1, 1)?;
    let x = blocks::activate(g, x, a)?;
    let x = blocks::conv(g, s, "enc.prep2.down", x, 2, 0)?;
    let quarter = blocks::activate(g, x, a)?;
    Ok(ImageFeatures { half, quarter })
}

/// Encodes one segment grid into `[N_ms, channels]` global message features:
/// `LN(x + MHSA(x))` with `x = MLP_enc(M_seg) + E_pos`.
pub fn opme_encode<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &ModelConfig,
    stage: usize,
    msg: &SegmentedMessage,
) -> Result<Var> {
    let Some(st) = cfg.stages().get(stage).copied() else { bail!(Config, "no encoding stage {stage}") };
    let layout = cfg.layout();
    let (n, len) = (layout.positions(st.scale), layout.segment_len(st.scale));
    if msg.segments() != n || msg.seg_len() != len {
        bail!(Config, "stage {stage} expects a {n}x{len} grid, got {}x{}", msg.segments(), msg.seg_len());
    }
    let m = g.input(normalize_elements(msg));
    opme_encode_values(g, s, cfg, stage, m)
}

/// [`opme_encode`] on an already normalized `[N_ms, seg_len]` node.
pub fn opme_encode_values<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &ModelConfig, stage: usize, m: Var) -> Result<Var> {
    let p = format!("enc.opme{stage}");
    let mut x = blocks::mlp(g, s, &format!("{p}.mlp"), m, cfg.activation)?;
    if cfg.use_pe {
        let pos = g.param(s, &format!("{p}.pos"))?;
        x = g.add(x, pos)?;
    }
    if cfg.use_mhsa {
        let a = blocks::mhsa(g, s, &format!("{p}.mhsa"), x, cfg.heads)?;
        x = g.add(x, a)?;
    }
    blocks::layer_norm(g, s, &format!("{p}.ln"), x)
}

/// Windowed attention fusion of `[N, C]` message and image tokens on an `h x w` grid.
/// Returns `(F_im + F_msg) + W_O * Attn(Q, K, V)` with sources chosen by the variant.
#[allow(clippy::too_many_arguments)]
pub fn gmif_fuse<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &ModelConfig,
    stage: usize,
    f_msg: Var,
    f_im: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    if g.shape(f_msg) != g.shape(f_im) {
        bail!(Config, "message features {:?} and image features {:?} differ", g.shape(f_msg), g.shape(f_im));
    }
    if g.shape(f_im)[0] != h * w {
        bail!(Config, "{} tokens do not form a {h}x{w} grid", g.shape(f_im)[0]);
    }
    let both = g.add(f_im, f_msg)?;
    let (q, kv) = match cfg.qkv_variant {
        QkvVariant::MsgQMsgImKv => (f_msg, both),
        QkvVariant::MsgQImKv => (f_msg, f_im),
        QkvVariant::ImQMsgImKv => (f_im, both),
        QkvVariant::ImQMsgKv => (f_im, f_msg),
        QkvVariant::MsgImQMsgImKv => (both, both),
    };
    let a = blocks::window_attention(g, s, &format!("enc.gmif{stage}.attn"), q, kv, h, w, cfg.window, cfg.heads)?;
    g.add(both, a)
}

#[derive(Clone, Copy, Debug)]
pub struct StegoOutput {
    pub residual: Var,
    pub stego: Var,
}

/// Up-sampling head. `fused_half` and `fused_quarter` are raster tokens of the
/// first and last fusion stages; `image_quarter` is the `[1, 4C, H/4, W/4]` image map.
pub fn reconstruct_stego<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &ModelConfig,
    fused_half: Var,
    fused_quarter: Var,
    image_quarter: Var,
    cover: Var,
) -> Result<StegoOutput> {
    let (h, w) = (cfg.height, cfg.width);
    if g.shape(cover) != [1, 3, h, w] {
        bail!(Config, "cover {:?} does not match configured {h}x{w}", g.shape(cover));
    }
    let a = cfg.activation;
    let s3 = blocks::to_map(g, fused_quarter, h / 4, w / 4)?;
    let x = g.concat(&[s3, image_quarter], 1)?;
    let x = blocks::upsample(g, s, "enc.head.up1", x)?;
    let x = blocks::activate(g, x, a)?;
    let s1 = blocks::to_map(g, fused_half, h / 2, w / 2)?;
    let x = g.concat(&[x, s1], 1)?;
    let x = blocks::conv(g, s, "enc.head.fuse", x, 1, 1)?;
    let x = blocks::activate(g, x, a)?;
    let x = blocks::upsample(g, s, "enc.head.up2", x)?;
    let x = blocks::activate(g, x, a)?;
    let residual = blocks::conv(g, s, "enc.head.out", x, 1, 1)?;
    let stego = g.add(cover, residual)?;
    Ok(StegoOutput { residual, stego })
}

/// Full concealment of one cover `[1, 3, H, W]` with one segment grid per stage.
pub fn conceal<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &ModelConfig,
    cover: Var,
    grids: &[SegmentedMessage],
) -> Result<StegoOutput> {
    let stages = cfg.stages();
    if grids.len() != stages.len() {
        bail!(Layout, "{} message grids for {} stages", grids.len(), stages.len());
    }
    let msgs = grids
        .iter()
        .enumerate()
        .map(|(i, m)| opme_encode(g, s, cfg, i, m))
        .collect::<Result<Vec<_>>>()?;
    conceal_with_features(g, s, cfg, cover, &msgs)
}

/// [`conceal`] with precomputed message features, one `[N_ms, channels]` node per stage.
pub fn conceal_with_features<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &ModelConfig,
    cover: Var,
    msgs: &[Var],
) -> Result<StegoOutput> {
    let feats = prepare_image(g, s, cfg, cover)?;
    let (h, w) = (cfg.height, cfg.width);
    let im1 = blocks::to_tokens(g, feats.half)?;
    let im2 = blocks::to_tokens(g, feats.quarter)?;
    let s1 = gmif_fuse(g, s, cfg, 0, msgs[0], im1, h / 2, w / 2)?;
    let s2 = gmif_fuse(g, s, cfg, 1, msgs[1], im2, h / 4, w / 4)?;
    let s3 = gmif_fuse(g, s, cfg, 2, msgs[2], s2, h / 4, w / 4)?;
    reconstruct_stego(g, s, cfg, s1, s3, feats.quarter, cover)
}
