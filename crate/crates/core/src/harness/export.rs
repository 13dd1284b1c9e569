use std::fs;
use std::path::Path;

use super::dataset::save_png;
use crate::error::Result;
use crate::layout::{message_rng, BitMessage};
use crate::model::StegoModel;
use crate::tensor::Tensor;

/// Amplification of exported residual images.
pub const RESIDUAL_GAIN: f32 = 5.0;

/// `clamp(0.5 + gain * residual, 0, 1)`: signed residual centered at mid-gray.
pub fn residual_visual(residual: &Tensor<f32>, gain: f32) -> Tensor<f32> {
    residual.map(|r| (0.5 + gain * r).clamp(0.0, 1.0))
}

/// Writes the stego image and, if requested, its amplified residual as 8-bit PNGs.
pub fn export_stego(
    stego: &Tensor<f32>,
    residual: &Tensor<f32>,
    stego_path: &Path,
    residual_path: Option<&Path>,
    gain: f32,
) -> Result<()> {
    save_png(stego, stego_path)?;
    if let Some(p) = residual_path {
        save_png(&residual_visual(residual, gain), p)?;
    }
    Ok(())
}

/// Conceals a fresh random message in every cover and writes
/// `cover_NNNNN.png`, `stego_NNNNN.png` and `residual_NNNNN.png` to `out`.
/// Messages are drawn in order from the generator seeded with `seed`.
pub fn export_pairs(model: &StegoModel, covers: &[Tensor<f32>], out: &Path, seed: u64) -> Result<usize> {
    fs::create_dir_all(out)?;
    let mut rng = message_rng(seed);
    for (i, cover) in covers.iter().enumerate() {
        let bits = BitMessage::random(model.bit_len(), &mut rng)?;
        let c = model.conceal(cover, &bits)?;
        save_png(cover, &out.join(format!("cover_{i:05}.png")))?;
        export_stego(
            &c.stego,
            &c.residual,
            &out.join(format!("stego_{i:05}.png")),
            Some(&out.join(format!("residual_{i:05}.png"))),
            RESIDUAL_GAIN,
        )?;
    }
    Ok(covers.len())
}
