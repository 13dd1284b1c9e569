//! Losses, the training loop, and evaluation.

pub mod losses;
pub mod metrics;
mod trainer;

use std::time::Instant;

pub use losses::{total_loss, LossConfig, LossTerms};
pub use metrics::{psnr, quantize, ssim, PSNR_CAP};
pub use trainer::{StepStats, TrainConfig, TrainReport, Trainer};

use crate::error::{bail, Result};
use crate::layout::{message_rng, BitMessage};
use crate::model::StegoModel;
use crate::tensor::Tensor;

/// Aggregate metrics of one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub iteration: u64,
    /// Bit accuracy after 8-bit quantization of the stego image.
    pub acc: f64,
    /// Bit accuracy on the unquantized stego image.
    pub acc_float: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_per_image: f64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub acc: f64,
    pub acc_float: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageMetrics>,
    pub summary: MetricsReport,
}

/// Metrics of one cover with one message. The stego image is quantized to 8
/// bits before recovery and before PSNR/SSIM, exactly as an exported PNG.
pub fn evaluate_one(model: &StegoModel, cover: &Tensor<f32>, bits: &BitMessage) -> Result<ImageMetrics> {
    let start = Instant::now();
    let out = model.conceal(cover, bits)?;
    let stego8 = quantize(&out.stego);
    let stego_q = metrics::dequantize(&stego8, cover.shape())?;
    let dec = model.recover(&stego_q)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let acc = dec.bits.accuracy(bits)?;
    let acc_float = model.recover(&out.stego)?.bits.accuracy(bits)?;
    let cover8 = quantize(cover);
    let (h, w) = (model.config.height, model.config.width);
    Ok(ImageMetrics {
        acc,
        acc_float,
        psnr: psnr(&cover8, &stego8)?,
        ssim: ssim(&cover8, &stego8, 3, h, w)?,
        ms,
    })
}

/// Mean metrics over `covers`, each with a fresh message drawn in order from
/// the generator seeded with `seed`.
pub fn evaluate(model: &StegoModel, covers: &[Tensor<f32>], seed: u64) -> Result<EvalReport> {
    if covers.is_empty() {
        bail!(Data, "evaluation set is empty");
    }
    let start = Instant::now();
    let mut rng = message_rng(seed);
    let mut images = Vec::with_capacity(covers.len());
    for cover in covers {
        let bits = BitMessage::random(model.bit_len(), &mut rng)?;
        images.push(evaluate_one(model, cover, &bits)?);
    }
    let n = images.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
    let summary = MetricsReport {
        iteration: model.iterations,
        acc: mean(|m| m.acc),
        acc_float: mean(|m| m.acc_float),
        psnr: mean(|m| m.psnr),
        ssim: mean(|m| m.ssim),
        ms_per_image: mean(|m| m.ms),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok(EvalReport { images, summary })
}
