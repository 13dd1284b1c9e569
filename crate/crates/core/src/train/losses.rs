use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::layout::{normalize_elements, SegmentedMessage};
use crate::tensor::{Graph, Real, Var};

/// Weights of the image terms. The message term is unweighted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the pixel MSE, pixels in `[0, 1]`.
    pub lambda1: f64,
    /// Weight of the gradient-domain L1 term.
    pub lambda2: f64,
    /// Enables the gradient-domain L1 term.
    pub perceptual: bool,
    /// Iterations trained with `warmup_lambda1` in place of `lambda1`; 0 disables.
    pub warmup_iterations: u64,
    pub warmup_lambda1: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda1: 1e-4, lambda2: 1e-6, perceptual: false, warmup_iterations: 0, warmup_lambda1: 1e-4 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.warmup_lambda1 >= 0.0) {
            bail!(Config, "loss weights must be non-negative");
        }
        Ok(())
    }

    /// Weights in force at a zero-based training iteration.
    pub fn at(&self, iteration: u64) -> LossConfig {
        let lambda1 = if iteration < self.warmup_iterations { self.warmup_lambda1 } else { self.lambda1 };
        LossConfig { lambda1, ..self.clone() }
    }
}

/// Graph nodes of one sample's loss.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub image: Var,
    pub perceptual: Option<Var>,
    pub message: Var,
}

/// `lambda1 * MSE(cover, stego) [+ lambda2 * gradL1(cover, stego)] + L_msg`, where
/// `L_msg` is BCE on logits for `N_r = 1` and MSE on normalized elements otherwise.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    cover: Var,
    stego: Var,
    target: &SegmentedMessage,
    raw: Var,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let t = normalize_elements::<T>(target);
    if g.shape(raw) != t.shape() {
        bail!(Dimension, "predictions {:?} for a {:?} message grid", g.shape(raw), t.shape());
    }
    let tv = g.input(t);
    let message = if target.n_r() == 1 { g.bce_with_logits(raw, tv)? } else { g.mse(raw, tv)? };
    let image = g.mse(cover, stego)?;
    let weighted = g.scale(image, T::cst(cfg.lambda1))?;
    let mut total = g.add(weighted, message)?;
    let mut perceptual = None;
    if cfg.perceptual {
        let p = g.grad_l1(cover, stego)?;
        let wp = g.scale(p, T::cst(cfg.lambda2))?;
        total = g.add(total, wp)?;
        perceptual = Some(p);
    }
    Ok(LossTerms { total, image, perceptual, message })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn warmup_weight_applies_before_the_switch() {
        let cfg = LossConfig { lambda1: 1.0, warmup_iterations: 3, warmup_lambda1: 0.01, ..Default::default() };
        let l: Vec<f64> = (0..5).map(|i| cfg.at(i).lambda1).collect();
        assert_eq!(l, [0.01, 0.01, 0.01, 1.0, 1.0]);
        assert_eq!(LossConfig::default().at(0), LossConfig::default());
    }

    #[test]
    fn zero_logits_cost_ln2_per_bit() {
        let mut g = Graph::<f64>::new();
        let img = g.input(Tensor::full(&[1, 3, 4, 4], 0.3));
        let grid = SegmentedMessage::new(vec![0, 1, 1, 0, 1, 0, 0, 1], 2, 4, 1).unwrap();
        let raw = g.variable(Tensor::zeros(&[2, 4]));
        let l = total_loss(&mut g, img, img, &grid, raw, &LossConfig::default()).unwrap();
        assert!((g.value(l.message).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(g.value(l.image).data()[0], 0.0);
    }

    #[test]
    fn saturated_logits_drive_loss_to_zero() {
        let mut g = Graph::<f64>::new();
        let img = g.input(Tensor::full(&[1, 3, 4, 4], 0.3));
        let bits = [0u32, 1, 1, 0];
        let grid = SegmentedMessage::new(bits.to_vec(), 1, 4, 1).unwrap();
        let raw = g.variable(Tensor::new(&[1, 4], bits.iter().map(|&b| if b == 1 { 60.0 } else { -60.0 }).collect()).unwrap());
        let l = total_loss(&mut g, img, img, &grid, raw, &LossConfig { perceptual: true, ..Default::default() }).unwrap();
        assert!(g.value(l.total).data()[0] < 1e-20);
    }

    #[test]
    fn multi_level_uses_mse() {
        let mut g = Graph::<f64>::new();
        let img = g.input(Tensor::full(&[1, 3, 4, 4], 0.3));
        let grid = SegmentedMessage::new(vec![0, 3], 1, 2, 3).unwrap();
        let raw = g.variable(Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap());
        let l = total_loss(&mut g, img, img, &grid, raw, &LossConfig::default()).unwrap();
        assert!((g.value(l.message).data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn rejects_negative_weights() {
        assert!(LossConfig { lambda1: -1.0, ..Default::default() }.validate().is_err());
    }
}
