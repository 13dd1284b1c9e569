use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{evaluate, LossConfig, MetricsReport};
use crate::error::{bail, Result};
use crate::layout::{message_rng, BitMessage, MessageRng};
use crate::model::{conceal, recover, StegoModel};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Center-crop size of training images; must equal the model's height and width.
    pub image_size: usize,
    pub seed: u64,
    /// Evaluate on the held-out split every this many iterations; 0 disables.
    pub eval_interval: usize,
    /// Fraction of the dataset held out for evaluation.
    pub holdout: f64,
    pub checkpoint: Option<PathBuf>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            iterations: 5000,
            batch_size: 2,
            image_size: 64,
            seed: 0,
            eval_interval: 500,
            holdout: 0.1,
            checkpoint: None,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.image_size == 0 {
            bail!(Config, "iterations, batch size and image size must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout) {
            bail!(Config, "holdout fraction {} is outside [0, 1)", self.holdout);
        }
        if !(self.lr > 0.0 && self.eps > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            bail!(Config, "invalid Adam hyperparameters");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// Per-iteration batch means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub iteration: u64,
    pub loss: f32,
    pub image_mse: f32,
    pub message: f32,
    /// Bit accuracy of the batch on unquantized stego images.
    pub acc: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepStats>,
    pub evals: Vec<MetricsReport>,
}

/// Seeded optimization loop. Every random draw (batch order and messages)
/// comes from one generator, so runs with equal seeds are bitwise identical.
pub struct Trainer {
    pub model: StegoModel,
    pub config: TrainConfig,
    pub loss: LossConfig,
    adam: AdamState<f32>,
    rng: MessageRng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(model: StegoModel, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        model.config.validate()?;
        if config.image_size != model.config.height || config.image_size != model.config.width {
            bail!(
                Config,
                "image size {} does not match the model's {}x{}",
                config.image_size,
                model.config.height,
                model.config.width
            );
        }
        let adam = AdamState::new(config.adam());
        let rng = message_rng(config.seed);
        Ok(Trainer { model, config, loss, adam, rng, order: Vec::new(), cursor: 0 })
    }

    /// Indices of the next batch, reshuffling after each pass over the data.
    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size {
            if self.cursor >= self.order.len() || self.order.len() != n {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One optimizer step on the given covers and messages.
    pub fn step(&mut self, covers: &[&Tensor<f32>], messages: &[BitMessage]) -> Result<StepStats> {
        if covers.is_empty() || covers.len() != messages.len() {
            bail!(Data, "{} covers for {} messages", covers.len(), messages.len());
        }
        let cfg = self.model.config.clone();
        let layout = cfg.layout();
        let weights = self.loss.at(self.model.iterations);
        let mut g = Graph::new();
        let mut totals = Vec::new();
        let (mut img, mut msg, mut correct, mut nbits) = (0f32, 0f32, 0usize, 0usize);
        for (cover, bits) in covers.iter().zip(messages) {
            let grids = layout.encode(bits)?;
            let c = g.input((*cover).clone());
            let out = conceal::conceal(&mut g, &self.model.params, &cfg, c, &grids)?;
            let raw = recover::recover_raw(&mut g, &self.model.params, &cfg, out.stego)?;
            let coarse = grids.last().expect("three stages");
            let terms = super::total_loss(&mut g, c, out.stego, coarse, raw, &weights)?;
            img += g.value(terms.image).data()[0];
            msg += g.value(terms.message).data()[0];
            let dec = crate::model::DecodedMessage::from_raw(g.value(raw).clone(), &cfg)?;
            correct += dec.bits.bits().iter().zip(bits.bits()).filter(|(a, b)| a == b).count();
            nbits += bits.len();
            totals.push(terms.total);
        }
        let mut sum = totals[0];
        for &t in &totals[1..] {
            sum = g.add(sum, t)?;
        }
        let b = covers.len() as f32;
        let loss = g.scale(sum, 1.0 / b)?;
        let lv = g.value(loss).data()[0];
        let iteration = self.model.iterations;
        if !lv.is_finite() {
            bail!(
                Numeric,
                "non-finite loss at iteration {iteration}: loss {lv}, image mse {}, message {}",
                img / b,
                msg / b
            );
        }
        g.backward(loss)?;
        self.model.params.collect_grads(&g);
        drop(g);
        for (name, _) in self.model.params.iter() {
            let finite = self.model.params.grad(name).is_some_and(|t| t.all_finite());
            if !finite {
                bail!(Numeric, "non-finite gradient for {name} at iteration {iteration}, loss {lv}");
            }
        }
        self.adam.step(&mut self.model.params)?;
        self.model.params.clear_grads();
        self.model.iterations += 1;
        Ok(StepStats { iteration, loss: lv, image_mse: img / b, message: msg / b, acc: correct as f32 / nbits as f32 })
    }

    /// Runs `config.iterations` steps on `train`, evaluating on `held_out` every
    /// `eval_interval` steps and after the last one. `observe` sees every step
    /// and every evaluation as they happen.
    pub fn run(
        &mut self,
        train: &[Tensor<f32>],
        held_out: &[Tensor<f32>],
        mut observe: impl FnMut(&StepStats, Option<&MetricsReport>),
    ) -> Result<TrainReport> {
        if train.is_empty() {
            bail!(Data, "training set is empty");
        }
        let start = Instant::now();
        let mut report = TrainReport::default();
        let eval_seed = self.config.seed ^ 0x5eed_e7a1;
        for it in 0..self.config.iterations {
            let idx = self.next_batch(train.len());
            let mut msgs = Vec::with_capacity(idx.len());
            for _ in &idx {
                msgs.push(BitMessage::random(self.model.bit_len(), &mut self.rng)?);
            }
            let covers: Vec<&Tensor<f32>> = idx.iter().map(|&i| &train[i]).collect();
            let stats = self.step(&covers, &msgs)?;
            let last = it + 1 == self.config.iterations;
            let due = self.config.eval_interval > 0 && (it + 1) % self.config.eval_interval == 0;
            let mut eval = None;
            if !held_out.is_empty() && (due || last) {
                let mut r = evaluate(&self.model, held_out, eval_seed)?.summary;
                r.wall_clock_s = start.elapsed().as_secs_f64();
                report.evals.push(r.clone());
                eval = Some(r);
                if let Some(p) = &self.config.checkpoint {
                    self.model.save(p)?;
                }
            }
            observe(&stats, eval.as_ref());
            report.steps.push(stats);
        }
        if let Some(p) = &self.config.checkpoint {
            self.model.save(p)?;
        }
        Ok(report)
    }
}
