use std::collections::BTreeMap;

use super::{ParamStore, Real, Tensor};
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam moments for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients currently held by `store`.
    /// Every parameter must have a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for n in &names {
            if store.grad(n).is_none() {
                bail!(State, "parameter '{n}' has no gradient");
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::cst(c.beta1), T::cst(c.beta2));
        let (lr, eps) = (T::cst(c.lr), T::cst(c.eps));
        let (bc1, bc2) = (T::cst(bc1), T::cst(bc2));
        for n in &names {
            let g: Tensor<T> = store.grad(n).expect("checked above").clone();
            let numel = g.numel();
            let m = self.m.entry(n.clone()).or_insert_with(|| vec![T::zero(); numel]);
            let v = self.v.entry(n.clone()).or_insert_with(|| vec![T::zero(); numel]);
            if m.len() != numel {
                bail!(State, "moment shape changed for '{n}'");
            }
            let p = store.get_mut(n).expect("name from store").data_mut();
            for i in 0..numel {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
