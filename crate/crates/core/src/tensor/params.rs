use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::graph::Graph;
use super::{Real, Tensor};
use crate::error::{bail, Result};

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform(usize),
}

impl Init {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Init::Zeros => 0.0,
            Init::Ones => 1.0,
            Init::TruncNormal(std) => loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            },
            Init::FanInUniform(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                rng.random_range(-bound..bound)
            }
        }
    }
}

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    values: BTreeMap<String, Tensor<T>>,
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { values: BTreeMap::new(), grads: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.values.contains_key(&name) {
            bail!(State, "duplicate parameter '{name}'");
        }
        self.values.insert(name, t);
        Ok(())
    }

    pub fn init<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Result<()> {
        let t = Tensor::from_fn(shape, |_| T::cst(init.sample(rng)));
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.values.get_mut(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn clear_grads(&mut self) {
        self.grads.clear();
    }

    /// Copies gradients of every parameter bound in `graph` after its backward pass.
    /// Parameters that were bound but received no gradient get zeros.
    pub fn collect_grads(&mut self, graph: &Graph<T>) {
        self.grads.clear();
        for (name, g) in graph.param_grads() {
            let Some(v) = self.values.get(name) else { continue };
            let t = match g {
                Some(g) => Tensor::new(v.shape(), g.to_vec()).expect("gradient shape matches parameter"),
                None => Tensor::zeros(v.shape()),
            };
            self.grads.insert(name.to_string(), t);
        }
    }

    pub fn set_grad(&mut self, name: &str, g: Tensor<T>) -> Result<()> {
        match self.values.get(name) {
            Some(v) if v.shape() == g.shape() => {
                self.grads.insert(name.to_string(), g);
                Ok(())
            }
            Some(v) => bail!(Dimension, "gradient shape {:?} for parameter {:?}", g.shape(), v.shape()),
            None => bail!(State, "unknown parameter '{name}'"),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            values: self.values.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            grads: BTreeMap::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iteration_is_lexicographic() {
        let mut s = ParamStore::<f32>::new();
        for n in ["b.w", "a.z", "a.b"] {
            s.insert(n, Tensor::zeros(&[1])).unwrap();
        }
        assert_eq!(s.names().collect::<Vec<_>>(), ["a.b", "a.z", "b.w"]);
        assert!(s.insert("a.b", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn truncated_normal_stays_in_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let v = Init::TruncNormal(0.02).sample(&mut rng);
            assert!(v.abs() <= 0.04);
        }
    }
}
