//! Finite-difference verification of analytic gradients.
//!
//! Numeric derivatives use the fourth-order five-point stencil
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, whose truncation error is
//! small enough to allow steps where round-off stays far below the gradients
//! being checked. The relative error of one coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`; a check reports the
//! maximum over every coordinate that was probed. The floor makes gradients
//! that vanish identically, such as attention key biases under softmax shift
//! invariance, compare by absolute error.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{bail, Result};

const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Human readable location of the worst coordinate.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub probed: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        GradCheckReport { max_rel_error: 0.0, worst: String::new(), analytic: 0.0, numeric: 0.0, probed: 0 }
    }

    fn record(&mut self, loc: impl FnOnce() -> String, analytic: f64, numeric: f64) -> Result<()> {
        if !analytic.is_finite() || !numeric.is_finite() {
            bail!(Numeric, "non-finite gradient at {} (analytic {analytic}, numeric {numeric})", loc());
        }
        let err = rel_error(analytic, numeric);
        self.probed += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = err;
            self.worst = loc();
            self.analytic = analytic;
            self.numeric = numeric;
        }
        Ok(())
    }

    fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_empty() {
            let probed = self.probed;
            *self = other.clone();
            self.probed += probed;
        } else {
            self.probed += other.probed;
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Checks a scalar function that supplies its own analytic gradient.
pub fn gradcheck<F>(f: F, point: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (v0, grad) = f(point)?;
    if !v0.is_finite() {
        bail!(Numeric, "function value is not finite at the check point");
    }
    if grad.len() != point.len() {
        bail!(Dimension, "gradient has {} entries for {} coordinates", grad.len(), point.len());
    }
    let mut report = GradCheckReport::empty();
    let mut x = point.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        let numeric = stencil(h, |d| {
            x[i] = orig + d;
            let v = f(&x).map(|r| r.0);
            x[i] = orig;
            v
        })?;
        report.record(|| format!("x[{i}]"), grad[i], numeric)?;
    }
    Ok(report)
}

/// Checks a graph-built scalar with respect to every element of `inputs`.
pub fn gradcheck_graph<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let value = scalar_of(&g, out)?;
        let mut grads = Vec::new();
        if want_grad {
            g.backward(out)?;
            for (v, t) in vars.iter().zip(ins) {
                grads.push(g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec));
            }
        }
        Ok((value, grads))
    };
    let (_, grads) = eval(inputs, true)?;
    let mut report = GradCheckReport::empty();
    let mut work = inputs.to_vec();
    for (ti, grad) in grads.iter().enumerate() {
        for ei in 0..work[ti].numel() {
            let orig = work[ti].data()[ei];
            let numeric = stencil(h, |d| {
                work[ti].data_mut()[ei] = orig + d;
                let v = eval(&work, false).map(|r| r.0);
                work[ti].data_mut()[ei] = orig;
                v
            })?;
            report.record(|| format!("input {ti}[{ei}]"), grad[ei], numeric)?;
        }
    }
    Ok(report)
}

/// Checks a graph-built scalar with respect to the parameters of `store`.
///
/// `max_per_tensor` limits how many coordinates of each parameter are probed
/// (evenly spaced); `None` probes all of them.
pub fn gradcheck_params<F>(
    store: &ParamStore<f64>,
    h: f64,
    max_per_tensor: Option<usize>,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let mut analytic = store.clone();
    analytic.collect_grads(&g);
    drop(g);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, s)?;
        scalar_of(&g, out)
    };

    let mut report = GradCheckReport::empty();
    let mut work = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let n = store.get(name).expect("name from store").numel();
        let grad = analytic.grad(name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let picks: Vec<usize> = match max_per_tensor {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut sub = GradCheckReport::empty();
        for ei in picks {
            let orig = work.get(name).expect("present").data()[ei];
            let numeric = stencil(h, |d| {
                work.get_mut(name).expect("present").data_mut()[ei] = orig + d;
                let v = eval(&work);
                work.get_mut(name).expect("present").data_mut()[ei] = orig;
                v
            })?;
            sub.record(|| format!("{name}[{ei}]"), grad[ei], numeric)?;
        }
        report.merge(sub);
    }
    Ok(report)
}

/// Five-point derivative at offset 0 of `f(d)`, the function shifted by `d`.
fn stencil(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (p2, p1, m1, m2) = (f(2.0 * h)?, f(h)?, f(-h)?, f(-2.0 * h)?);
    Ok((m2 - p2 + 8.0 * (p1 - m1)) / (12.0 * h))
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        bail!(Dimension, "gradcheck target must be scalar, got shape {:?}", t.shape());
    }
    let x = t.data()[0];
    if !x.is_finite() {
        bail!(Numeric, "gradcheck target is not finite");
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_exact() {
        let r = gradcheck(|x| Ok((x[0] * x[0], vec![2.0 * x[0]])), &[3.0], 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn sum_of_sines() {
        let point: Vec<f64> = (0..10).map(|i| 0.3 * i as f64 - 1.1).collect();
        let r = gradcheck(
            |x| Ok((x.iter().map(|v| v.sin()).sum(), x.iter().map(|v| v.cos()).collect())),
            &point,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let r = gradcheck(|x| Ok((x[0] * x[0], vec![3.0 * x[0]])), &[2.0], 1e-5).unwrap();
        assert!(r.max_rel_error > 0.3);
    }

    #[test]
    fn non_finite_value_is_numeric_error() {
        let r = gradcheck(|x| Ok((x[0].ln(), vec![1.0 / x[0]])), &[-1.0], 1e-5);
        assert!(matches!(r, Err(crate::StegoError::Numeric(_))));
    }
}
