//! Eigenvalue spectrum of positional-embedding covariance.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{bail, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    /// Descending, `min(N, C)` values; tiny negative round-off is clamped to 0.
    pub eigenvalues: Vec<f64>,
    /// `ratios[n - 1] = sum of the top n eigenvalues / sum of all`.
    pub ratios: Vec<f64>,
    /// True when every eigenvalue is zero (all rows equal after centering, or all zero).
    pub degenerate: bool,
}

/// Spectrum of the `C x C` covariance of the rows of `e [N, C]`.
///
/// With `center`, rows are mean-centered and the covariance divides by
/// `N - 1`; otherwise it is the second-moment matrix divided by `N`. The
/// nonzero spectrum equals that of the `N x N` Gram matrix, so the smaller of
/// the two is decomposed.
pub fn pe_spectrum<T: Real>(e: &Tensor<T>, center: bool) -> Result<SpectrumReport> {
    if e.rank() != 2 {
        bail!(Dimension, "embedding must be [N, C], got {:?}", e.shape());
    }
    let (n, c) = (e.shape()[0], e.shape()[1]);
    if n < 2 {
        bail!(Dimension, "spectrum needs at least two rows");
    }
    let mut x = DMatrix::from_fn(n, c, |i, j| e.data()[i * c + j].to_f64c());
    if !x.iter().all(|v| v.is_finite()) {
        bail!(Numeric, "embedding contains non-finite values");
    }
    if center {
        for j in 0..c {
            let m = x.column(j).mean();
            x.column_mut(j).add_scalar_mut(-m);
        }
    }
    let denom = if center { (n - 1) as f64 } else { n as f64 };
    let m = if c <= n { x.transpose() * &x } else { &x * x.transpose() } / denom;
    let mut eig: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eig.iter().sum();
    let scale = eig.first().copied().unwrap_or(0.0);
    if total <= 0.0 || scale <= f64::EPSILON * x.norm_squared() / denom {
        let len = eig.len();
        return Ok(SpectrumReport { eigenvalues: vec![0.0; len], ratios: vec![0.0; len], degenerate: true });
    }
    let mut acc = 0.0;
    let ratios = eig
        .iter()
        .map(|&v| {
            acc += v;
            (acc / total).min(1.0)
        })
        .collect();
    Ok(SpectrumReport { eigenvalues: eig, ratios, degenerate: false })
}
