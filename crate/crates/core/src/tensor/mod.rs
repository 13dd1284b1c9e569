//! Dense tensors, a reverse-mode tape, parameter storage and the Adam optimizer.
//!
//! Everything in the network stack is expressed through [`Graph`]. The same
//! code runs in `f32` for training and in `f64` for finite-difference checks.

mod adam;
mod checkpoint;
pub(crate) mod gemm;
pub mod gradcheck;
mod graph;
mod kernels;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{bail, Result};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use graph::{Graph, Var};
pub use kernels::sigmoid;
pub use params::{Init, ParamStore};

/// Floating point element type understood by the tape and the GEMM backend.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Copy + Send + Sync + Debug + Display + Default + 'static
{
    /// `c = alpha * a * b + beta * c` on raw strided storage.
    ///
    /// # Safety
    /// All strided accesses implied by the dimensions must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn cst(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major n-dimensional array. `shape.iter().product() == data.len()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            bail!(Dimension, "zero-sized dimension in shape {shape:?}");
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            bail!(Dimension, "shape {shape:?} needs {n} values, got {}", data.len());
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            bail!(Dimension, "cannot reshape {:?} into {shape:?}", self.shape);
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::cst(v.to_f64c())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a multi-index.
    pub fn at(&self, idx: &[usize]) -> T {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &d) in idx.iter().zip(&self.shape) {
            off = off * d + i;
        }
        self.data[off]
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}
