//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape once in reverse. Parameters are bound by
//! name from a [`ParamStore`] so the same weights used several times (e.g. for
//! each sample of a batch) share one node and accumulate one gradient.

use std::collections::BTreeMap;

use super::kernels::{self, AttnGeom, ConvGeom};
use super::params::ParamStore;
use super::{gemm, Real, Tensor};
use crate::error::{bail, Result, StegoError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    PermuteRows(Var, Vec<usize>),
    Concat { parts: Vec<Var>, axis: usize },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, c_out: usize },
    Deconv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, c_in: usize },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    BceLogits(Var, Var),
    GradL1(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: BTreeMap<String, Var>,
    checked: bool,
    frozen: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), params: BTreeMap::new(), checked: false, frozen: false }
    }

    /// In checked mode every op verifies its output is finite.
    pub fn checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
    }

    /// With frozen parameters, [`param`](Self::param) binds constants and no
    /// backward state is kept for them.
    pub fn frozen(mut self, on: bool) -> Self {
        self.frozen = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.checked && !value.all_finite() {
            bail!(Numeric, "non-finite value produced at node {}", self.nodes.len());
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| StegoError::State(format!("unknown parameter '{name}'")))?
            .clone();
        let v = if self.frozen { self.input(t) } else { self.variable(t) };
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`backward`](Self::backward) call, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Names and gradients of every bound parameter, lexicographic order.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, Option<&[T]>)> {
        self.params.iter().map(move |(n, &v)| (n.as_str(), self.grad(v)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(Dimension, "{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// `x [.., C] + b [C]`, broadcasting over leading axes.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [c] {
            bail!(Dimension, "bias shape {:?} does not match last axis {c}", self.shape(b));
        }
        let bv = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c) {
            row.iter_mut().zip(&bv).for_each(|(v, &bb)| *v += bb);
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(t, Op::AddRowBias(x, b), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            bail!(Dimension, "matmul of {sa:?} and {sb:?}");
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm::gemm(
            T::one(),
            gemm::Mat::new(self.value(a).data(), m, k),
            gemm::Mat::new(self.value(b).data(), k, n),
            T::zero(),
            gemm::MatMut::new(&mut out, m, n),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg)
    }

    /// `x W + b` for `x [N, in]`, `W [in, out]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            bail!(Dimension, "transpose expects a matrix, got {s:?}");
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Row gather on a matrix: `out[i] = x[perm[i]]`. `perm` must be a permutation.
    pub fn permute_rows(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || perm.len() != s[0] {
            bail!(Dimension, "row permutation of length {} for shape {s:?}", perm.len());
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                bail!(Config, "row index list is not a permutation");
            }
        }
        let c = s[1];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for &p in perm {
            out.extend_from_slice(&src[p * c..(p + 1) * c]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&s, out)?, Op::PermuteRows(x, perm.to_vec()), rg)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| StegoError::Dimension("empty concat".into()))?).to_vec();
        if axis >= first.len() {
            bail!(Dimension, "concat axis {axis} out of range for {first:?}");
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                bail!(Dimension, "concat of {first:?} with {s:?}");
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let c = *self.shape(a).last().expect("non-empty shape");
        let mut t = self.value(a).clone();
        kernels::softmax_rows(t.data_mut(), c);
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let c = *self.shape(x).last().expect("non-empty shape");
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            bail!(Dimension, "layer norm over {c} channels with gamma {:?} beta {:?}", self.shape(gamma), self.shape(beta));
        }
        let (y, mean, rstd) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            c,
            eps,
        );
        let t = Tensor::new(self.shape(x), y)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let (mean, rstd) = if rg { (mean, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(t, Op::LayerNorm { x, gamma, beta, mean, rstd }, rg)
    }

    /// Scaled dot-product attention on already projected `q, k, v [N, C]`.
    ///
    /// Rows are split into consecutive groups of `group` tokens (one window
    /// each); attention never crosses a group boundary. Channels are split
    /// into `heads` slices of `C / heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, group: usize) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let s = self.shape(q).to_vec();
        if s.len() != 2 {
            bail!(Dimension, "attention expects [N, C] tokens, got {s:?}");
        }
        if heads == 0 || !s[1].is_multiple_of(heads) {
            bail!(Config, "{} channels not divisible by {heads} heads", s[1]);
        }
        if group == 0 || !s[0].is_multiple_of(group) {
            bail!(Config, "{} tokens not divisible into groups of {group}", s[0]);
        }
        let geom = AttnGeom { tokens: s[0], channels: s[1], heads, group };
        let (out, probs) =
            kernels::attention_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), &geom);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let probs = if rg { probs } else { Vec::new() };
        self.push(Tensor::new(&s, out)?, Op::Attention { q, k, v, geom, probs }, rg)
    }

    /// Cross-correlation, `x [B, C_in, H, W]`, `w [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || ws[1] != xs[1] {
            bail!(Dimension, "conv2d input {xs:?} with kernel {ws:?}");
        }
        if stride == 0 {
            bail!(Config, "conv2d stride must be positive");
        }
        let c_out = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                bail!(Dimension, "conv2d bias {:?} for {c_out} channels", self.shape(b));
            }
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad).ok_or_else(|| {
            StegoError::Config(format!("conv2d output size not integral for {xs:?}, k={}, stride={stride}, pad={pad}", ws[2]))
        })?;
        let (bsz, per_in, per_out) = (xs[0], xs[1] * xs[2] * xs[3], c_out * geom.out_h * geom.out_w);
        let mut out = vec![T::zero(); bsz * per_out];
        let bias = b.map(|b| self.value(b).data());
        for i in 0..bsz {
            kernels::conv_forward(
                &self.value(x).data()[i * per_in..(i + 1) * per_in],
                self.value(w).data(),
                bias,
                c_out,
                &geom,
                &mut out[i * per_out..(i + 1) * per_out],
            );
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(&[bsz, c_out, geom.out_h, geom.out_w], out)?;
        self.push(t, Op::Conv2d { x, w, b, geom, c_out }, rg)
    }

    /// Transposed convolution, `x [B, C_in, H, W]`, `w [C_in, C_out, k, k]`.
    /// Output extent is `(H - 1) * stride - 2 * pad + k`. This is the exact
    /// adjoint of [`conv2d`](Self::conv2d) with the same kernel array.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || ws[0] != xs[1] {
            bail!(Dimension, "deconv2d input {xs:?} with kernel {ws:?}");
        }
        let (c_in, c_out, k) = (ws[0], ws[1], ws[2]);
        if stride == 0 {
            bail!(Config, "deconv2d stride must be positive");
        }
        let out_dim = |n: usize| ((n - 1) * stride + k).checked_sub(2 * pad);
        let (oh, ow) = match (out_dim(xs[2]), out_dim(xs[3])) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => bail!(Config, "deconv2d geometry invalid for {xs:?}, k={k}"),
        };
        let geom = ConvGeom::new(c_out, oh, ow, k, stride, pad)
            .filter(|g| g.out_h == xs[2] && g.out_w == xs[3])
            .ok_or_else(|| StegoError::Config("deconv2d geometry has no matching convolution".into()))?;
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                bail!(Dimension, "deconv2d bias {:?} for {c_out} channels", self.shape(b));
            }
        }
        let (bsz, per_in, per_out) = (xs[0], c_in * xs[2] * xs[3], c_out * oh * ow);
        let mut out = vec![T::zero(); bsz * per_out];
        let bias = b.map(|b| self.value(b).data());
        for i in 0..bsz {
            kernels::deconv_forward(
                &self.value(x).data()[i * per_in..(i + 1) * per_in],
                self.value(w).data(),
                bias,
                c_in,
                &geom,
                &mut out[i * per_out..(i + 1) * per_out],
            );
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[bsz, c_out, oh, ow], out)?, Op::Deconv2d { x, w, b, geom, c_in }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::cst(t.numel() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / T::cst(va.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(s), Op::Mse(a, b), rg)
    }

    /// Mean binary cross-entropy of `logits` against constant `targets` in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.same_shape(logits, targets, "bce")?;
        let (z, t) = (self.value(logits).data(), self.value(targets).data());
        let s = z.iter().zip(t).map(|(&z, &t)| kernels::bce_logit(z, t)).sum::<T>() / T::cst(z.len() as f64);
        let rg = self.rg(logits);
        self.push(Tensor::scalar(s), Op::BceLogits(logits, targets), rg)
    }

    /// Mean absolute difference of horizontal and vertical finite-difference
    /// gradients of two images `[.., H, W]`.
    pub fn grad_l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "grad_l1")?;
        let s = self.shape(a).to_vec();
        if s.len() < 2 || s[s.len() - 1] < 2 || s[s.len() - 2] < 2 {
            bail!(Dimension, "grad_l1 needs images of at least 2x2, got {s:?}");
        }
        let d: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let (total, _) = grad_l1_terms(&d, &s);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(total), Op::GradL1(a, b), rg)
    }

    /// Reverse pass from a single-element `loss`; gradients are retrievable with
    /// [`grad`](Self::grad) until the next call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            bail!(Dimension, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).zip(vb).for_each(|((d, &g), &y)| *d += g * y);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).zip(va).for_each(|((d, &g), &x)| *d += g * x);
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c);
                }
            }
            Op::AddRowBias(x, b) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                let c = self.value(*b).numel();
                if let Some(d) = self.acc(grads, *b) {
                    for row in g.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    gemm::gemm(T::one(), gemm::Mat::new(g, m, n), gemm::Mat::new(vb, k, n).t(), T::one(), gemm::MatMut::new(d, m, k));
                }
                if let Some(d) = self.acc(grads, *b) {
                    gemm::gemm(T::one(), gemm::Mat::new(va, m, k).t(), gemm::Mat::new(g, m, n), T::one(), gemm::MatMut::new(d, k, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
            Op::PermuteRows(x, perm) => {
                let c = self.shape(*x)[1];
                if let Some(d) = self.acc(grads, *x) {
                    for (i, &p) in perm.iter().enumerate() {
                        d[p * c..(p + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p)[*axis] * inner;
                    if let Some(d) = self.acc(grads, p) {
                        for o in 0..outer {
                            d[o * w..(o + 1) * w]
                                .iter_mut()
                                .zip(&g[o * row + start..o * row + start + w])
                                .for_each(|(d, &g)| *d += g);
                        }
                    }
                    start += w;
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).zip(x).for_each(|((d, &g), &x)| *d += g * kernels::gelu_grad(x));
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).zip(x).for_each(|((d, &g), &x)| {
                        if x > T::zero() {
                            *d += g
                        }
                    });
                }
            }
            Op::Sigmoid(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).zip(out).for_each(|((d, &g), &y)| *d += g * y * (T::one() - y));
                }
            }
            Op::Softmax(a) => {
                let c = *node.value.shape().last().expect("shape");
                if let Some(d) = self.acc(grads, *a) {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let c = self.value(*gamma).numel();
                let (xv, gv) = (self.value(*x).data(), self.value(*gamma).data());
                let mut dx = self.acc(grads, *x).map(|d| d.to_vec());
                let mut dg = self.acc(grads, *gamma).map(|d| d.to_vec());
                let mut db = self.acc(grads, *beta).map(|d| d.to_vec());
                kernels::layer_norm_backward(xv, gv, mean, rstd, g, c, dx.as_deref_mut(), dg.as_deref_mut(), db.as_deref_mut());
                for (v, buf) in [(*x, dx), (*gamma, dg), (*beta, db)] {
                    if let Some(buf) = buf {
                        grads[v.0] = Some(buf);
                    }
                }
            }
            Op::Attention { q, k, v, geom, probs } => {
                let n = node.value.numel();
                let mut dq = vec![T::zero(); n];
                let mut dk = vec![T::zero(); n];
                let mut dv = vec![T::zero(); n];
                kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    geom,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(d) = self.acc(grads, var) {
                        d.iter_mut().zip(&buf).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, c_out } => {
                let xs = self.shape(*x);
                let (bsz, per_in) = (xs[0], xs[1] * xs[2] * xs[3]);
                let per_out = c_out * geom.out_h * geom.out_w;
                let mut dx = self.acc(grads, *x).map(|d| d.to_vec());
                let mut dw = self.acc(grads, *w).map(|d| d.to_vec());
                let mut db = b.and_then(|b| self.acc(grads, b).map(|d| d.to_vec()));
                for i in 0..bsz {
                    kernels::conv_backward(
                        &self.value(*x).data()[i * per_in..(i + 1) * per_in],
                        self.value(*w).data(),
                        &g[i * per_out..(i + 1) * per_out],
                        *c_out,
                        geom,
                        dx.as_mut().map(|d| &mut d[i * per_in..(i + 1) * per_in]),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                }
                store(grads, *x, dx);
                store(grads, *w, dw);
                if let Some(b) = b {
                    store(grads, *b, db);
                }
            }
            Op::Deconv2d { x, w, b, geom, c_in } => {
                let xs = self.shape(*x);
                let (bsz, per_in) = (xs[0], c_in * xs[2] * xs[3]);
                let per_out = geom.channels * geom.h * geom.w;
                let mut dx = self.acc(grads, *x).map(|d| d.to_vec());
                let mut dw = self.acc(grads, *w).map(|d| d.to_vec());
                let mut db = b.and_then(|b| self.acc(grads, b).map(|d| d.to_vec()));
                for i in 0..bsz {
                    kernels::deconv_backward(
                        &self.value(*x).data()[i * per_in..(i + 1) * per_in],
                        self.value(*w).data(),
                        &g[i * per_out..(i + 1) * per_out],
                        *c_in,
                        geom,
                        dx.as_mut().map(|d| &mut d[i * per_in..(i + 1) * per_in]),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                }
                store(grads, *x, dx);
                store(grads, *w, dw);
                if let Some(b) = b {
                    store(grads, *b, db);
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = T::cst(self.value(*a).numel() as f64);
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let k = T::cst(2.0) * g[0] / T::cst(va.len() as f64);
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(va.iter().zip(vb)).for_each(|(d, (&x, &y))| *d += k * (x - y));
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(va.iter().zip(vb)).for_each(|(d, (&x, &y))| *d -= k * (x - y));
                }
            }
            Op::BceLogits(z, t) => {
                let (zv, tv) = (self.value(*z).data(), self.value(*t).data());
                let k = g[0] / T::cst(zv.len() as f64);
                if let Some(d) = self.acc(grads, *z) {
                    d.iter_mut()
                        .zip(zv.iter().zip(tv))
                        .for_each(|(d, (&z, &t))| *d += k * (kernels::sigmoid(z) - t));
                }
            }
            Op::GradL1(a, b) => {
                let s = self.shape(*a).to_vec();
                let diff: Vec<T> =
                    self.value(*a).data().iter().zip(self.value(*b).data()).map(|(&x, &y)| x - y).collect();
                let (_, dd) = grad_l1_terms(&diff, &s);
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(&dd).for_each(|(d, &v)| *d += g[0] * v);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(&dd).for_each(|(d, &v)| *d -= g[0] * v);
                }
            }
        }
    }
}

fn store<T>(grads: &mut [Option<Vec<T>>], v: Var, buf: Option<Vec<T>>) {
    if let Some(buf) = buf {
        grads[v.0] = Some(buf);
    }
}

/// Value and derivative (w.r.t. the difference image) of the gradient-domain L1 proxy.
fn grad_l1_terms<T: Real>(d: &[T], shape: &[usize]) -> (T, Vec<T>) {
    let w = shape[shape.len() - 1];
    let h = shape[shape.len() - 2];
    let planes = d.len() / (h * w);
    let count = T::cst((planes * (h * (w - 1) + (h - 1) * w)) as f64);
    let mut total = T::zero();
    let mut deriv = vec![T::zero(); d.len()];
    let sgn = |v: T| if v > T::zero() { T::one() } else if v < T::zero() { -T::one() } else { T::zero() };
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            for x in 0..w {
                let i = base + y * w + x;
                if x + 1 < w {
                    let e = d[i + 1] - d[i];
                    total += e.abs();
                    deriv[i + 1] += sgn(e) / count;
                    deriv[i] -= sgn(e) / count;
                }
                if y + 1 < h {
                    let e = d[i + w] - d[i];
                    total += e.abs();
                    deriv[i + w] += sgn(e) / count;
                    deriv[i] -= sgn(e) / count;
                }
            }
        }
    }
    (total / count, deriv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.matmul(i, m).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn projector_matmul() {
        let mut g = Graph::new();
        let p = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let m = g.input(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let y = g.matmul(p, m).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.input(Tensor::<f64>::zeros(&[2, 3]));
        let b = g.input(Tensor::<f64>::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(StegoError::Dimension(_))));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[1, 1, 4, 3], |i| i as f64));
        let w = g.input(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_box_sum() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 1, 5, 5], 2.5));
        let w = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 22.5));
    }

    #[test]
    fn conv_rejects_fractional_geometry() {
        let mut g = Graph::new();
        let x = g.input(Tensor::<f64>::zeros(&[1, 1, 8, 8]));
        let w = g.input(Tensor::<f64>::zeros(&[1, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None, 2, 1), Err(StegoError::Config(_))));
    }

    #[test]
    fn deconv_doubles_extent() {
        let mut g = Graph::new();
        let x = g.input(Tensor::<f64>::full(&[1, 1, 2, 2], 1.0));
        let w = g.input(Tensor::<f64>::full(&[1, 3, 2, 2], 1.0));
        let y = g.deconv2d(x, w, None, 2, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 4, 4]);
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = g.input(t(&[2, 3], &[0.3, -1.2, 2.0, 5.0, 5.5, 4.0]));
        let b = g.input(t(&[2, 3], &[100.3, 98.8, 102.0, -5.0, -4.5, -6.0]));
        let ya = g.softmax(a).unwrap();
        let yb = g.softmax(b).unwrap();
        assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-12);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[0.0]));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data()[0], 0.5);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 4], 3.0));
        let gamma = g.input(Tensor::full(&[4], 1.0));
        let beta = g.input(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_hand_value() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let gamma = g.input(Tensor::full(&[3], 1.0));
        let beta = g.input(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let expect = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn layer_norm_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.input(Tensor::<f64>::zeros(&[2, 4]));
        let gamma = g.input(Tensor::full(&[3], 1.0));
        let beta = g.input(Tensor::zeros(&[3]));
        assert!(matches!(g.layer_norm(x, gamma, beta, 1e-5), Err(StegoError::Dimension(_))));
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut g = Graph::new();
        let q = g.input(Tensor::<f64>::zeros(&[4, 6]));
        assert!(matches!(g.attention(q, q, q, 4, 4), Err(StegoError::Config(_))));
    }

    #[test]
    fn checked_mode_flags_non_finite() {
        let mut g = Graph::<f64>::new().checked(true);
        let x = g.input(t(&[1], &[f64::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(StegoError::Numeric(_))));
    }

    #[test]
    fn backward_accumulates_shared_use() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.5, -2.0]));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, -4.0]);
    }

    #[test]
    fn concat_along_channels() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64));
        let b = g.input(Tensor::from_fn(&[1, 2, 2, 2], |i| 10.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[1, 3, 2, 2]);
        assert_eq!(&g.value(c).data()[..5], &[0.0, 1.0, 2.0, 3.0, 10.0]);
    }
}
