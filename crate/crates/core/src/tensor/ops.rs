use std::fmt;
use std::str::FromStr;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Inputs to the `exp` feature map are clamped at this value.
pub const EXP_CLAMP: f64 = 30.0;

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

/// Elementwise feature maps for kernelized attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    EluPlusOne,
    Relu,
    Softplus,
    Exp,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::EluPlusOne,
        Activation::Relu,
        Activation::Softplus,
        Activation::Exp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::EluPlusOne => "elu_plus_one",
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
            Activation::Exp => "exp",
        }
    }

    /// Flops charged per element.
    pub fn cost(self) -> u64 {
        match self {
            Activation::Softplus => 2,
            _ => 1,
        }
    }

    #[inline]
    pub fn apply<E: Element>(self, x: E) -> E {
        match self {
            Activation::EluPlusOne => {
                if x > E::zero() {
                    x + E::one()
                } else {
                    x.exp()
                }
            }
            Activation::Relu => x.max(E::zero()),
            Activation::Softplus => {
                // ln(1 + e^x) without overflow for large x
                if x > E::lit(20.0) {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            }
            Activation::Exp => x.min(E::lit(EXP_CLAMP)).exp(),
        }
    }

    /// Derivative at `x`, given `y = apply(x)`.
    #[inline]
    pub fn derivative<E: Element>(self, x: E, y: E) -> E {
        match self {
            Activation::EluPlusOne => {
                if x > E::zero() {
                    E::one()
                } else {
                    y
                }
            }
            Activation::Relu => {
                if x > E::zero() {
                    E::one()
                } else {
                    E::zero()
                }
            }
            Activation::Softplus => E::one() / (E::one() + (-x).exp()),
            Activation::Exp => {
                if x < E::lit(EXP_CLAMP) {
                    y
                } else {
                    E::zero()
                }
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown activation {s:?}")))
    }
}

/// `c += a · b` for `a: m×k`, `b: k×n`.
pub(crate) fn gemm_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    E::gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), E::one(), c);
}

/// `c += aᵀ · b` for `a: m×k`, `b: m×n`, giving `k×n`.
pub(crate) fn gemm_tn_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    E::gemm(k, m, n, a, (1, k as isize), b, (n as isize, 1), E::one(), c);
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    E::gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), E::zero(), &mut c);
    c
}

/// Matrix product of `a: m×k` and `b: k×n`.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = vec![E::zero(); m * n];
    gemm_acc(&a.data, &b.data, &mut c, m, k, n);
    Tensor::new(&[m, n], c)?.check_finite("matmul")
}

pub(crate) fn softmax_rows_raw<E: Element>(x: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); rows * cols];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let max = src.iter().fold(E::neg_infinity(), |m, &v| m.max(v));
        let mut sum = E::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        let inv = E::one() / sum;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    out
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "softmax_rows input" });
    }
    let (r, c) = (x.rows(), x.cols());
    Tensor::new(x.shape(), softmax_rows_raw(&x.data, r, c))?.check_finite("softmax_rows")
}

pub fn activation<E: Element>(kind: Activation, x: &Tensor<E>) -> Result<Tensor<E>> {
    x.map(|v| kind.apply(v)).check_finite("activation")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu_scalar<E: Element>(x: E) -> E {
    let inner = E::lit(GELU_C) * (x + E::lit(GELU_A) * x * x * x);
    E::lit(0.5) * x * (E::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar<E: Element>(x: E) -> E {
    let inner = E::lit(GELU_C) * (x + E::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = E::lit(GELU_C) * (E::one() + E::lit(3.0 * GELU_A) * x * x);
    E::lit(0.5) * (E::one() + t) + E::lit(0.5) * x * (E::one() - t * t) * dinner
}

/// Tanh-approximated GELU.
pub fn gelu<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    x.map(gelu_scalar).check_finite("gelu")
}

/// Normalized rows and reciprocal standard deviations.
pub(crate) fn layernorm_stats<E: Element>(x: &[E], rows: usize, cols: usize, eps: E) -> (Vec<E>, Vec<E>) {
    let mut xhat = vec![E::zero(); rows * cols];
    let mut rstd = vec![E::zero(); rows];
    let n = E::lit(cols as f64);
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let mean = src.iter().copied().sum::<E>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / n;
        let rs = E::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for (d, &s) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(src) {
            *d = (s - mean) * rs;
        }
    }
    (xhat, rstd)
}

/// Per-row layer normalization followed by `gamma · x̂ + beta`.
pub fn layernorm<E: Element>(x: &Tensor<E>, gamma: &Tensor<E>, beta: &Tensor<E>, eps: E) -> Result<Tensor<E>> {
    let (r, c) = (x.rows(), x.cols());
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("layernorm", x.shape(), gamma.shape()));
    }
    if eps <= E::zero() {
        return Err(Error::Param("layernorm eps must be positive".into()));
    }
    let (mut y, _) = layernorm_stats(&x.data, r, c, eps);
    for row in y.chunks_mut(c) {
        for ((v, &g), &b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = g * *v + b;
        }
    }
    Tensor::new(x.shape(), y)?.check_finite("layernorm")
}
