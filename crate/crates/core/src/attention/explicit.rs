//! Quadratic-cost reference forms.
//!
//! These materialize the full `N×N` weight matrix with plain tensor
//! arithmetic (no graph) and serve as oracles for the reordered kernels.

use std::f64::consts::PI;

use super::{AttentionParams, AttentionSpec, Extras, Variant};
use crate::error::{Error, Result};
use crate::tensor::{activation, matmul, softmax_rows, Activation, Element, Tensor, EXP_CLAMP};

/// `exp(ωx − ‖x‖²/2)/√r` row by row; `omega` is `r×d`.
pub fn performer_feature_map<E: Element>(x: &Tensor<E>, omega: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, d) = (x.rows(), x.cols());
    let r = omega.rows();
    if omega.cols() != d {
        return Err(Error::shape("performer_feature_map", x.shape(), omega.shape()));
    }
    let inv = 1.0 / (r as f64).sqrt();
    let mut out = Tensor::zeros(&[n, r]);
    for i in 0..n {
        let xi: Vec<f64> = x.row(i).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let half_sq = 0.5 * xi.iter().map(|v| v * v).sum::<f64>();
        for f in 0..r {
            let dot: f64 = omega
                .row(f)
                .iter()
                .zip(&xi)
                .map(|(w, v)| w.to_f64().unwrap_or(f64::NAN) * v)
                .sum();
            let arg = (dot - half_sq).min(EXP_CLAMP);
            out.set(i, f, E::lit(arg.exp() * inv));
        }
    }
    out.check_finite("performer_feature_map")
}

/// `[softmax(xM), softmax(−xM)]` row by row.
pub fn hedgehog_feature_map<E: Element>(x: &Tensor<E>, map: &Tensor<E>) -> Result<Tensor<E>> {
    let u = matmul(x, map)?;
    let pos = softmax_rows(&u)?;
    let neg = softmax_rows(&u.map(|v| -v))?;
    Tensor::concat_cols(&[&pos, &neg])
}

/// `O_i = Σ_j A_ij V_j / (Σ_j A_ij + ε)` with the weights `a` given explicitly.
fn normalize_apply<E: Element>(a: &Tensor<E>, v: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
    let (n, dv) = (a.rows(), v.cols());
    let mut out = Tensor::zeros(&[n, dv]);
    for i in 0..n {
        let mut den = 0.0;
        let mut acc = vec![0.0f64; dv];
        for j in 0..a.cols() {
            let w = a.at(i, j).to_f64().unwrap_or(f64::NAN);
            den += w;
            for (c, slot) in acc.iter_mut().enumerate() {
                *slot += w * v.at(j, c).to_f64().unwrap_or(f64::NAN);
            }
        }
        for (c, s) in acc.into_iter().enumerate() {
            out.set(i, c, E::lit(s / (den + eps)));
        }
    }
    out.check_finite("explicit attention")
}

fn head<E: Element>(t: &Tensor<E>, h: usize, dh: usize) -> Result<Tensor<E>> {
    t.slice_cols(h * dh, dh)
}

/// Explicit form of the configured variant.
///
/// Defined for softmax and for every reorderable variant (vanilla linear,
/// Hedgehog, Performer, Cosformer).
pub fn explicit_attention<E: Element>(x: &Tensor<E>, p: &AttentionParams<E>, spec: &AttentionSpec) -> Result<Tensor<E>> {
    spec.validate()?;
    let x = x.as_matrix();
    let n = x.rows();
    let dh = spec.d_head();
    let q = matmul(&x, &p.w_q)?;
    let k = matmul(&x, &p.w_k)?;
    let v = matmul(&x, &p.w_v)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(spec.heads);
    for h in 0..spec.heads {
        let qh = head(&q, h, dh)?;
        let kh = head(&k, h, dh)?;
        let vh = head(&v, h, dh)?;
        let o = match spec.variant {
            Variant::Softmax => {
                let mut s = matmul(&qh, &kh.transpose())?;
                s.data_mut().iter_mut().for_each(|v| *v = *v * E::lit(scale));
                matmul(&softmax_rows(&s)?, &vh)?
            }
            Variant::VanillaLinear => {
                let fq = activation(spec.feature_map, &qh.map(|v| v * E::lit(scale)))?;
                let fk = activation(spec.feature_map, &kh)?;
                normalize_apply(&matmul(&fq, &fk.transpose())?, &vh, spec.denom_eps)?
            }
            Variant::Hedgehog => {
                let Extras::Hedgehog(maps) = &p.extras else {
                    return Err(Error::Param("hedgehog maps missing".into()));
                };
                let fq = hedgehog_feature_map(&qh.map(|v| v * E::lit(scale)), &maps[h])?;
                let fk = hedgehog_feature_map(&kh, &maps[h])?;
                normalize_apply(&matmul(&fq, &fk.transpose())?, &vh, spec.denom_eps)?
            }
            Variant::Performer => {
                let Extras::Performer { omega } = &p.extras else {
                    return Err(Error::Param("performer frequencies missing".into()));
                };
                let s = E::lit((dh as f64).powf(-0.25));
                let fq = performer_feature_map(&qh.map(|v| v * s), omega)?;
                let fk = performer_feature_map(&kh.map(|v| v * s), omega)?;
                normalize_apply(&matmul(&fq, &fk.transpose())?, &vh, spec.denom_eps)?
            }
            Variant::Cosformer => {
                let fq = activation(Activation::Relu, &qh.map(|v| v * E::lit(scale)))?;
                let fk = activation(Activation::Relu, &kh)?;
                let mut a = matmul(&fq, &fk.transpose())?;
                for i in 0..n {
                    for j in 0..n {
                        let w = (PI * (i as f64 - j as f64) / (2.0 * n as f64)).cos();
                        let cur = a.at(i, j);
                        a.set(i, j, cur * E::lit(w));
                    }
                }
                normalize_apply(&a, &vh, spec.denom_eps)?
            }
            Variant::Linformer | Variant::Nystrom => {
                return Err(Error::Param(format!("{} has no explicit reordered form", spec.variant)))
            }
        };
        outs.push(o);
    }
    let refs: Vec<&Tensor<E>> = outs.iter().collect();
    matmul(&Tensor::concat_cols(&refs)?, &p.w_o)
}
