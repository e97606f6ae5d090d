use std::f64::consts::PI;
use std::sync::atomic::{AtomicBool, Ordering};

use super::{pinv_graph, AttentionSpec, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Activation, Element, Graph, Tensor, Var};

/// Attention parameters placed on a graph.
#[derive(Clone, Debug)]
pub struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub(crate) extras: ExtraVars,
}

impl AttnVars {
    /// Leaf handles in the order of `AttentionParams::named`.
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = vec![self.w_q, self.w_k, self.w_v, self.w_o];
        match &self.extras {
            ExtraVars::None => {}
            ExtraVars::Hedgehog(maps) => out.extend(maps),
            ExtraVars::Linformer { e, f } => out.extend([*e, *f]),
            ExtraVars::Performer { omega_t } => out.push(*omega_t),
        }
        out
    }
}

#[derive(Clone, Debug)]
pub(crate) enum ExtraVars {
    None,
    Hedgehog(Vec<Var>),
    Linformer { e: Var, f: Var },
    Performer { omega_t: Var },
}

static ZERO_DENOM_WARNED: AtomicBool = AtomicBool::new(false);

/// `m×N` averaging matrix over `m` contiguous, near-equal token segments.
pub fn landmark_matrix<E: Element>(n: usize, m: usize) -> Result<Tensor<E>> {
    if m == 0 || m > n {
        return Err(Error::Param(format!("cannot form {m} landmarks from {n} tokens")));
    }
    let mut p = Tensor::zeros(&[m, n]);
    for s in 0..m {
        let (lo, hi) = (s * n / m, (s + 1) * n / m);
        let w = E::one() / E::lit((hi - lo) as f64);
        for j in lo..hi {
            p.set(s, j, w);
        }
    }
    Ok(p)
}

/// Run `spec.variant` on `x` (an `N×D` node) and return the `N×D` output node.
pub fn attend_graph<E: Element>(g: &mut Graph<E>, x: Var, p: &AttnVars, spec: &AttentionSpec) -> Result<Var> {
    spec.validate()?;
    let (n, d) = (g.value(x).rows(), g.value(x).cols());
    if d != spec.d_model {
        return Err(Error::shape("attention input", g.shape(x), &[n, spec.d_model]));
    }
    spec.check_seq_len(n)?;
    let q = g.matmul(x, p.w_q)?;
    let k = g.matmul(x, p.w_k)?;
    let v = g.matmul(x, p.w_v)?;
    let heads = match spec.variant {
        Variant::Softmax => softmax_heads(g, q, k, v, spec)?,
        Variant::VanillaLinear => vanilla_heads(g, q, k, v, spec)?,
        Variant::Hedgehog => match &p.extras {
            ExtraVars::Hedgehog(maps) => hedgehog_heads(g, q, k, v, maps, spec)?,
            _ => return Err(Error::Param("hedgehog maps missing".into())),
        },
        Variant::Performer => match &p.extras {
            ExtraVars::Performer { omega_t } => performer_heads(g, q, k, v, *omega_t, spec)?,
            _ => return Err(Error::Param("performer frequencies missing".into())),
        },
        Variant::Cosformer => cosformer_heads(g, q, k, v, spec)?,
        Variant::Linformer => match &p.extras {
            ExtraVars::Linformer { e, f } => linformer_heads(g, q, k, v, *e, *f, spec)?,
            _ => return Err(Error::Param("linformer projections missing".into())),
        },
        Variant::Nystrom => nystrom_heads(g, q, k, v, spec)?,
    };
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    g.matmul(cat, p.w_o)
}

fn inv_sqrt<E: Element>(dh: usize) -> E {
    E::lit(1.0 / (dh as f64).sqrt())
}

fn split<E: Element>(g: &mut Graph<E>, t: Var, h: usize, dh: usize) -> Result<Var> {
    g.slice_cols(t, h * dh, dh)
}

fn softmax_heads<E: Element>(g: &mut Graph<E>, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Result<Vec<Var>> {
    let dh = spec.d_head();
    let qs = g.scale(q, inv_sqrt(dh))?;
    (0..spec.heads)
        .map(|h| {
            let qh = split(g, qs, h, dh)?;
            let kh = split(g, k, h, dh)?;
            let vh = split(g, v, h, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let w = g.softmax_rows(scores)?;
            g.matmul(w, vh)
        })
        .collect()
}

/// `φ(Q)(φ(K)ᵀV) / (φ(Q)·Σφ(K) + ε)` for one head.
fn reorder<E: Element>(g: &mut Graph<E>, fq: Var, fk: Var, vh: Var, eps: E) -> Result<Var> {
    let n = g.value(fk).rows();
    let fkt = g.transpose(fk)?;
    let kv = g.matmul(fkt, vh)?;
    let num = g.matmul(fq, kv)?;
    let ones = g.constant(Tensor::ones(&[1, n]));
    let z = g.matmul(ones, fk)?;
    let zt = g.transpose(z)?;
    let den = g.matmul(fq, zt)?;
    warn_if_degenerate(g.value(den));
    g.div_col(num, den, eps)
}

fn warn_if_degenerate<E: Element>(den: &Tensor<E>) {
    if den.data().iter().any(|&v| v <= E::zero()) && !ZERO_DENOM_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("linear attention denominator reached zero; epsilon keeps the output finite");
    }
}

fn vanilla_heads<E: Element>(g: &mut Graph<E>, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Result<Vec<Var>> {
    let dh = spec.d_head();
    let eps = E::lit(spec.denom_eps);
    let qs = g.scale(q, inv_sqrt(dh))?;
    (0..spec.heads)
        .map(|h| {
            let qh = split(g, qs, h, dh)?;
            let kh = split(g, k, h, dh)?;
            let vh = split(g, v, h, dh)?;
            let fq = g.act(spec.feature_map, qh)?;
            let fk = g.act(spec.feature_map, kh)?;
            reorder(g, fq, fk, vh, eps)
        })
        .collect()
}

/// `[softmax(xM), softmax(−xM)]`, `2·d_head` features per row.
fn hedgehog_map<E: Element>(g: &mut Graph<E>, x: Var, map: Var) -> Result<Var> {
    let u = g.matmul(x, map)?;
    let pos = g.softmax_rows(u)?;
    let neg_u = g.scale(u, -E::one())?;
    let neg = g.softmax_rows(neg_u)?;
    g.concat_cols(&[pos, neg])
}

fn hedgehog_heads<E: Element>(
    g: &mut Graph<E>,
    q: Var,
    k: Var,
    v: Var,
    maps: &[Var],
    spec: &AttentionSpec,
) -> Result<Vec<Var>> {
    let dh = spec.d_head();
    let eps = E::lit(spec.denom_eps);
    let qs = g.scale(q, inv_sqrt(dh))?;
    (0..spec.heads)
        .map(|h| {
            let qh = split(g, qs, h, dh)?;
            let kh = split(g, k, h, dh)?;
            let vh = split(g, v, h, dh)?;
            let fq = hedgehog_map(g, qh, maps[h])?;
            let fk = hedgehog_map(g, kh, maps[h])?;
            reorder(g, fq, fk, vh, eps)
        })
        .collect()
}

/// Positive random features `exp(ωx − ‖x‖²/2)/√r`.
fn performer_map<E: Element>(g: &mut Graph<E>, x: Var, omega_t: Var) -> Result<Var> {
    let r = g.value(omega_t).cols();
    let u = g.matmul(x, omega_t)?;
    let sq = g.row_sq_norm(x)?;
    let half = g.scale(sq, E::lit(-0.5))?;
    let w = g.add_col(u, half)?;
    let e = g.act(Activation::Exp, w)?;
    g.scale(e, E::lit(1.0 / (r as f64).sqrt()))
}

fn performer_heads<E: Element>(
    g: &mut Graph<E>,
    q: Var,
    k: Var,
    v: Var,
    omega_t: Var,
    spec: &AttentionSpec,
) -> Result<Vec<Var>> {
    let dh = spec.d_head();
    let eps = E::lit(spec.denom_eps);
    // d^{-1/4} on both sides gives the kernel exp(q·k/√d).
    let s = E::lit((dh as f64).powf(-0.25));
    let qs = g.scale(q, s)?;
    let ks = g.scale(k, s)?;
    (0..spec.heads)
        .map(|h| {
            let qh = split(g, qs, h, dh)?;
            let kh = split(g, ks, h, dh)?;
            let vh = split(g, v, h, dh)?;
            let fq = performer_map(g, qh, omega_t)?;
            let fk = performer_map(g, kh, omega_t)?;
            reorder(g, fq, fk, vh, eps)
        })
        .collect()
}

/// `cos(πi/2N)` and `sin(πi/2N)` columns for positions `0..N`.
pub(crate) fn cosformer_weights<E: Element>(n: usize) -> (Tensor<E>, Tensor<E>) {
    let angle = |i: usize| PI * i as f64 / (2.0 * n as f64);
    (
        Tensor::from_fn(&[n, 1], |i| E::lit(angle(i).cos())),
        Tensor::from_fn(&[n, 1], |i| E::lit(angle(i).sin())),
    )
}

fn cosformer_heads<E: Element>(g: &mut Graph<E>, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Result<Vec<Var>> {
    let dh = spec.d_head();
    let n = g.value(q).rows();
    let eps = E::lit(spec.denom_eps);
    let (cos, sin) = cosformer_weights::<E>(n);
    let cos = g.constant(cos);
    let sin = g.constant(sin);
    let ones = g.constant(Tensor::ones(&[1, n]));
    let qs = g.scale(q, inv_sqrt(dh))?;
    (0..spec.heads)
        .map(|h| {
            let qh = split(g, qs, h, dh)?;
            let kh = split(g, k, h, dh)?;
            let vh = split(g, v, h, dh)?;
            let fq = g.act(Activation::Relu, qh)?;
            let fk = g.act(Activation::Relu, kh)?;
            let q_cos = g.mul_col(fq, cos)?;
            let q_sin = g.mul_col(fq, sin)?;
            let k_cos = g.mul_col(fk, cos)?;
            let k_sin = g.mul_col(fk, sin)?;

            let kct = g.transpose(k_cos)?;
            let kst = g.transpose(k_sin)?;
            let kv_cos = g.matmul(kct, vh)?;
            let kv_sin = g.matmul(kst, vh)?;
            let num_cos = g.matmul(q_cos, kv_cos)?;
            let num_sin = g.matmul(q_sin, kv_sin)?;
            let num = g.add(num_cos, num_sin)?;

            let z_cos = g.matmul(ones, k_cos)?;
            let z_sin = g.matmul(ones, k_sin)?;
            let zct = g.transpose(z_cos)?;
            let zst = g.transpose(z_sin)?;
            let den_cos = g.matmul(q_cos, zct)?;
            let den_sin = g.matmul(q_sin, zst)?;
            let den = g.add(den_cos, den_sin)?;
            warn_if_degenerate(g.value(den));
            g.div_col(num, den, eps)
        })
        .collect()
}

fn linformer_heads<E: Element>(
    g: &mut Graph<E>,
    q: Var,
    k: Var,
    v: Var,
    e: Var,
    f: Var,
    spec: &AttentionSpec,
) -> Result<Vec<Var>> {
    let dh = spec.d_head();
    let qs = g.scale(q, inv_sqrt(dh))?;
    let ek = g.matmul(e, k)?;
    let fv = g.matmul(f, v)?;
    (0..spec.heads)
        .map(|h| {
            let qh = split(g, qs, h, dh)?;
            let kh = split(g, ek, h, dh)?;
            let vh = split(g, fv, h, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let w = g.softmax_rows(scores)?;
            g.matmul(w, vh)
        })
        .collect()
}

fn nystrom_heads<E: Element>(g: &mut Graph<E>, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Result<Vec<Var>> {
    let dh = spec.d_head();
    let n = g.value(q).rows();
    let m = spec.landmarks;
    let qs = g.scale(q, inv_sqrt(dh))?;
    let seg = g.constant(landmark_matrix(n, m)?);
    let ql = g.matmul(seg, qs)?;
    let kl = g.matmul(seg, k)?;
    (0..spec.heads)
        .map(|h| {
            let qh = split(g, qs, h, dh)?;
            let kh = split(g, k, h, dh)?;
            let vh = split(g, v, h, dh)?;
            let qlh = split(g, ql, h, dh)?;
            let klh = split(g, kl, h, dh)?;

            let klt = g.transpose(klh)?;
            let s1 = g.matmul(qh, klt)?;
            let k1 = g.softmax_rows(s1)?;
            let s2 = g.matmul(qlh, klt)?;
            let k2 = g.softmax_rows(s2)?;
            let kt = g.transpose(kh)?;
            let s3 = g.matmul(qlh, kt)?;
            let k3 = g.softmax_rows(s3)?;

            let z = pinv_graph(g, k2, spec.pinv_iters)?;
            let t = g.matmul(k3, vh)?;
            let t = g.matmul(z, t)?;
            g.matmul(k1, t)
        })
        .collect()
}
