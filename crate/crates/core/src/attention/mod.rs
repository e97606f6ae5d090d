//! Attention variants over a single token sequence `X: N×D`.
//!
//! Every variant shares the four `D×D` projections; the linear ones differ in
//! how queries and keys are mapped into a feature space before the
//! associativity rewrite `φ(Q)(φ(K)ᵀV)`. Each reorderable variant also has an
//! explicit quadratic form in [`explicit`] that materializes the `N×N`
//! weights, used as its oracle.

pub mod explicit;
mod kernels;
mod pinv;

use std::fmt;
use std::str::FromStr;

pub use kernels::{attend_graph, landmark_matrix, AttnVars};
pub use pinv::{iterative_pinv, pinv_graph};

use crate::error::{Error, Result};
use crate::tensor::{Activation, Element, Graph, Rng, Tensor, Var};

/// Default number of random features for Performer.
pub const DEFAULT_RAND_FEATURES: usize = 64;
/// Default Linformer projection rank.
pub const DEFAULT_PROJ_RANK: usize = 32;
/// Default Nyström landmark count.
pub const DEFAULT_LANDMARKS: usize = 32;
/// Default Newton-Schulz style iterations for the pseudo-inverse.
pub const DEFAULT_PINV_ITERS: usize = 6;
/// Epsilon added to every linear-attention denominator.
pub const DENOM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Softmax,
    VanillaLinear,
    Hedgehog,
    Performer,
    Cosformer,
    Linformer,
    Nystrom,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Softmax,
        Variant::VanillaLinear,
        Variant::Hedgehog,
        Variant::Performer,
        Variant::Cosformer,
        Variant::Linformer,
        Variant::Nystrom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Softmax => "softmax",
            Variant::VanillaLinear => "vanilla_linear",
            Variant::Hedgehog => "hedgehog",
            Variant::Performer => "performer",
            Variant::Cosformer => "cosformer",
            Variant::Linformer => "linformer",
            Variant::Nystrom => "nystrom",
        }
    }

    /// Variants computed through the `φ(Q)(φ(K)ᵀV)` rewrite.
    pub fn is_reordered(self) -> bool {
        matches!(
            self,
            Variant::VanillaLinear | Variant::Hedgehog | Variant::Performer | Variant::Cosformer
        )
    }

    /// Output depends on token positions, not just the token set.
    pub fn is_position_dependent(self) -> bool {
        matches!(self, Variant::Cosformer | Variant::Nystrom | Variant::Linformer)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown attention variant {s:?}")))
    }
}

/// Variant selector plus its hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub variant: Variant,
    pub d_model: usize,
    pub heads: usize,
    /// Feature map for `vanilla_linear`.
    pub feature_map: Activation,
    /// Nyström landmark count `m`.
    pub landmarks: usize,
    /// Linformer rank `k`.
    pub proj_rank: usize,
    /// Performer random-feature count `r`.
    pub rand_features: usize,
    /// Sequence length Linformer's projections were built for.
    pub seq_len_fixed: usize,
    pub pinv_iters: usize,
    pub seed: u64,
    pub denom_eps: f64,
}

impl AttentionSpec {
    pub fn new(variant: Variant, d_model: usize, heads: usize) -> Self {
        AttentionSpec {
            variant,
            d_model,
            heads,
            feature_map: Activation::EluPlusOne,
            landmarks: DEFAULT_LANDMARKS,
            proj_rank: DEFAULT_PROJ_RANK,
            rand_features: DEFAULT_RAND_FEATURES,
            seq_len_fixed: 0,
            pinv_iters: DEFAULT_PINV_ITERS,
            seed: 0,
            denom_eps: DENOM_EPS,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        AttentionSpec {
            variant,
            ..self.clone()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Param(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        match self.variant {
            Variant::Nystrom if self.landmarks == 0 || self.pinv_iters == 0 => {
                Err(Error::Param("nystrom needs landmarks ≥ 1 and pinv_iters ≥ 1".into()))
            }
            Variant::Linformer if self.proj_rank == 0 || self.seq_len_fixed == 0 => {
                Err(Error::Param("linformer needs proj_rank ≥ 1 and a fixed sequence length".into()))
            }
            Variant::Performer if self.rand_features == 0 => {
                Err(Error::Param("performer needs rand_features ≥ 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Checks that depend on the runtime sequence length.
    pub fn check_seq_len(&self, n: usize) -> Result<()> {
        match self.variant {
            Variant::Linformer if n != self.seq_len_fixed => Err(Error::SeqLen {
                configured: self.seq_len_fixed,
                runtime: n,
            }),
            Variant::Nystrom if self.landmarks > n => Err(Error::Param(format!(
                "nystrom landmarks m = {} exceed sequence length N = {n}",
                self.landmarks
            ))),
            _ => Ok(()),
        }
    }
}

/// Variant-specific parameters beyond the four projections.
#[derive(Clone, Debug, PartialEq)]
pub enum Extras<E> {
    None,
    /// One `d_head×d_head` map per head.
    Hedgehog(Vec<Tensor<E>>),
    /// `E`, `F`: `k×N`, shared across heads.
    Linformer { e: Tensor<E>, f: Tensor<E> },
    /// Frozen `r×d_head` Gaussian frequencies.
    Performer { omega: Tensor<E> },
}

/// Projection weights (applied as `X·W`) and variant extras.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<E> {
    pub w_q: Tensor<E>,
    pub w_k: Tensor<E>,
    pub w_v: Tensor<E>,
    pub w_o: Tensor<E>,
    pub extras: Extras<E>,
}

impl<E: Element> AttentionParams<E> {
    /// Fresh projections with std `1/√D` plus variant extras.
    pub fn init(spec: &AttentionSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let d = spec.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let w_q = Tensor::randn(&[d, d], std, rng);
        let w_k = Tensor::randn(&[d, d], std, rng);
        let w_v = Tensor::randn(&[d, d], std, rng);
        let w_o = Tensor::randn(&[d, d], std, rng);
        Ok(AttentionParams {
            w_q,
            w_k,
            w_v,
            w_o,
            extras: Self::init_extras(spec, spec.seed)?,
        })
    }

    /// Extras for `spec.variant`, drawn from `seed`.
    ///
    /// Hedgehog maps start at the identity; Linformer projections are
    /// Gaussian with std `1/√N`; Performer frequencies are standard normal.
    pub fn init_extras(spec: &AttentionSpec, seed: u64) -> Result<Extras<E>> {
        spec.validate()?;
        let dh = spec.d_head();
        let mut rng = Rng::new(seed);
        Ok(match spec.variant {
            Variant::Hedgehog => Extras::Hedgehog((0..spec.heads).map(|_| Tensor::eye(dh)).collect()),
            Variant::Linformer => {
                let n = spec.seq_len_fixed;
                let std = 1.0 / (n as f64).sqrt();
                let e = Tensor::randn(&[spec.proj_rank, n], std, &mut rng);
                let f = Tensor::randn(&[spec.proj_rank, n], std, &mut rng);
                Extras::Linformer { e, f }
            }
            Variant::Performer => Extras::Performer {
                omega: Tensor::randn(&[spec.rand_features, dh], 1.0, &mut rng),
            },
            _ => Extras::None,
        })
    }

    /// Named tensors, names local to the attention module.
    pub fn named(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = vec![
            ("w_q".to_string(), &self.w_q),
            ("w_k".to_string(), &self.w_k),
            ("w_v".to_string(), &self.w_v),
            ("w_o".to_string(), &self.w_o),
        ];
        match &self.extras {
            Extras::None => {}
            Extras::Hedgehog(maps) => {
                for (h, m) in maps.iter().enumerate() {
                    out.push((format!("hedgehog.{h}"), m));
                }
            }
            Extras::Linformer { e, f } => {
                out.push(("linformer.e".into(), e));
                out.push(("linformer.f".into(), f));
            }
            Extras::Performer { omega } => out.push(("performer.omega".into(), omega)),
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out = vec![
            ("w_q".to_string(), &mut self.w_q),
            ("w_k".to_string(), &mut self.w_k),
            ("w_v".to_string(), &mut self.w_v),
            ("w_o".to_string(), &mut self.w_o),
        ];
        match &mut self.extras {
            Extras::None => {}
            Extras::Hedgehog(maps) => {
                for (h, m) in maps.iter_mut().enumerate() {
                    out.push((format!("hedgehog.{h}"), m));
                }
            }
            Extras::Linformer { e, f } => {
                out.push(("linformer.e".into(), e));
                out.push(("linformer.f".into(), f));
            }
            Extras::Performer { omega } => out.push(("performer.omega".into(), omega)),
        }
        out
    }

    /// Put every tensor on `g`; `trainable(name)` decides param vs constant.
    /// Performer frequencies are always constant.
    pub fn bind(&self, g: &mut Graph<E>, trainable: impl Fn(&str) -> bool) -> AttnVars {
        let mut leaf = |name: &str, t: &Tensor<E>| {
            if trainable(name) && name != "performer.omega" {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let w_q = leaf("w_q", &self.w_q);
        let w_k = leaf("w_k", &self.w_k);
        let w_v = leaf("w_v", &self.w_v);
        let w_o = leaf("w_o", &self.w_o);
        let extras = match &self.extras {
            Extras::None => kernels::ExtraVars::None,
            Extras::Hedgehog(maps) => kernels::ExtraVars::Hedgehog(
                maps.iter()
                    .enumerate()
                    .map(|(h, m)| leaf(&format!("hedgehog.{h}"), m))
                    .collect(),
            ),
            Extras::Linformer { e, f } => kernels::ExtraVars::Linformer {
                e: leaf("linformer.e", e),
                f: leaf("linformer.f", f),
            },
            Extras::Performer { omega } => kernels::ExtraVars::Performer {
                omega_t: g.constant(omega.transpose()),
            },
        };
        AttnVars {
            w_q,
            w_k,
            w_v,
            w_o,
            extras,
        }
    }

    /// Tensors that can carry gradients: everything in [`Self::named`]
    /// except the frozen Performer frequencies.
    pub fn trainable(&self) -> Vec<(String, &Tensor<E>)> {
        self.named().into_iter().filter(|(n, _)| n != "performer.omega").collect()
    }

    /// Assemble graph handles from caller-owned leaves, one per entry of
    /// [`Self::trainable`] in order. Performer frequencies become constants.
    pub fn vars_from_leaves(&self, g: &mut Graph<E>, leaves: &[Var]) -> Result<AttnVars> {
        let want = self.trainable().len();
        if leaves.len() != want {
            return Err(Error::Param(format!("expected {want} attention leaves, got {}", leaves.len())));
        }
        let extras = match &self.extras {
            Extras::None => kernels::ExtraVars::None,
            Extras::Hedgehog(_) => kernels::ExtraVars::Hedgehog(leaves[4..].to_vec()),
            Extras::Linformer { .. } => kernels::ExtraVars::Linformer {
                e: leaves[4],
                f: leaves[5],
            },
            Extras::Performer { omega } => kernels::ExtraVars::Performer {
                omega_t: g.constant(omega.transpose()),
            },
        };
        Ok(AttnVars {
            w_q: leaves[0],
            w_k: leaves[1],
            w_v: leaves[2],
            w_o: leaves[3],
            extras,
        })
    }

    fn check_extras(&self, spec: &AttentionSpec) -> Result<()> {
        let ok = matches!(
            (&self.extras, spec.variant),
            (Extras::Hedgehog(_), Variant::Hedgehog)
                | (Extras::Linformer { .. }, Variant::Linformer)
                | (Extras::Performer { .. }, Variant::Performer)
                | (Extras::None, Variant::Softmax)
                | (Extras::None, Variant::VanillaLinear)
                | (Extras::None, Variant::Cosformer)
                | (Extras::None, Variant::Nystrom)
        );
        if ok {
            Ok(())
        } else {
            Err(Error::Param(format!("parameters do not match variant {}", spec.variant)))
        }
    }
}

fn run<E: Element>(x: &Tensor<E>, p: &AttentionParams<E>, spec: &AttentionSpec, want: Variant) -> Result<Tensor<E>> {
    if spec.variant != want {
        return Err(Error::Param(format!(
            "{} kernel called with a {} spec",
            want, spec.variant
        )));
    }
    attend(x, p, spec)
}

/// Evaluate the configured variant on `x` without recording gradients.
pub fn attend<E: Element>(x: &Tensor<E>, p: &AttentionParams<E>, spec: &AttentionSpec) -> Result<Tensor<E>> {
    p.check_extras(spec)?;
    let mut g = Graph::new();
    let xv = g.constant(x.as_matrix());
    let vars = p.bind(&mut g, |_| false);
    let out = attend_graph(&mut g, xv, &vars, spec)?;
    Ok(g.value(out).clone())
}

/// `softmax(QKᵀ/√d_head)V` per head, then `W_O`.
pub fn softmax_attention<E: Element>(x: &Tensor<E>, p: &AttentionParams<E>, spec: &AttentionSpec) -> Result<Tensor<E>> {
    run(x, p, spec, Variant::Softmax)
}

/// Reordered kernel attention with an elementwise feature map.
pub fn linear_attention<E: Element>(x: &Tensor<E>, p: &AttentionParams<E>, spec: &AttentionSpec) -> Result<Tensor<E>> {
    run(x, p, spec, Variant::VanillaLinear)
}

pub fn hedgehog_attention<E: Element>(x: &Tensor<E>, p: &AttentionParams<E>, spec: &AttentionSpec) -> Result<Tensor<E>> {
    run(x, p, spec, Variant::Hedgehog)
}

pub fn performer_attention<E: Element>(x: &Tensor<E>, p: &AttentionParams<E>, spec: &AttentionSpec) -> Result<Tensor<E>> {
    run(x, p, spec, Variant::Performer)
}

pub fn cosformer_attention<E: Element>(x: &Tensor<E>, p: &AttentionParams<E>, spec: &AttentionSpec) -> Result<Tensor<E>> {
    run(x, p, spec, Variant::Cosformer)
}

pub fn linformer_attention<E: Element>(x: &Tensor<E>, p: &AttentionParams<E>, spec: &AttentionSpec) -> Result<Tensor<E>> {
    run(x, p, spec, Variant::Linformer)
}

pub fn nystrom_attention<E: Element>(x: &Tensor<E>, p: &AttentionParams<E>, spec: &AttentionSpec) -> Result<Tensor<E>> {
    run(x, p, spec, Variant::Nystrom)
}

/// O(N²) form of a reorderable variant (see [`explicit`]).
pub fn linear_attention_explicit<E: Element>(
    x: &Tensor<E>,
    p: &AttentionParams<E>,
    spec: &AttentionSpec,
) -> Result<Tensor<E>> {
    p.check_extras(spec)?;
    explicit::explicit_attention(x, p, spec)
}
