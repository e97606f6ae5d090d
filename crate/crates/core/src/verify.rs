//! Self-contained oracle suites bundled for the `verify` command.

use crate::attention::{self, attend, attend_graph, iterative_pinv, AttentionParams, AttentionSpec, Variant};
use crate::bench::{crossover_check, feature_map_cost, flops_attention, measured_flops, softmax_core, spec_for_length, vanilla_core, Crossover};
use crate::error::Result;
use crate::model::{ViTConfig, ViTModel};
use crate::pipeline::{attention_align_graph, feature_align_graph, LayerReduction};
use crate::tensor::{gradcheck, Activation, Element, Graph, Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Suite = fn() -> Result<(bool, String)>;

pub const SUITES: [(&str, Suite); 5] = [
    ("reordering", reordering),
    ("gradients", gradients),
    ("pinv", pinv),
    ("crossover", crossover),
    ("flops", flops),
];

pub fn run_all() -> Vec<SuiteResult> {
    SUITES
        .iter()
        .map(|&(name, suite)| match suite() {
            Ok((passed, detail)) => SuiteResult { name, passed, detail },
            Err(e) => SuiteResult {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

fn random_input<E: Element>(n: usize, d: usize, rng: &mut Rng) -> Tensor<E> {
    Tensor::from_fn(&[n, d], |_| E::lit(rng.normal()))
}

/// Reordered linear attention against its explicit quadratic form.
pub fn reordering() -> Result<(bool, String)> {
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for variant in Variant::ALL.into_iter().filter(|v| v.is_reordered()) {
        for n in [3, 17, 64] {
            for heads in [1, 4] {
                for seed in 0..10 {
                    let spec = AttentionSpec {
                        seed,
                        ..AttentionSpec::new(variant, 16, heads)
                    };
                    let mut rng = Rng::new(seed).fork(n as u64);
                    let p = AttentionParams::<f64>::init(&spec, &mut rng)?;
                    let x = random_input::<f64>(n, 16, &mut rng);
                    let fast = attend(&x, &p, &spec)?;
                    let slow = attention::linear_attention_explicit(&x, &p, &spec)?;
                    worst64 = worst64.max(fast.max_abs_diff(&slow)?);

                    let (p32, x32) = (cast_params(&p), x.cast::<f32>());
                    let fast = attend(&x32, &p32, &spec)?;
                    let slow = attention::linear_attention_explicit(&x32, &p32, &spec)?;
                    worst32 = worst32.max(fast.max_abs_diff(&slow)? as f64);
                }
            }
        }
    }
    Ok((
        worst64 < 1e-10 && worst32 < 1e-4,
        format!("max_abs_f64={worst64:.3e} max_abs_f32={worst32:.3e}"),
    ))
}

fn cast_params(p: &AttentionParams<f64>) -> AttentionParams<f32> {
    use attention::Extras;
    AttentionParams {
        w_q: p.w_q.cast(),
        w_k: p.w_k.cast(),
        w_v: p.w_v.cast(),
        w_o: p.w_o.cast(),
        extras: match &p.extras {
            Extras::None => Extras::None,
            Extras::Hedgehog(maps) => Extras::Hedgehog(maps.iter().map(|m| m.cast()).collect()),
            Extras::Linformer { e, f } => Extras::Linformer { e: e.cast(), f: f.cast() },
            Extras::Performer { omega } => Extras::Performer { omega: omega.cast() },
        },
    }
}

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-3;

/// Finite-difference check of one attention variant with respect to its
/// input and every trainable parameter.
pub fn gradcheck_attention(spec: &AttentionSpec, n: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let params = AttentionParams::<f64>::init(spec, &mut rng)?;
    let x = random_input::<f64>(n, spec.d_model, &mut rng);
    let weights = random_input::<f64>(n, spec.d_model, &mut rng);
    let mut leaves = vec![x];
    leaves.extend(params.trainable().into_iter().map(|(_, t)| t.clone()));
    let report = gradcheck::check(&leaves, GRAD_STEP, |g, vars| {
        let attn = params.vars_from_leaves(g, &vars[1..])?;
        let out = attend_graph(g, vars[0], &attn, spec)?;
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w)?;
        g.sum(prod)
    })?;
    Ok(report.max_rel_error())
}

/// Small specs exercising every variant.
pub fn gradient_specs(n: usize) -> Vec<AttentionSpec> {
    Variant::ALL
        .into_iter()
        .map(|v| AttentionSpec {
            landmarks: 3,
            proj_rank: 3,
            rand_features: 8,
            seq_len_fixed: n,
            seed: 7,
            ..AttentionSpec::new(v, 8, 2)
        })
        .collect()
}

/// Tiny ViT with `variant` attention: 8×8 images, one block, D=8, H=2, 3 classes.
fn tiny_model(variant: Variant) -> Result<ViTModel<f64>> {
    let teacher = ViTModel::<f64>::init(ViTConfig::new(8, 4, 1, 8, 2, 3), 5)?;
    if variant == Variant::Softmax {
        return Ok(teacher);
    }
    let target = AttentionSpec {
        landmarks: 3,
        proj_rank: 3,
        rand_features: 8,
        ..AttentionSpec::new(variant, 8, 2)
    };
    teacher.linearize(&target)
}

fn model_ce_loss(model: &ViTModel<f64>, batch: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, |_| false);
    let trace = model.forward_graph(&mut g, &vars, batch, false)?;
    let logits = model.logits_graph(&mut g, &vars, trace.features, labels.len())?;
    let loss = g.cross_entropy(logits, labels)?;
    Ok(g.value(loss).data()[0])
}

/// Central differences through a whole tiny model under cross-entropy:
/// patch embedding, positions, CLS, layernorms, attention, MLP and head.
///
/// Each tensor is probed on a strided subset of about six coordinates and
/// scored by `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)`; the worst tensor is returned.
pub fn gradcheck_model(variant: Variant) -> Result<f64> {
    let model = tiny_model(variant)?;
    let mut rng = Rng::new(17);
    let batch = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.uniform());
    let labels = [0, 2];

    let mut g = Graph::new();
    let vars = model.bind(&mut g, |_| true);
    let trace = model.forward_graph(&mut g, &vars, &batch, false)?;
    let logits = model.logits_graph(&mut g, &vars, trace.features, 2)?;
    let loss = g.cross_entropy(logits, &labels)?;
    let grads = g.backward(loss)?;

    let named = model.named();
    let mut worst = 0.0f64;
    for (name, var) in &vars.trainable {
        let analytic = grads
            .get(*var)
            .ok_or_else(|| crate::Error::Contract(format!("no gradient reached {name}")))?;
        let base = named
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| (*t).clone())
            .ok_or_else(|| crate::Error::Contract(format!("unknown tensor {name}")))?;
        let stride = (base.len() / 6).max(1);
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for k in (0..base.len()).step_by(stride) {
            let probe = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                let mut t = base.clone();
                t.data_mut()[k] += delta;
                m.set_named(name, t)?;
                model_ce_loss(&m, &batch, &labels)
            };
            let numeric = (probe(GRAD_STEP)? - probe(-GRAD_STEP)?) / (2.0 * GRAD_STEP);
            let a = analytic.data()[k];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let denom = na.sqrt().max(nn.sqrt());
        worst = worst.max(if denom < 1e-12 { diff.sqrt() } else { diff.sqrt() / denom });
    }
    Ok(worst)
}

pub fn gradients() -> Result<(bool, String)> {
    let n = 6;
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for spec in gradient_specs(n) {
        let e = gradcheck_attention(&spec, n, 11)?;
        parts.push(format!("{}={e:.1e}", spec.variant));
        worst = worst.max(e);
    }
    let mut rng = Rng::new(5);
    let layers: Vec<Tensor<f64>> = (0..4).map(|_| random_input(n, 8, &mut rng)).collect();
    let attn = gradcheck::check(&layers, GRAD_STEP, |g, v| {
        attention_align_graph(g, &v[..2], &v[2..], LayerReduction::Sum)
    })?
    .max_rel_error();
    let feat = gradcheck::check(&layers[..2], GRAD_STEP, |g, v| feature_align_graph(g, v[0], v[1], 5.0))?
        .max_rel_error();
    parts.push(format!("attention_align={attn:.1e} feature_align={feat:.1e}"));
    worst = worst.max(attn).max(feat);
    let mut model = 0.0f64;
    for variant in Variant::ALL {
        model = model.max(gradcheck_model(variant)?);
    }
    parts.push(format!("whole_model={model:.1e}"));
    worst = worst.max(model);
    Ok((worst < GRAD_TOL, parts.join(" ")))
}

/// Random row-stochastic matrix with positive entries.
pub fn row_stochastic(n: usize, rng: &mut Rng) -> Tensor<f64> {
    let mut t = Tensor::from_fn(&[n, n], |_| rng.uniform() + 1e-3);
    for r in 0..n {
        let s: f64 = t.row(r).iter().sum();
        for c in 0..n {
            t.set(r, c, t.at(r, c) / s);
        }
    }
    t
}

/// `‖AZA − A‖_F / ‖A‖_F`.
pub fn pinv_residual(a: &Tensor<f64>, z: &Tensor<f64>) -> Result<f64> {
    let aza = crate::tensor::matmul(&crate::tensor::matmul(a, z)?, a)?;
    let diff = aza.zip_map(a, |x, y| x - y)?;
    Ok(diff.frobenius() / a.frobenius())
}

pub fn pinv() -> Result<(bool, String)> {
    let mut ok = true;
    let mut at6 = 0.0f64;
    let mut at16 = 0.0f64;
    for seed in 0..5 {
        let a = row_stochastic(8, &mut Rng::new(seed));
        let mut prev = f64::INFINITY;
        for iters in [2, 4, 6, 8, 12, 16] {
            let r = pinv_residual(&a, &iterative_pinv(&a, iters)?)?;
            // converged residuals jitter at the rounding floor
            ok &= r <= prev + 1e-12;
            prev = r;
            if iters == 6 {
                at6 = at6.max(r);
            }
        }
        at16 = at16.max(prev);
    }
    ok &= at16 < 1e-8;
    Ok((ok, format!("monotone residual, worst at 6 iters {at6:.3e}, at 16 iters {at16:.3e}")))
}

pub fn crossover() -> Result<(bool, String)> {
    let mut ok = crossover_check(256, 1024, 1)? == Crossover::SoftmaxCheaper
        && crossover_check(4096, 1024, 1)? == Crossover::LinearCheaper
        && softmax_core(256, 1024, 1) == 268_632_064;
    let mut cases = 0;
    for n in (1..=20).map(|i| i * 40) {
        for d in [64, 128, 256, 512, 1024] {
            for h in [1, 2, 4] {
                let (a, b, c) = (n as u64, d as u64, h as u64);
                let soft = softmax_core(a, b, c);
                let lin = vanilla_core(a, b, c, feature_map_cost(Activation::EluPlusOne));
                ok &= (crossover_check(n, d, h)? == Crossover::SoftmaxCheaper) == (soft < lin);
                cases += 1;
            }
        }
    }
    Ok((ok, format!("{cases} grid points")))
}

pub fn flops() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for variant in Variant::ALL {
        for n in [64, 256] {
            for heads in [1, 4] {
                let spec = AttentionSpec::new(variant, 64, heads);
                let analytic = flops_attention(&spec_for_length(&spec, n), n).total() as f64;
                let measured = measured_flops::<f32>(&spec, n, 1)? as f64;
                worst = worst.max((analytic - measured).abs() / measured);
            }
        }
    }
    Ok((worst < 0.05, format!("max relative gap {worst:.2e}")))
}
