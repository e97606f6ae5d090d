use adala_core::attention::{iterative_pinv, pinv_graph, Variant};
use adala_core::pipeline::{attention_align_graph, feature_align_graph, LayerReduction};
use adala_core::tensor::{gradcheck, Activation, Graph, Rng, Tensor, Var};
use adala_core::verify::{gradcheck_attention, gradcheck_model, gradient_specs, row_stochastic, GRAD_STEP, GRAD_TOL};
use adala_core::Result;

const TRIALS: u64 = 20;

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| 0.5 + rng.uniform())
}

/// `Σ out ⊙ W` for a fixed random `W`, so no output direction is ignored.
fn weighted(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = normal(g.shape(out), &mut Rng::new(seed ^ 0xabcd));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// Gradcheck `op` on `TRIALS` random draws of its inputs.
fn check_op(
    name: &str,
    make: impl Fn(&mut Rng) -> Vec<Tensor<f64>>,
    op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) {
    for trial in 0..TRIALS {
        let params = make(&mut Rng::new(1000 + trial));
        let report = gradcheck::check(&params, GRAD_STEP, |g, v| {
            let out = op(g, v)?;
            weighted(g, out, trial)
        })
        .unwrap();
        let e = report.max_rel_error();
        assert!(e < GRAD_TOL, "{name} trial {trial}: relative error {e:.3e}");
    }
}

#[test]
fn elementwise_and_matrix_ops() {
    check_op("matmul", |r| vec![normal(&[3, 4], r), normal(&[4, 2], r)], |g, v| g.matmul(v[0], v[1]));
    check_op("transpose", |r| vec![normal(&[3, 5], r)], |g, v| g.transpose(v[0]));
    check_op("add", |r| vec![normal(&[3, 4], r), normal(&[3, 4], r)], |g, v| g.add(v[0], v[1]));
    check_op("sub", |r| vec![normal(&[3, 4], r), normal(&[3, 4], r)], |g, v| g.sub(v[0], v[1]));
    check_op("mul", |r| vec![normal(&[3, 4], r), normal(&[3, 4], r)], |g, v| g.mul(v[0], v[1]));
    check_op("add_row", |r| vec![normal(&[3, 4], r), normal(&[1, 4], r)], |g, v| g.add_row(v[0], v[1]));
    check_op("add_col", |r| vec![normal(&[3, 4], r), normal(&[3, 1], r)], |g, v| g.add_col(v[0], v[1]));
    check_op("mul_col", |r| vec![normal(&[3, 4], r), normal(&[3, 1], r)], |g, v| g.mul_col(v[0], v[1]));
    check_op(
        "div_col",
        |r| vec![normal(&[3, 4], r), positive(&[3, 1], r)],
        |g, v| g.div_col(v[0], v[1], 1e-6),
    );
    check_op("scale", |r| vec![normal(&[2, 3], r)], |g, v| g.scale(v[0], -1.7));
    check_op("identity_minus", |r| vec![normal(&[4, 4], r)], |g, v| g.identity_minus(v[0], 7.0));
    check_op("row_sq_norm", |r| vec![normal(&[3, 5], r)], |g, v| g.row_sq_norm(v[0]));
    check_op("mean_rows", |r| vec![normal(&[4, 3], r)], |g, v| g.mean_rows(v[0]));
    check_op("sum", |r| vec![normal(&[2, 3], r)], |g, v| g.sum(v[0]));
}

#[test]
fn nonlinear_ops() {
    for kind in [Activation::EluPlusOne, Activation::Relu, Activation::Softplus, Activation::Exp] {
        check_op(kind.name(), |r| vec![normal(&[3, 4], r)], |g, v| g.act(kind, v[0]));
    }
    check_op("gelu", |r| vec![normal(&[3, 4], r)], |g, v| g.gelu(v[0]));
    check_op("softmax_rows", |r| vec![normal(&[3, 5], r)], |g, v| g.softmax_rows(v[0]));
    check_op(
        "layernorm",
        |r| vec![normal(&[3, 6], r), normal(&[1, 6], r), normal(&[1, 6], r)],
        |g, v| g.layernorm(v[0], v[1], v[2], 1e-6),
    );
}

#[test]
fn structural_ops() {
    check_op("slice_cols", |r| vec![normal(&[3, 6], r)], |g, v| g.slice_cols(v[0], 2, 3));
    check_op("slice_rows", |r| vec![normal(&[5, 3], r)], |g, v| g.slice_rows(v[0], 1, 3));
    check_op(
        "concat_cols",
        |r| vec![normal(&[3, 2], r), normal(&[3, 4], r)],
        |g, v| g.concat_cols(&[v[0], v[1]]),
    );
    check_op(
        "concat_rows",
        |r| vec![normal(&[2, 3], r), normal(&[4, 3], r)],
        |g, v| g.concat_rows(&[v[0], v[1]]),
    );
}

#[test]
fn losses() {
    check_op("mse", |r| vec![normal(&[4, 3], r), normal(&[4, 3], r)], |g, v| g.mse(v[0], v[1], 5.0));
    check_op(
        "attention_align_sum",
        |r| (0..6).map(|_| normal(&[4, 3], r)).collect(),
        |g, v| attention_align_graph(g, &v[..3], &v[3..], LayerReduction::Sum),
    );
    check_op(
        "attention_align_mean",
        |r| (0..4).map(|_| normal(&[4, 3], r)).collect(),
        |g, v| attention_align_graph(g, &v[..2], &v[2..], LayerReduction::Mean),
    );
    check_op(
        "feature_align",
        |r| vec![normal(&[5, 4], r), normal(&[5, 4], r)],
        |g, v| feature_align_graph(g, v[0], v[1], 4000.0),
    );
    for trial in 0..TRIALS {
        let mut rng = Rng::new(trial);
        let labels: Vec<usize> = (0..4).map(|_| rng.below(3)).collect();
        let logits = normal(&[4, 3], &mut rng);
        let e = gradcheck::check(&[logits], GRAD_STEP, |g, v| g.cross_entropy(v[0], &labels))
            .unwrap()
            .max_rel_error();
        assert!(e < GRAD_TOL, "cross_entropy trial {trial}: {e:.3e}");
    }
}

#[test]
fn pseudo_inverse() {
    // row-stochastic inputs tie every row sum, so the max-norm scale has a
    // kink there; generic positive matrices keep the maxima unique
    check_op("pinv_init", |r| vec![positive(&[4, 4], r)], |g, v| g.pinv_init(v[0]));
    check_op("pinv_graph", |r| vec![positive(&[4, 4], r)], |g, v| pinv_graph(g, v[0], 3));
    // the graph version is the same computation as the tensor version
    let a = row_stochastic(5, &mut Rng::new(3));
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let z = pinv_graph(&mut g, av, 6).unwrap();
    assert!(g.value(z).max_abs_diff(&iterative_pinv(&a, 6).unwrap()).unwrap() < 1e-14);
}

#[test]
fn every_attention_variant() {
    for spec in gradient_specs(6) {
        for seed in 0..TRIALS {
            let e = gradcheck_attention(&spec, 6, seed).unwrap();
            assert!(e < GRAD_TOL, "{} seed {seed}: {e:.3e}", spec.variant);
        }
    }
}

/// Patch embedding, positional and CLS embeddings, layernorms, MLP,
/// attention and head, all through one cross-entropy loss.
#[test]
fn full_model_through_cross_entropy() {
    for variant in Variant::ALL {
        let e = gradcheck_model(variant).unwrap();
        assert!(e < GRAD_TOL, "{variant}: relative error {e:.3e}");
    }
}
