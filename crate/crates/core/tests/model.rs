use adala_core::attention::{attend, AttentionParams, AttentionSpec, Extras, Variant};
use adala_core::model::{load_checkpoint, save_checkpoint, ForwardMode, ViTConfig, ViTModel};
use adala_core::tensor::{Activation, Graph, Rng, Tensor};
use adala_core::Error;
use proptest::prelude::*;

fn tiny() -> ViTConfig {
    ViTConfig::new(8, 4, 2, 8, 2, 3)
}

fn student_spec(variant: Variant) -> AttentionSpec {
    AttentionSpec {
        landmarks: 3,
        proj_rank: 3,
        rand_features: 8,
        seed: 9,
        ..AttentionSpec::new(variant, 8, 2)
    }
}

fn batch(b: usize, s: usize, seed: u64) -> Tensor<f32> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(&[b, 3, s, s], |_| rng.uniform() as f32)
}

#[test]
fn patch_one_covers_columns_four_to_seven() {
    let config = ViTConfig {
        use_cls_token: false,
        ..ViTConfig::new(32, 4, 1, 8, 2, 4)
    };
    assert_eq!(config.seq_len(), 64);
    let model = ViTModel::<f64>::init(config, 0).unwrap();
    // pixel value encodes (channel, row, column)
    let image = Tensor::from_fn(&[3, 32, 32], |i| i as f64);
    let patches = model.patchify(&image).unwrap();
    assert_eq!(patches.shape(), [64, 48]);
    let expected: Vec<f64> = (0..3)
        .flat_map(|ch| (0..4).flat_map(move |y| (4..8).map(move |x| (ch * 1024 + y * 32 + x) as f64)))
        .collect();
    assert_eq!(patches.row(1), expected.as_slice());
}

#[test]
fn single_patch_with_cls_has_two_tokens() {
    let config = ViTConfig::new(4, 4, 1, 8, 2, 2);
    assert_eq!(config.seq_len(), 2);
    let model = ViTModel::<f32>::init(config, 0).unwrap();
    let out = model.forward(&batch(3, 4, 1), ForwardMode::Features).unwrap();
    assert_eq!(out.features.shape(), [3, 2, 8]);
}

#[test]
fn zero_image_and_positions_give_zero_patch_tokens() {
    let mut model = ViTModel::<f64>::init(tiny(), 1).unwrap();
    model.pos_emb = Tensor::zeros(model.pos_emb.shape());
    let mut g = Graph::new();
    let vars = model.bind(&mut g, |_| false);
    let patches = model.patchify(&Tensor::zeros(&[2, 3, 8, 8])).unwrap();
    let tokens = model.embed_graph(&mut g, &vars, &patches, 2).unwrap();
    let t = g.value(tokens);
    assert_eq!(t.shape(), [10, 8]);
    for img in 0..2 {
        assert_eq!(t.row(img * 5), model.cls.data(), "CLS token leads each image");
        for p in 1..5 {
            assert!(t.row(img * 5 + p).iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn image_size_mismatch_is_rejected() {
    let model = ViTModel::<f32>::init(tiny(), 0).unwrap();
    assert!(matches!(model.forward(&batch(1, 12, 0), ForwardMode::Features), Err(Error::Shape { .. })));
}

#[test]
fn forward_modes() {
    let mut model = ViTModel::<f32>::init(tiny(), 3).unwrap();
    let x = batch(4, 8, 2);
    let out = model.forward(&x, ForwardMode::Logits).unwrap();
    assert_eq!(out.logits.unwrap().shape(), [4, 3]);
    let taps = model.forward(&x, ForwardMode::Taps).unwrap();
    assert_eq!(taps.taps.len(), 2);
    for (xi, oi) in &taps.taps {
        assert_eq!(xi.shape(), [4, 5, 8]);
        assert_eq!(oi.shape(), [4, 5, 8]);
    }
    let again = model.forward(&x, ForwardMode::Features).unwrap();
    assert_eq!(again.features, taps.features);

    model.head = None;
    assert!(matches!(model.forward(&x, ForwardMode::Logits), Err(Error::Config(_))));
}

#[test]
fn mean_pooling_without_cls() {
    let config = ViTConfig {
        use_cls_token: false,
        ..tiny()
    };
    let model = ViTModel::<f64>::init(config, 3).unwrap();
    let x = batch(2, 8, 5).cast::<f64>();
    let out = model.forward(&x, ForwardMode::Logits).unwrap();
    let feats = model.forward(&x, ForwardMode::Features).unwrap().features;
    let head = model.head.as_ref().unwrap();
    for b in 0..2 {
        for c in 0..3 {
            let mut want = 0.0;
            for d in 0..8 {
                let mean: f64 = (0..4).map(|n| feats.data()[(b * 4 + n) * 8 + d]).sum::<f64>() / 4.0;
                want += mean * head.at(d, c);
            }
            assert!((out.logits.as_ref().unwrap().at(b, c) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn linearize_copies_projections_and_swaps_the_kernel() {
    let teacher = ViTModel::<f32>::init(tiny(), 4).unwrap();
    for variant in Variant::ALL.into_iter().filter(|&v| v != Variant::Softmax) {
        let student = teacher.linearize(&student_spec(variant)).unwrap();
        assert_eq!(student.config.attention.variant, variant);
        assert_eq!(student.patch_proj, teacher.patch_proj);
        assert_eq!(student.head, teacher.head);
        for (s, t) in student.blocks.iter().zip(&teacher.blocks) {
            assert_eq!(s.attn.w_q, t.attn.w_q);
            assert_eq!(s.attn.w_k, t.attn.w_k);
            assert_eq!(s.attn.w_v, t.attn.w_v);
            assert_eq!(s.attn.w_o, t.attn.w_o);
            assert_eq!(s.mlp_w1, t.mlp_w1);
            assert_eq!(s.ln1_gamma, t.ln1_gamma);
        }
        let mut config = student.config.clone();
        config.attention = teacher.config.attention.clone();
        assert_eq!(config, teacher.config, "{variant}: only the attention spec changes");
    }
    let err = teacher.linearize(&AttentionSpec::new(Variant::Softmax, 8, 2)).unwrap_err();
    assert!(matches!(err, Error::Param(_)));
    let student = teacher.linearize(&student_spec(Variant::VanillaLinear)).unwrap();
    assert!(matches!(student.linearize(&student_spec(Variant::Cosformer)), Err(Error::Config(_))));
}

/// Exp feature map on shrinking projections: both kernels tend to uniform
/// attention, and their gap closes at first order in the scale.
#[test]
fn exp_map_student_approaches_teacher_on_tiny_logits() {
    let soft = AttentionSpec::new(Variant::Softmax, 4, 1);
    let lin = AttentionSpec {
        feature_map: Activation::Exp,
        ..AttentionSpec::new(Variant::VanillaLinear, 4, 1)
    };
    let mut rng = Rng::new(21);
    let base = AttentionParams::<f64>::init(&soft, &mut rng).unwrap();
    let x = Tensor::from_fn(&[2, 4], |_| rng.normal());
    let gap = |eps: f64| {
        let mut p = base.clone();
        p.w_q = p.w_q.map(|v| v * eps);
        p.w_k = p.w_k.map(|v| v * eps);
        let t = attend(&x, &p, &soft).unwrap();
        let s = attend(&x, &p, &lin).unwrap();
        t.max_abs_diff(&s).unwrap()
    };
    let gaps: Vec<f64> = [1e-1, 1e-2, 1e-3].into_iter().map(gap).collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    for w in gaps.windows(2) {
        let ratio = w[1] / w[0];
        assert!((0.05..0.2).contains(&ratio), "gap should shrink tenfold per decade: {gaps:?}");
    }
}

#[test]
fn zero_query_key_weights_make_vanilla_match_softmax() {
    let mut teacher = ViTModel::<f64>::init(tiny(), 6).unwrap();
    for b in &mut teacher.blocks {
        b.attn.w_q = Tensor::zeros(b.attn.w_q.shape());
        b.attn.w_k = Tensor::zeros(b.attn.w_k.shape());
    }
    let student = teacher.linearize(&student_spec(Variant::VanillaLinear)).unwrap();
    let x = batch(2, 8, 7).cast::<f64>();
    let t = teacher.forward(&x, ForwardMode::Features).unwrap().features;
    let s = student.forward(&x, ForwardMode::Features).unwrap().features;
    assert!(t.max_abs_diff(&s).unwrap() < 1e-6);
}

fn every_model() -> Vec<ViTModel<f32>> {
    let teacher = ViTModel::<f32>::init(tiny(), 8).unwrap();
    let mut out = vec![teacher.clone()];
    for variant in Variant::ALL.into_iter().filter(|&v| v != Variant::Softmax) {
        out.push(teacher.linearize(&student_spec(variant)).unwrap());
    }
    let mut headless = teacher;
    headless.head = None;
    out.push(headless);
    out
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let x = batch(2, 8, 3);
    for (i, model) in every_model().into_iter().enumerate() {
        let a = dir.path().join(format!("{i}a.ckpt"));
        let b = dir.path().join(format!("{i}b.ckpt"));
        save_checkpoint(&model, &a).unwrap();
        let back: ViTModel<f32> = load_checkpoint(&a).unwrap();
        assert_eq!(back, model);
        save_checkpoint(&back, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let f0 = model.forward(&x, ForwardMode::Features).unwrap().features;
        let f1 = back.forward(&x, ForwardMode::Features).unwrap().features;
        assert_eq!(f0, f1);
        if let Extras::Performer { omega } = &model.blocks[0].attn.extras {
            let Extras::Performer { omega: back_omega } = &back.blocks[0].attn.extras else {
                panic!("performer extras lost");
            };
            assert_eq!(omega, back_omega);
        }
    }
}

#[test]
fn equal_models_serialize_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    save_checkpoint(&ViTModel::<f32>::init(tiny(), 11).unwrap(), &a).unwrap();
    save_checkpoint(&ViTModel::<f32>::init(tiny(), 11).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn corrupted_checkpoints_are_rejected_with_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&ViTModel::<f32>::init(tiny(), 12).unwrap(), &path).unwrap();
    let good = std::fs::read(&path).unwrap();
    let load = |bytes: &[u8]| {
        std::fs::write(&path, bytes).unwrap();
        load_checkpoint::<f32>(&path).unwrap_err()
    };

    let mut flipped = good.clone();
    let mid = good.len() / 2;
    flipped[mid] ^= 1;
    assert!(matches!(load(&flipped), Error::Checksum { .. }));

    assert!(matches!(load(&good[..good.len() - 3]), Error::Truncated { .. }));

    let mut version = good.clone();
    version[4] = 7;
    assert!(matches!(load(&version), Error::UnknownVersion { found: 7, .. }));

    let mut magic = good.clone();
    magic[..4].copy_from_slice(b"NOPE");
    assert!(matches!(load(&magic), Error::BadMagic { .. }));

    let missing = load_checkpoint::<f32>(&dir.path().join("absent.ckpt")).unwrap_err();
    assert!(matches!(missing, Error::Missing(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn features_are_batch_by_tokens_by_width(
        grid in 1usize..4,
        patch in 1usize..4,
        cls in any::<bool>(),
        b in 1usize..4,
        seed in 0u64..100,
    ) {
        let config = ViTConfig { use_cls_token: cls, ..ViTConfig::new(grid * patch, patch, 1, 8, 2, 2) };
        let n = config.seq_len();
        let model = ViTModel::<f32>::init(config, seed).unwrap();
        let out = model.forward(&batch(b, grid * patch, seed), ForwardMode::Features).unwrap();
        prop_assert_eq!(out.features.shape(), &[b, n, 8][..]);
        prop_assert!(out.features.is_finite());
    }
}
