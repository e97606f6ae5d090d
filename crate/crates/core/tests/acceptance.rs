//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs the oracle suites, the complexity checks, a wall-clock sweep and the
//! seeded toy pipeline from `configs/toy.cfg`. A criterion that misses its
//! threshold prints FAIL with the measured value; the process still exits 0
//! so the remaining criteria are reported. Errors abort with a nonzero code.
//! Paired logs and tables go to `$CARGO_TARGET_TMPDIR/acceptance/`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use adala_core::attention::{self, explicit, AttentionParams, AttentionSpec, Extras, Variant};
use adala_core::bench::{
    crossover_check, flops_attention, loglog_slope, peak_activation_bytes, records_csv, spec_for_length, sweep,
    Crossover,
};
use adala_core::config::RunConfig;
use adala_core::data::{gen_synthetic, Sample};
use adala_core::model::{load_checkpoint, save_checkpoint, ViTModel};
use adala_core::pipeline::{
    attention_align_eval, attention_align_loss, evaluate, feature_align_loss, stage1_attention_align,
    stage2_feature_align, stage3_sft, train_teacher, Stage2Outcome, TrainLog,
};
use adala_core::tensor::{gradcheck, Activation, Rng, Tensor};
use adala_core::verify::{self, pinv_residual, row_stochastic, GRAD_STEP, GRAD_TOL};
use adala_core::{Error, Result};

const PROBE_SAMPLES: usize = 256;

struct Report {
    fails: usize,
}

impl Report {
    fn line(&mut self, id: u8, name: &str, status: &str, detail: &str) {
        if status != "PASS" {
            self.fails += 1;
        }
        println!("{status} {id:>2} {name}: {detail}");
    }

    fn check(&mut self, id: u8, name: &str, ok: bool, detail: &str) {
        self.line(id, name, if ok { "PASS" } else { "FAIL" }, detail);
    }
}

fn out_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("acceptance output directory");
    dir
}

fn criterion1(r: &mut Report) -> Result<()> {
    let t = Instant::now();
    let (ok, detail) = verify::reordering()?;
    let secs = t.elapsed().as_secs_f64();
    r.check(1, "reordering identity", ok && secs < 10.0, &format!("{detail} in {secs:.2}s"));
    Ok(())
}

fn scalar_attention_loss(t: &[Tensor<f64>], s: &[Tensor<f64>]) -> f64 {
    let mut total = 0.0;
    for (a, b) in t.iter().zip(s) {
        let mut sq = 0.0;
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                sq += (a.at(i, j) - b.at(i, j)).powi(2);
            }
        }
        total += sq / (a.rows() * a.cols()) as f64;
    }
    total
}

fn criterion2(r: &mut Report) -> Result<()> {
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let mut rng = Rng::new(case);
        let (k, n, d) = (1 + rng.below(4), 1 + rng.below(9), 1 + rng.below(9));
        let mut layer = || Tensor::from_fn(&[n, d], |_| 2.0 * rng.normal());
        let t: Vec<Tensor<f64>> = (0..k).map(|_| layer()).collect();
        let s: Vec<Tensor<f64>> = (0..k).map(|_| layer()).collect();
        worst = worst.max((attention_align_loss(&t, &s)? - scalar_attention_loss(&t, &s)).abs());
        for lambda in [1.0, 5.0, 4000.0] {
            let want = lambda * scalar_attention_loss(&t[..1], &s[..1]);
            worst = worst.max((feature_align_loss(&t[0], &s[0], lambda)? - want).abs() / want.max(1.0));
        }
    }
    let zero = Tensor::<f64>::zeros(&[4, 3]);
    let diffs: Vec<Tensor<f64>> = [1.0, 2.0, 0.0].into_iter().map(|c| Tensor::full(&[4, 3], c)).collect();
    let layered = attention_align_loss(&[zero.clone(), zero.clone(), zero.clone()], &diffs)?;
    let lambdas: Vec<f64> = [1.0, 5.0, 4000.0]
        .into_iter()
        .map(|l| feature_align_loss(&zero, &Tensor::ones(&[4, 3]), l))
        .collect::<Result<_>>()?;
    let ok = worst < 1e-6 && layered == 5.0 && lambdas == [1.0, 5.0, 4000.0];
    r.check(
        2,
        "loss fidelity",
        ok,
        &format!("max oracle gap {worst:.2e} over 20 cases; layers {{1,2,0}} -> {layered}; lambda scaling {lambdas:?}"),
    );
    Ok(())
}

fn criterion3(r: &mut Report) -> Result<()> {
    let t = Instant::now();
    let (ok, detail) = verify::gradients()?;
    let mut rng = Rng::new(3);
    let mut draw = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.normal());
    let ln = gradcheck::check(&[draw(&[4, 8]), draw(&[1, 8]), draw(&[1, 8])], GRAD_STEP, |g, v| {
        let y = g.layernorm(v[0], v[1], v[2], 1e-6)?;
        let w = g.constant(Tensor::from_fn(&[4, 8], |i| (i as f64 * 0.37).sin()));
        let p = g.mul(y, w)?;
        g.sum(p)
    })?
    .max_rel_error();
    let mlp = gradcheck::check(&[draw(&[4, 8]), draw(&[8, 16]), draw(&[16, 8])], GRAD_STEP, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.gelu(h)?;
        let y = g.matmul(h, v[2])?;
        let w = g.constant(Tensor::from_fn(&[4, 8], |i| (i as f64 * 0.61).cos()));
        let p = g.mul(y, w)?;
        g.sum(p)
    })?
    .max_rel_error();
    let secs = t.elapsed().as_secs_f64();
    let all = ok && ln < GRAD_TOL && mlp < GRAD_TOL && secs < 120.0;
    r.check(
        3,
        "gradient suite",
        all,
        &format!("{detail} layernorm={ln:.1e} mlp={mlp:.1e} in {secs:.1}s"),
    );
    Ok(())
}

fn performer_estimate(q: &Tensor<f64>, k: &Tensor<f64>, omega: &Tensor<f64>) -> Result<f64> {
    let fq = explicit::performer_feature_map(q, omega)?;
    let fk = explicit::performer_feature_map(k, omega)?;
    Ok(fq.data().iter().zip(fk.data()).map(|(a, b)| a * b).sum())
}

fn criterion4(r: &mut Report) -> Result<()> {
    // cosformer: two-branch form against the explicit reweighted quadratic form
    let mut cos_gap = 0.0f64;
    for (seed, n) in [(0u64, 5usize), (1, 17), (2, 64)] {
        let mut spec = AttentionSpec::new(Variant::Cosformer, 16, 4);
        spec.seed = seed;
        let mut rng = Rng::new(seed);
        let p = AttentionParams::<f32>::init(&spec, &mut rng)?;
        let x = Tensor::<f32>::rand_uniform(&[n, 16], -1.0, 1.0, &mut rng);
        let fast = attention::cosformer_attention(&x, &p, &spec)?;
        let slow = explicit::explicit_attention(&x, &p, &spec)?;
        cos_gap = cos_gap.max(fast.max_abs_diff(&slow)? as f64);
    }

    // performer: one draw of r = 8192 features per seeded pair, norms in [0, 1]
    let (r_feat, d) = (8192, 8);
    let mut perf_worst = 0.0f64;
    for pair in 0..10u64 {
        let mut rng = Rng::new(700 + pair);
        let mut unit_ball = || {
            let v = Tensor::<f64>::randn(&[1, d], 1.0, &mut rng);
            let norm = v.frobenius();
            let radius = rng.uniform();
            v.map(|x| x / norm * radius)
        };
        let (q, k) = (unit_ball(), unit_ball());
        let exact = q.data().iter().zip(k.data()).map(|(a, b)| a * b).sum::<f64>().exp();
        let omega = Tensor::<f64>::randn(&[r_feat, d], 1.0, &mut rng);
        perf_worst = perf_worst.max((performer_estimate(&q, &k, &omega)? / exact - 1.0).abs());
    }

    // nyström pseudo-inverse residual at the default six iterations
    let mut pinv6 = 0.0f64;
    for seed in 0..5 {
        let a = row_stochastic(8, &mut Rng::new(seed));
        pinv6 = pinv6.max(pinv_residual(&a, &attention::iterative_pinv(&a, 6)?)?);
    }

    // nyström with m = N against softmax, default iterations
    let mut ny_gap = 0.0f64;
    for seed in 0..10u64 {
        let n = 8;
        let mut spec = AttentionSpec::new(Variant::Nystrom, 8, 2);
        spec.landmarks = n;
        spec.seed = seed;
        let mut rng = Rng::new(seed);
        let p = AttentionParams::<f64>::init(&spec, &mut rng)?;
        let x = Tensor::<f64>::rand_uniform(&[n, 8], -1.0, 1.0, &mut rng);
        let sm = attention::softmax_attention(&x, &p, &spec.with_variant(Variant::Softmax))?;
        ny_gap = ny_gap.max(attention::nystrom_attention(&x, &p, &spec)?.max_abs_diff(&sm)?);
    }

    // linformer with k = N and identity projections
    let n = 6;
    let mut spec = AttentionSpec::new(Variant::Linformer, 8, 2);
    spec.seq_len_fixed = n;
    spec.proj_rank = n;
    let mut rng = Rng::new(4);
    let mut p = AttentionParams::<f64>::init(&spec, &mut rng)?;
    p.extras = Extras::Linformer {
        e: Tensor::eye(n),
        f: Tensor::eye(n),
    };
    let x = Tensor::<f64>::rand_uniform(&[n, 8], -1.0, 1.0, &mut rng);
    let lin = attention::linformer_attention(&x, &p, &spec)?;
    let mut sm_p = p.clone();
    sm_p.extras = Extras::None;
    let sm = attention::softmax_attention(&x, &sm_p, &spec.with_variant(Variant::Softmax))?;
    let lin_gap = lin.max_abs_diff(&sm)?;

    let parts = [
        (cos_gap < 1e-4, format!("cosformer gap {cos_gap:.2e} (< 1e-4)")),
        (perf_worst < 0.05, format!("performer worst relative error {perf_worst:.3} (< 0.05)")),
        (pinv6 < 1e-3, format!("pinv residual after 6 iterations {pinv6:.2e} (< 1e-3)")),
        (ny_gap < 1e-2, format!("nystrom m=N gap {ny_gap:.2e} (< 1e-2)")),
        (lin_gap < 1e-5, format!("linformer identity gap {lin_gap:.2e} (< 1e-5)")),
    ];
    let ok = parts.iter().all(|(ok, _)| *ok);
    let detail: Vec<String> = parts
        .iter()
        .map(|(ok, s)| format!("{}{s}", if *ok { "" } else { "MISS " }))
        .collect();
    r.check(4, "baseline oracles", ok, &detail.join("; "));
    Ok(())
}

fn criterion5(r: &mut Report) -> Result<()> {
    let soft = flops_attention(&AttentionSpec::new(Variant::Softmax, 1024, 1), 256).core;
    let lin_core = flops_attention(&AttentionSpec::new(Variant::VanillaLinear, 1024, 1), 256).core;
    // the vanilla core minus its lower-order query-scaling, normalizer and feature-map terms
    let (n, d) = (256u64, 1024u64);
    let lin_dominant = lin_core - 6 * n * d - 2 * n * d;
    let small = crossover_check(256, 1024, 1)?;
    let large = crossover_check(4096, 1024, 1)?;
    let ok = small == Crossover::SoftmaxCheaper
        && large == Crossover::LinearCheaper
        && soft == 268_632_064
        && lin_dominant == 1_073_741_824;
    r.check(
        5,
        "complexity crossover",
        ok,
        &format!("N=256 {small}, N=4096 {large}; softmax core {soft}, linear dominant term {lin_dominant}"),
    );
    Ok(())
}

fn criterion6(r: &mut Report, cfg: &RunConfig, dir: &Path) -> Result<()> {
    let ns = [512, 1024, 2048, 4096];
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let mut csv = String::new();
    let mut slopes = Vec::new();
    for variant in [Variant::Softmax, Variant::VanillaLinear] {
        let mut base = cfg.bench_spec(variant);
        base.d_model = 64;
        base.heads = 1;
        let recs = sweep(&base, &ns, cfg.bench.reps.max(5), cfg.bench.seed)?;
        let ys: Vec<f64> = recs.iter().map(|x| x.wall_seconds).collect();
        slopes.push(loglog_slope(&xs, &ys));
        csv.push_str(&records_csv(&recs));
    }
    std::fs::write(dir.join("bench.csv"), csv).map_err(|e| Error::io(dir, e))?;
    let soft = AttentionSpec::new(Variant::Softmax, 64, 1);
    let lin = AttentionSpec::new(Variant::VanillaLinear, 64, 1);
    let ratio = |spec: &AttentionSpec| {
        let s = |n| peak_activation_bytes(&spec_for_length(spec, n), n).state as f64;
        s(4096) / s(2048)
    };
    let (rs, rl) = (ratio(&soft), ratio(&lin));
    let ok = (1.6..=2.4).contains(&slopes[0]) && (0.7..=1.3).contains(&slopes[1]) && rs == 4.0 && rl <= 1.05;
    r.check(
        6,
        "scaling measurement",
        ok,
        &format!(
            "wall exponent softmax {:.2} (1.6..2.4), vanilla {:.2} (0.7..1.3); state bytes N->2N softmax {rs:.2}, linear {rl:.2}",
            slopes[0], slopes[1]
        ),
    );
    Ok(())
}

/// Validation loss of the model a stage-2 run returns.
fn stage2_final(out: &Stage2Outcome, patience: usize) -> f64 {
    if patience > 0 {
        out.best_val
    } else {
        out.log.epochs.last().and_then(|e| e.val_loss).unwrap_or(out.initial_val)
    }
}

fn sci(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn val_losses(log: &TrainLog) -> Vec<f64> {
    log.epochs.iter().filter_map(|e| e.val_loss).collect()
}

struct Toy {
    cfg: RunConfig,
    train: Vec<Sample>,
    teacher: ViTModel<f32>,
    stage3: ViTModel<f32>,
    stage1_ratio: f64,
}

fn criterion7_8(r: &mut Report, cfg: RunConfig, dir: &Path) -> Result<Toy> {
    let start = Instant::now();
    let train = gen_synthetic(&cfg.train_spec())?;
    let test = gen_synthetic(&cfg.test_spec())?;
    let probe = &train[..PROBE_SAMPLES.min(train.len())];
    let eval_bs = cfg.data.eval_batch_size;

    let init = ViTModel::<f32>::init(cfg.teacher_config(), cfg.model.seed)?;
    let (teacher, _) = train_teacher(&init, &train, &cfg.teacher)?;
    let teacher_acc = evaluate(&teacher, &test, eval_bs)?;

    let fresh = teacher.linearize(&cfg.student_spec())?;
    let reduction = cfg.stage1.layer_reduction;
    let l_att0 = attention_align_eval(&teacher, &fresh, probe, eval_bs, reduction)?;
    let (s1, _) = stage1_attention_align(&teacher, &fresh, &train, &cfg.stage1)?;
    let l_att1 = attention_align_eval(&teacher, &s1, probe, eval_bs, reduction)?;

    let with = stage2_feature_align(&teacher, &s1, &train, &cfg.stage2)?;
    let patience = cfg.stage2.early_stop_patience;
    let fa_ratio = stage2_final(&with, patience) / with.initial_val;
    let (s3, _) = stage3_sft(&with.model, &train, &cfg.stage3)?;
    let student_acc = evaluate(&s3, &test, eval_bs)?;
    let secs = start.elapsed().as_secs_f64();

    let att_ratio = l_att1 / l_att0;
    let ok = teacher_acc >= 0.95
        && att_ratio <= 0.4
        && fa_ratio <= 0.5
        && student_acc >= teacher_acc - 0.05
        && secs < 1800.0;
    r.check(
        7,
        "toy end-to-end",
        ok,
        &format!(
            "teacher acc {:.1}% (>= 95); L_att {l_att0:.4e} -> {l_att1:.4e} ratio {att_ratio:.3} (<= 0.4); \
             L_fa {:.4e} -> {:.4e} ratio {fa_ratio:.3} (<= 0.5); student acc {:.1}% (>= teacher - 5); {secs:.0}s",
            100.0 * teacher_acc,
            with.initial_val,
            stage2_final(&with, patience),
            100.0 * student_acc,
        ),
    );

    // paired stage-2 arms: stage-1 initialized against freshly linearized
    let without = stage2_feature_align(&teacher, &fresh, &train, &cfg.stage2)?;
    let (a, b) = (val_losses(&with.log), val_losses(&without.log));
    let mut csv = String::from("epoch,with_stage1,without_stage1\n");
    writeln!(csv, "0,{},{}", with.initial_val, without.initial_val).expect("string write");
    for e in 0..a.len().max(b.len()) {
        let cell = |v: &[f64]| v.get(e).map(|x| x.to_string()).unwrap_or_default();
        writeln!(csv, "{},{},{}", e + 1, cell(&a), cell(&b)).expect("string write");
    }
    let path = dir.join("stage2_paired.csv");
    std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    let common = a.len().min(b.len());
    let directional = (1..common).all(|e| a[e] <= b[e]);
    let summary = format!(
        "L_fa per epoch with stage 1 {}, without {}; {} compared epochs after the first; log {}",
        sci(&a),
        sci(&b),
        common.saturating_sub(1),
        path.display()
    );
    r.line(8, "stage-1 init speeds stage 2", if directional { "PASS" } else { "EXPECTATION_MISS" }, &summary);

    Ok(Toy {
        cfg,
        train,
        teacher,
        stage3: s3,
        stage1_ratio: att_ratio,
    })
}

fn criterion9(r: &mut Report, toy: &Toy, dir: &Path) -> Result<()> {
    let probe = &toy.train[..PROBE_SAMPLES.min(toy.train.len())];
    let bs = toy.cfg.data.eval_batch_size;
    let reduction = toy.cfg.stage1.layer_reduction;
    let mut csv = String::from("feature_map,initial_loss,final_loss,ratio\n");
    let mut ok = true;
    let mut parts = Vec::new();
    for map in [Activation::EluPlusOne, Activation::Relu, Activation::Softplus, Activation::Exp] {
        let spec = AttentionSpec {
            feature_map: map,
            ..toy.cfg.student_spec_for(Variant::VanillaLinear)
        };
        let student = toy.teacher.linearize(&spec)?;
        let before = attention_align_eval(&toy.teacher, &student, probe, bs, reduction)?;
        let ratio_of = |after: f64| after / before;
        let (after, ratio) = if map == Activation::EluPlusOne && toy.cfg.model.feature_map == map {
            (before * toy.stage1_ratio, toy.stage1_ratio)
        } else {
            let (trained, _) = stage1_attention_align(&toy.teacher, &student, &toy.train, &toy.cfg.stage1)?;
            let after = attention_align_eval(&toy.teacher, &trained, probe, bs, reduction)?;
            (after, ratio_of(after))
        };
        writeln!(csv, "{},{before},{after},{ratio}", map.name()).expect("string write");
        ok &= ratio <= 0.75;
        parts.push(format!("{} {ratio:.3}", map.name()));
    }
    let path = dir.join("activations.csv");
    std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    r.check(
        9,
        "feature map comparison",
        ok,
        &format!("final/initial L_att {} (each <= 0.75); table {}", parts.join(", "), path.display()),
    );
    Ok(())
}

fn criterion10(r: &mut Report, toy: &Toy, dir: &Path) -> Result<()> {
    let subset = &toy.train[..PROBE_SAMPLES.min(toy.train.len())];
    let cfg = adala_core::pipeline::StageConfig {
        epochs: 1,
        ..toy.cfg.stage1.clone()
    };
    let student = toy.teacher.linearize(&toy.cfg.student_spec())?;
    let (_, a) = stage1_attention_align(&toy.teacher, &student, subset, &cfg)?;
    let (_, b) = stage1_attention_align(&toy.teacher, &student, subset, &cfg)?;
    let gap = a
        .steps
        .iter()
        .zip(&b.steps)
        .map(|(x, y)| (x.loss - y.loss).abs())
        .fold(0.0f64, f64::max);
    let same_len = a.steps.len() == b.steps.len() && !a.steps.is_empty();

    let (p1, p2) = (dir.join("stage3.ckpt"), dir.join("stage3_again.ckpt"));
    save_checkpoint(&toy.stage3, &p1)?;
    let back: ViTModel<f32> = load_checkpoint(&p1)?;
    save_checkpoint(&back, &p2)?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let identical = read(&p1)? == read(&p2)?;
    let mut bytes = read(&p1)?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let corrupt = dir.join("stage3_corrupt.ckpt");
    std::fs::write(&corrupt, &bytes).map_err(|e| Error::io(&corrupt, e))?;
    let checksum = matches!(load_checkpoint::<f32>(&corrupt), Err(Error::Checksum { .. }));

    r.check(
        10,
        "determinism and persistence",
        same_len && gap <= 1e-7 && identical && checksum,
        &format!(
            "{} repeated step losses max gap {gap:.1e}; save-load-save identical {identical}; corrupted byte gives checksum error {checksum}",
            a.steps.len()
        ),
    );
    Ok(())
}

fn run() -> Result<usize> {
    let dir = out_dir();
    let cfg_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.cfg");
    let cfg = RunConfig::load(&cfg_path)?;
    let mut r = Report { fails: 0 };
    criterion1(&mut r)?;
    criterion2(&mut r)?;
    criterion3(&mut r)?;
    criterion4(&mut r)?;
    criterion5(&mut r)?;
    criterion6(&mut r, &cfg, &dir)?;
    let toy = criterion7_8(&mut r, cfg, &dir)?;
    criterion9(&mut r, &toy, &dir)?;
    criterion10(&mut r, &toy, &dir)?;
    Ok(r.fails)
}

fn main() {
    match run() {
        Ok(fails) => println!("acceptance: {} of 10 criteria not met", fails),
        Err(e) => {
            eprintln!("acceptance aborted: {e}");
            std::process::exit(1);
        }
    }
}
