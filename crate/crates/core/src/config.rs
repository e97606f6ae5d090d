//! Flat `key=value` run configuration.
//!
//! One key per line, `#` starts a comment. Keys are namespaced `data.*`,
//! `model.*`, `teacher.*`, `stage1.*`, `stage2.*`, `stage3.*` and `bench.*`;
//! unknown or repeated keys are rejected. [`RunConfig::to_text`] writes the
//! fully resolved form, which parses back to the same value.

use std::path::Path;
use std::str::FromStr;

use crate::attention::{AttentionSpec, Variant};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::ViTConfig;
use crate::pipeline::StageConfig;
use crate::tensor::Activation;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_seed: u64,
    pub test_seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub noise_std: f64,
    pub frequency: f64,
    pub eval_batch_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub use_cls_token: bool,
    pub seed: u64,
    /// Attention used by the linearized student.
    pub student: Variant,
    pub feature_map: Activation,
    pub landmarks: usize,
    pub proj_rank: usize,
    pub rand_features: usize,
    pub pinv_iters: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    pub lengths: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub reps: usize,
    pub seed: u64,
    /// Test images rendered by the PCA visualization.
    pub pca_images: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub teacher: StageConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig {
                train_seed: 42,
                test_seed: 4242,
                train_samples: 2048,
                test_samples: 512,
                num_classes: 4,
                image_size: 32,
                noise_std: 0.05,
                frequency: 4.0,
                eval_batch_size: 64,
            },
            model: ModelConfig {
                patch_size: 4,
                depth: 4,
                d_model: 64,
                heads: 4,
                mlp_ratio: 4,
                use_cls_token: true,
                seed: 42,
                student: Variant::VanillaLinear,
                feature_map: Activation::EluPlusOne,
                landmarks: crate::attention::DEFAULT_LANDMARKS,
                proj_rank: crate::attention::DEFAULT_PROJ_RANK,
                rand_features: crate::attention::DEFAULT_RAND_FEATURES,
                pinv_iters: crate::attention::DEFAULT_PINV_ITERS,
            },
            teacher: StageConfig {
                seed: 42,
                ..StageConfig::teacher()
            },
            stage1: StageConfig {
                seed: 42,
                ..StageConfig::stage1()
            },
            stage2: StageConfig {
                seed: 42,
                ..StageConfig::stage2()
            },
            stage3: StageConfig {
                seed: 42,
                ..StageConfig::stage3()
            },
            bench: BenchConfig {
                variants: vec![Variant::Softmax, Variant::VanillaLinear],
                lengths: vec![512, 1024, 2048, 4096],
                d_model: 64,
                heads: 1,
                reps: 5,
                seed: 42,
                pca_images: 4,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| v.trim())
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn set_stage(s: &mut StageConfig, key: &str, field: &str, v: &str) -> Result<bool> {
    match field {
        "epochs" => s.epochs = parse(key, v)?,
        "batch_size" => s.batch_size = parse(key, v)?,
        "lr" => s.lr = parse(key, v)?,
        "weight_decay" => s.weight_decay = parse(key, v)?,
        "schedule" => s.schedule = v.parse()?,
        "poly_power" => s.poly_power = parse(key, v)?,
        "lambda" => s.lambda = parse(key, v)?,
        "backbone_lr_ratio" => s.backbone_lr_ratio = parse(key, v)?,
        "seed" => s.seed = parse(key, v)?,
        "early_stop_patience" => s.early_stop_patience = parse(key, v)?,
        "val_fraction" => s.val_fraction = parse(key, v)?,
        "train_w_o" => s.train_w_o = parse(key, v)?,
        "hedgehog_maps_only" => s.hedgehog_maps_only = parse(key, v)?,
        "layer_reduction" => s.layer_reduction = v.parse()?,
        "fresh_head" => s.fresh_head = parse(key, v)?,
        "crop_pad" => s.crop_pad = parse(key, v)?,
        "jitter" => s.jitter = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn stage_entries(prefix: &str, s: &StageConfig) -> Vec<(String, String)> {
    let pairs = [
        ("epochs", s.epochs.to_string()),
        ("batch_size", s.batch_size.to_string()),
        ("lr", s.lr.to_string()),
        ("weight_decay", s.weight_decay.to_string()),
        ("schedule", s.schedule.to_string()),
        ("poly_power", s.poly_power.to_string()),
        ("lambda", s.lambda.to_string()),
        ("backbone_lr_ratio", s.backbone_lr_ratio.to_string()),
        ("seed", s.seed.to_string()),
        ("early_stop_patience", s.early_stop_patience.to_string()),
        ("val_fraction", s.val_fraction.to_string()),
        ("train_w_o", s.train_w_o.to_string()),
        ("hedgehog_maps_only", s.hedgehog_maps_only.to_string()),
        ("layer_reduction", s.layer_reduction.to_string()),
        ("fresh_head", s.fresh_head.to_string()),
        ("crop_pad", s.crop_pad.to_string()),
        ("jitter", s.jitter.to_string()),
    ];
    pairs.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)).collect()
}

impl RunConfig {
    /// Parse config text on top of the defaults, then validate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key {k} given twice", i + 1)));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown key {key}"));
        let (ns, field) = key.split_once('.').ok_or_else(unknown)?;
        let (d, m, b) = (&mut self.data, &mut self.model, &mut self.bench);
        match (ns, field) {
            ("data", "train_seed") => d.train_seed = parse(key, v)?,
            ("data", "test_seed") => d.test_seed = parse(key, v)?,
            ("data", "train_samples") => d.train_samples = parse(key, v)?,
            ("data", "test_samples") => d.test_samples = parse(key, v)?,
            ("data", "num_classes") => d.num_classes = parse(key, v)?,
            ("data", "image_size") => d.image_size = parse(key, v)?,
            ("data", "noise_std") => d.noise_std = parse(key, v)?,
            ("data", "frequency") => d.frequency = parse(key, v)?,
            ("data", "eval_batch_size") => d.eval_batch_size = parse(key, v)?,
            ("model", "patch_size") => m.patch_size = parse(key, v)?,
            ("model", "depth") => m.depth = parse(key, v)?,
            ("model", "d_model") => m.d_model = parse(key, v)?,
            ("model", "heads") => m.heads = parse(key, v)?,
            ("model", "mlp_ratio") => m.mlp_ratio = parse(key, v)?,
            ("model", "use_cls_token") => m.use_cls_token = parse(key, v)?,
            ("model", "seed") => m.seed = parse(key, v)?,
            ("model", "student") => m.student = v.parse()?,
            ("model", "feature_map") => m.feature_map = v.parse()?,
            ("model", "landmarks") => m.landmarks = parse(key, v)?,
            ("model", "proj_rank") => m.proj_rank = parse(key, v)?,
            ("model", "rand_features") => m.rand_features = parse(key, v)?,
            ("model", "pinv_iters") => m.pinv_iters = parse(key, v)?,
            ("bench", "variants") => b.variants = parse_list(key, v)?,
            ("bench", "lengths") => b.lengths = parse_list(key, v)?,
            ("bench", "d_model") => b.d_model = parse(key, v)?,
            ("bench", "heads") => b.heads = parse(key, v)?,
            ("bench", "reps") => b.reps = parse(key, v)?,
            ("bench", "seed") => b.seed = parse(key, v)?,
            ("bench", "pca_images") => b.pca_images = parse(key, v)?,
            ("teacher", f) => {
                if !set_stage(&mut self.teacher, key, f, v)? {
                    return Err(unknown());
                }
            }
            ("stage1", f) => {
                if !set_stage(&mut self.stage1, key, f, v)? {
                    return Err(unknown());
                }
            }
            ("stage2", f) => {
                if !set_stage(&mut self.stage2, key, f, v)? {
                    return Err(unknown());
                }
            }
            ("stage3", f) => {
                if !set_stage(&mut self.stage3, key, f, v)? {
                    return Err(unknown());
                }
            }
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Every key with its resolved value, in schema order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let (d, m, b) = (&self.data, &self.model, &self.bench);
        let mut out: Vec<(String, String)> = [
            ("data.train_seed", d.train_seed.to_string()),
            ("data.test_seed", d.test_seed.to_string()),
            ("data.train_samples", d.train_samples.to_string()),
            ("data.test_samples", d.test_samples.to_string()),
            ("data.num_classes", d.num_classes.to_string()),
            ("data.image_size", d.image_size.to_string()),
            ("data.noise_std", d.noise_std.to_string()),
            ("data.frequency", d.frequency.to_string()),
            ("data.eval_batch_size", d.eval_batch_size.to_string()),
            ("model.patch_size", m.patch_size.to_string()),
            ("model.depth", m.depth.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.mlp_ratio", m.mlp_ratio.to_string()),
            ("model.use_cls_token", m.use_cls_token.to_string()),
            ("model.seed", m.seed.to_string()),
            ("model.student", m.student.to_string()),
            ("model.feature_map", m.feature_map.to_string()),
            ("model.landmarks", m.landmarks.to_string()),
            ("model.proj_rank", m.proj_rank.to_string()),
            ("model.rand_features", m.rand_features.to_string()),
            ("model.pinv_iters", m.pinv_iters.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        out.extend(stage_entries("teacher", &self.teacher));
        out.extend(stage_entries("stage1", &self.stage1));
        out.extend(stage_entries("stage2", &self.stage2));
        out.extend(stage_entries("stage3", &self.stage3));
        out.extend(
            [
                ("bench.variants", join(&b.variants)),
                ("bench.lengths", join(&b.lengths)),
                ("bench.d_model", b.d_model.to_string()),
                ("bench.heads", b.heads.to_string()),
                ("bench.reps", b.reps.to_string()),
                ("bench.seed", b.seed.to_string()),
                ("bench.pca_images", b.pca_images.to_string()),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v)),
        );
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved configuration\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train_spec().validate()?;
        self.test_spec().validate()?;
        if self.data.eval_batch_size == 0 {
            return Err(Error::Config("data.eval_batch_size must be positive".into()));
        }
        let teacher = self.teacher_config();
        teacher.validate()?;
        self.student_spec().validate()?;
        for (s, want) in [(&self.teacher, 0), (&self.stage1, 1), (&self.stage2, 2), (&self.stage3, 3)] {
            debug_assert_eq!(s.stage, want);
            s.validate()?;
        }
        let b = &self.bench;
        if b.variants.is_empty() || b.lengths.is_empty() || b.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "bench.variants must be non-empty and bench.lengths strictly ascending".into(),
            ));
        }
        if b.heads == 0 || b.d_model % b.heads != 0 || b.reps == 0 {
            return Err(Error::Config("bench.heads must divide bench.d_model and bench.reps be positive".into()));
        }
        Ok(())
    }

    pub fn train_spec(&self) -> DatasetSpec {
        self.dataset_spec(self.data.train_seed, self.data.train_samples)
    }

    pub fn test_spec(&self) -> DatasetSpec {
        self.dataset_spec(self.data.test_seed, self.data.test_samples)
    }

    fn dataset_spec(&self, seed: u64, n: usize) -> DatasetSpec {
        DatasetSpec {
            noise_std: self.data.noise_std,
            frequency: self.data.frequency,
            ..DatasetSpec::new(seed, n, self.data.num_classes, self.data.image_size)
        }
    }

    /// Architecture of the softmax teacher.
    pub fn teacher_config(&self) -> ViTConfig {
        let m = &self.model;
        ViTConfig {
            mlp_ratio: m.mlp_ratio,
            use_cls_token: m.use_cls_token,
            ..ViTConfig::new(
                self.data.image_size,
                m.patch_size,
                m.depth,
                m.d_model,
                m.heads,
                self.data.num_classes,
            )
        }
    }

    /// Student attention with a given variant; the model fills in the
    /// sequence-length-dependent fields when linearizing.
    pub fn student_spec_for(&self, variant: Variant) -> AttentionSpec {
        let m = &self.model;
        AttentionSpec {
            feature_map: m.feature_map,
            landmarks: m.landmarks,
            proj_rank: m.proj_rank,
            rand_features: m.rand_features,
            pinv_iters: m.pinv_iters,
            seq_len_fixed: self.teacher_config().seq_len(),
            seed: m.seed,
            ..AttentionSpec::new(variant, m.d_model, m.heads)
        }
    }

    pub fn student_spec(&self) -> AttentionSpec {
        self.student_spec_for(self.model.student)
    }

    /// Attention spec for one bench variant.
    pub fn bench_spec(&self, variant: Variant) -> AttentionSpec {
        AttentionSpec {
            d_model: self.bench.d_model,
            heads: self.bench.heads,
            seed: self.bench.seed,
            ..self.student_spec_for(variant)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let cfg = RunConfig::parse("stage2.lambda = 4000  # CLIP\nbench.lengths=64,128\n").unwrap();
        assert_eq!(cfg.stage2.lambda, 4000.0);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(RunConfig::parse("stage2.lamda=5").is_err());
        assert!(RunConfig::parse("nonsense=1").is_err());
        assert!(RunConfig::parse("stage1.lr=1\nstage1.lr=2").is_err());
        assert!(RunConfig::parse("stage1.lr").is_err());
        assert!(RunConfig::parse("stage1.epochs=-3").is_err());
        assert!(RunConfig::parse("model.heads=3").is_err());
        assert!(RunConfig::parse("bench.lengths=128,64").is_err());
    }

    #[test]
    fn every_student_variant_validates() {
        for v in Variant::ALL {
            let cfg = RunConfig::parse(&format!("model.student={v}")).unwrap();
            assert_eq!(cfg.student_spec().variant, v);
        }
    }
}
