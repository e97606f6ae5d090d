//! The three alignment stages, teacher training, and their shared machinery.

mod optim;
mod stages;

pub use optim::{adamw_step, AdamW, MomentState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use stages::{
    attention_align_eval, evaluate, feature_align_eval, stage1_attention_align, stage2_feature_align, stage3_sft,
    train_teacher, Stage2Outcome,
};

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Learning-rate schedule over the total step count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Fixed,
    Polynomial,
    Linear,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::Fixed => "fixed",
            Schedule::Polynomial => "polynomial",
            Schedule::Linear => "linear",
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Schedule::Fixed, Schedule::Polynomial, Schedule::Linear]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown schedule {s:?}")))
    }
}

/// How per-layer attention losses are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerReduction {
    /// Sum of per-layer means (the printed objective).
    Sum,
    /// Additionally divided by the layer count.
    Mean,
}

impl FromStr for LayerReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(LayerReduction::Sum),
            "mean" => Ok(LayerReduction::Mean),
            _ => Err(Error::Config(format!("unknown layer reduction {s:?}"))),
        }
    }
}

impl fmt::Display for LayerReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerReduction::Sum => "sum",
            LayerReduction::Mean => "mean",
        })
    }
}

/// Hyperparameters of one training stage. Stage 0 is teacher training.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub poly_power: f64,
    /// Feature-loss scale (stage 2).
    pub lambda: f64,
    /// Backbone learning-rate multiplier (stage 3).
    pub backbone_lr_ratio: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Held-out fraction for early stopping (stage 2).
    pub val_fraction: f64,
    /// Also train `W_O` during stage 1.
    pub train_w_o: bool,
    /// Hedgehog students: train only the feature maps in stage 1.
    pub hedgehog_maps_only: bool,
    pub layer_reduction: LayerReduction,
    /// Replace an inherited classification head before stage 3.
    pub fresh_head: bool,
    /// Augmentation used by the supervised stages.
    pub crop_pad: usize,
    pub jitter: f64,
}

impl StageConfig {
    fn base(stage: u8) -> Self {
        StageConfig {
            stage,
            epochs: 1,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.05,
            schedule: Schedule::Fixed,
            poly_power: 0.9,
            lambda: 1.0,
            backbone_lr_ratio: 0.1,
            seed: 0,
            early_stop_patience: 0,
            val_fraction: 0.1,
            train_w_o: false,
            hedgehog_maps_only: false,
            layer_reduction: LayerReduction::Sum,
            fresh_head: false,
            crop_pad: 0,
            jitter: 0.0,
        }
    }

    /// Supervised training of the softmax teacher from scratch.
    pub fn teacher() -> Self {
        StageConfig {
            epochs: 8,
            lr: 1e-3,
            schedule: Schedule::Linear,
            crop_pad: 2,
            jitter: 0.1,
            ..Self::base(0)
        }
    }

    /// Attention alignment: fixed 1e-2 for 4 epochs.
    pub fn stage1() -> Self {
        StageConfig {
            epochs: 4,
            lr: 1e-2,
            schedule: Schedule::Fixed,
            ..Self::base(1)
        }
    }

    /// Feature alignment: polynomial decay from 1e-3.
    pub fn stage2() -> Self {
        StageConfig {
            epochs: 30,
            lr: 1e-3,
            schedule: Schedule::Polynomial,
            lambda: 1.0,
            early_stop_patience: 3,
            ..Self::base(2)
        }
    }

    /// Supervised fine-tuning: 1e-4 on the head, a tenth of that on the backbone.
    pub fn stage3() -> Self {
        StageConfig {
            epochs: 10,
            lr: 1e-4,
            schedule: Schedule::Polynomial,
            crop_pad: 2,
            jitter: 0.1,
            ..Self::base(3)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage > 3 {
            return bad(format!("unknown stage {}", self.stage));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be finite and nonnegative".into());
        }
        if !(self.poly_power.is_finite() && self.poly_power > 0.0) {
            return bad("poly_power must be positive".into());
        }
        if self.stage == 2 && !(self.lambda.is_finite() && self.lambda > 0.0) {
            return bad(format!("stage 2 lambda must be positive, got {}", self.lambda));
        }
        if self.stage == 3 && !(self.backbone_lr_ratio > 0.0 && self.backbone_lr_ratio <= 1.0) {
            return bad(format!("backbone_lr_ratio must lie in (0, 1], got {}", self.backbone_lr_ratio));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return bad(format!("jitter must lie in [0, 0.5), got {}", self.jitter));
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total`.
pub fn lr_at(step: usize, total: usize, cfg: &StageConfig) -> Result<f64> {
    if step > total {
        return Err(Error::Param(format!("step {step} beyond schedule length {total}")));
    }
    let frac = if total == 0 { 0.0 } else { step as f64 / total as f64 };
    Ok(match cfg.schedule {
        Schedule::Fixed => cfg.lr,
        Schedule::Polynomial => cfg.lr * (1.0 - frac).powf(cfg.poly_power),
        Schedule::Linear => cfg.lr * (1.0 - frac),
    })
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub stage: u8,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn push_step(&mut self, stage: u8, lr: f64, loss: f64) {
        let step = self.steps.len();
        self.steps.push(StepRecord { step, stage, lr, loss });
    }

    /// `step,stage,lr,loss` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,stage,lr,loss\n");
        for r in &self.steps {
            out.push_str(&format!("{},{},{:e},{:e}\n", r.step, r.stage, r.lr, r.loss));
        }
        out
    }

    /// `epoch,train_loss,val_loss` CSV.
    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| format!("{v:e}")).unwrap_or_default();
            out.push_str(&format!("{},{:e},{val}\n", e.epoch, e.train_loss));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// `Σ_i mean((O_i − Ô_i)²)` over layers.
pub fn attention_align_loss<E: Element>(teacher: &[Tensor<E>], student: &[Tensor<E>]) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::Contract(format!(
            "{} teacher layers vs {} student layers",
            teacher.len(),
            student.len()
        )));
    }
    let mut total = 0.0;
    for (t, s) in teacher.iter().zip(student) {
        if t.shape() != s.shape() {
            return Err(Error::shape("attention_align_loss", t.shape(), s.shape()));
        }
        let sq: f64 = t
            .data()
            .iter()
            .zip(s.data())
            .map(|(a, b)| {
                let d = (*a - *b).to_f64().unwrap_or(f64::NAN);
                d * d
            })
            .sum();
        total += sq / t.len() as f64;
    }
    Ok(total)
}

/// `λ · mean((f − f̂)²)` over all tokens and channels.
pub fn feature_align_loss<E: Element>(teacher: &Tensor<E>, student: &Tensor<E>, lambda: f64) -> Result<f64> {
    if teacher.shape() != student.shape() {
        return Err(Error::shape("feature_align_loss", teacher.shape(), student.shape()));
    }
    let sq: f64 = teacher
        .data()
        .iter()
        .zip(student.data())
        .map(|(a, b)| {
            let d = (*a - *b).to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum();
    Ok(lambda * sq / teacher.len() as f64)
}

/// Graph form of the attention alignment loss.
pub fn attention_align_graph<E: Element>(
    g: &mut Graph<E>,
    teacher: &[Var],
    student: &[Var],
    reduction: LayerReduction,
) -> Result<Var> {
    if teacher.is_empty() || teacher.len() != student.len() {
        return Err(Error::Contract(format!(
            "{} teacher layers vs {} student layers",
            teacher.len(),
            student.len()
        )));
    }
    let scale = match reduction {
        LayerReduction::Sum => E::one(),
        LayerReduction::Mean => E::one() / E::lit(teacher.len() as f64),
    };
    let mut total = g.mse(student[0], teacher[0], scale)?;
    for (&t, &s) in teacher.iter().zip(student).skip(1) {
        let l = g.mse(s, t, scale)?;
        total = g.add(total, l)?;
    }
    Ok(total)
}

/// Graph form of the feature alignment loss.
pub fn feature_align_graph<E: Element>(g: &mut Graph<E>, teacher: Var, student: Var, lambda: f64) -> Result<Var> {
    g.mse(student, teacher, E::lit(lambda))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let mut cfg = StageConfig::stage2();
        cfg.lr = 1.0;
        assert_eq!(lr_at(0, 10, &cfg).unwrap(), 1.0);
        assert_eq!(lr_at(10, 10, &cfg).unwrap(), 0.0);
        assert!((lr_at(5, 10, &cfg).unwrap() - 0.535_886_731_268_146_4).abs() < 1e-12);
        cfg.schedule = Schedule::Linear;
        assert_eq!(lr_at(10, 10, &cfg).unwrap(), 0.0);
        assert!(lr_at(11, 10, &cfg).is_err());
    }

    #[test]
    fn stage_defaults() {
        let s1 = StageConfig::stage1();
        assert_eq!((s1.lr, s1.epochs, s1.batch_size, s1.schedule), (1e-2, 4, 32, Schedule::Fixed));
        let s2 = StageConfig::stage2();
        assert_eq!((s2.lr, s2.weight_decay, s2.schedule, s2.poly_power), (1e-3, 0.05, Schedule::Polynomial, 0.9));
        let s3 = StageConfig::stage3();
        assert_eq!((s3.lr, s3.backbone_lr_ratio), (1e-4, 0.1));
    }

    #[test]
    fn validation() {
        let mut c = StageConfig::stage2();
        c.lambda = 0.0;
        assert!(c.validate().is_err());
        let mut c = StageConfig::stage3();
        c.backbone_lr_ratio = 1.5;
        assert!(c.validate().is_err());
        assert!(StageConfig::teacher().validate().is_ok());
    }

    #[test]
    fn layer_mismatch_is_error() {
        let t = vec![Tensor::<f64>::zeros(&[2, 2]); 2];
        assert!(attention_align_loss(&t, &t[..1]).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let mut log = TrainLog::default();
        log.push_step(1, 0.01, 2.5);
        log.push_step(1, 0.01, 1.5);
        let csv = log.to_csv();
        assert!(csv.starts_with("step,stage,lr,loss\n0,1,"));
        assert_eq!(csv.lines().count(), 3);
    }
}
