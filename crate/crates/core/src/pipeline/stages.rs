use log::info;

use super::{attention_align_graph, feature_align_graph, lr_at, AdamW, LayerReduction, StageConfig, TrainLog};
use crate::attention::Variant;
use crate::data::{augment, batch_images, Sample};
use crate::error::{Error, Result};
use crate::model::{ForwardMode, ModelVars, ViTModel};
use crate::tensor::{Gradients, Graph, Rng, Tensor, Var};

type Model = ViTModel<f32>;

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

fn pick<'a>(data: &'a [Sample], idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| &data[i]).collect()
}

fn flat_tokens(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = t.shape();
    t.reshape(&[s[0] * s[1], s[2]])
}

/// Apply AdamW to every trainable leaf that received a gradient.
fn apply_grads(
    model: &mut Model,
    trainable: &[(String, Var)],
    grads: &Gradients<f32>,
    opt: &mut AdamW,
    lr_for: impl Fn(&str) -> f64,
    wd: f64,
) -> Result<()> {
    let mut slots = model.named_mut();
    let mut updates = Vec::with_capacity(trainable.len());
    for (name, var) in trainable {
        let Some(g) = grads.get(*var) else { continue };
        let pos = slots
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown tensor {name}")))?;
        let (n, slot) = slots.swap_remove(pos);
        updates.push((n, slot, g.data()));
    }
    opt.step(updates, lr_for, wd)
}

fn check_pair(teacher: &Model, student: &Model) -> Result<()> {
    if teacher.config.attention.variant != Variant::Softmax {
        return Err(Error::Config("teacher must use softmax attention".into()));
    }
    let mut a = teacher.config.clone();
    a.attention = student.config.attention.clone();
    if a != student.config {
        return Err(Error::Config("student architecture does not match the teacher".into()));
    }
    Ok(())
}

fn stage1_trainable(name: &str, variant: Variant, cfg: &StageConfig) -> bool {
    let Some(local) = name.split_once(".attn.").map(|(_, l)| l) else {
        return false;
    };
    let extra = local.starts_with("hedgehog.") || local.starts_with("linformer.");
    if variant == Variant::Hedgehog && cfg.hedgehog_maps_only {
        return local.starts_with("hedgehog.");
    }
    matches!(local, "w_q" | "w_k" | "w_v") || (cfg.train_w_o && local == "w_o") || extra
}

/// Stage-1 loss of `student` on one batch, as a graph.
fn stage1_graph(
    g: &mut Graph<f32>,
    teacher: &Model,
    student: &Model,
    images: &Tensor<f32>,
    cfg: &StageConfig,
) -> Result<(Var, Vec<(String, Var)>)> {
    let b = images.shape()[0];
    let taps = teacher.forward(images, ForwardMode::Taps)?.taps;
    let variant = student.config.attention.variant;
    let mut teacher_out = Vec::with_capacity(taps.len());
    let mut student_out = Vec::with_capacity(taps.len());
    let mut names = Vec::new();
    for (i, (x, o)) in taps.iter().enumerate() {
        let (vars, mut trainable) = student.bind_block_attention(g, i, |n| stage1_trainable(n, variant, cfg));
        names.append(&mut trainable);
        let xv = g.constant(flat_tokens(x)?);
        student_out.push(student.attention_graph(g, &vars, xv, b)?);
        teacher_out.push(g.constant(flat_tokens(o)?));
    }
    let loss = attention_align_graph(g, &teacher_out, &student_out, cfg.layer_reduction)?;
    Ok((loss, names))
}

/// Mean stage-1 loss over `data`, no updates.
pub fn attention_align_eval(
    teacher: &Model,
    student: &Model,
    data: &[Sample],
    batch_size: usize,
    reduction: LayerReduction,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Param("cannot evaluate on an empty dataset".into()));
    }
    let cfg = StageConfig {
        layer_reduction: reduction,
        ..StageConfig::stage1()
    };
    let order: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for idx in batches(&order, batch_size) {
        let images = batch_images(&pick(data, idx))?;
        let mut g = Graph::new();
        let (loss, _) = stage1_graph(&mut g, teacher, student, &images, &cfg)?;
        total += g.value(loss).data()[0] as f64 * idx.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Attention alignment: each student block sees the teacher's block input.
pub fn stage1_attention_align(
    teacher: &Model,
    student: &Model,
    data: &[Sample],
    cfg: &StageConfig,
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    check_pair(teacher, student)?;
    if data.is_empty() {
        return Err(Error::Param("stage 1 needs data".into()));
    }
    let mut model = student.clone();
    let mut log = TrainLog::default();
    let mut opt = AdamW::new();
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        Rng::new(cfg.seed).fork(epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for idx in batches(&order, cfg.batch_size) {
            let images = batch_images(&pick(data, idx))?;
            let mut g = Graph::new();
            let (loss, names) = stage1_graph(&mut g, teacher, &model, &images, cfg)?;
            let grads = g.backward(loss)?;
            let lr = lr_at(step, total, cfg)?;
            apply_grads(&mut model, &names, &grads, &mut opt, |_| lr, cfg.weight_decay)?;
            let l = g.value(loss).data()[0] as f64;
            log.push_step(1, lr, l);
            epoch_loss += l * idx.len() as f64;
            step += 1;
        }
        let train_loss = epoch_loss / data.len() as f64;
        info!("stage1 epoch {} loss {train_loss:.6}", epoch + 1);
        log.epochs.push(super::EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss: None,
        });
    }
    Ok((model, log))
}

fn teacher_features(teacher: &Model, data: &[Sample], idx: &[usize], batch_size: usize) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch_size) {
        let f = teacher.forward(&batch_images(&pick(data, chunk))?, ForwardMode::Features)?.features;
        for i in 0..chunk.len() {
            let one = f.slice_outer(i, 1)?;
            out.push(flat_tokens(&one)?);
        }
    }
    Ok(out)
}

fn stack_rows(parts: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let d = parts[0].cols();
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[data.len() / d, d], data)
}

/// Mean feature loss of `student` against cached teacher features.
fn feature_loss_cached(
    student: &Model,
    data: &[Sample],
    idx: &[usize],
    targets: &[Tensor<f32>],
    lambda: f64,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for (chunk, tgt) in idx.chunks(batch_size).zip(targets.chunks(batch_size)) {
        let f = student.forward(&batch_images(&pick(data, chunk))?, ForwardMode::Features)?.features;
        let refs: Vec<&Tensor<f32>> = tgt.iter().collect();
        total += super::feature_align_loss(&stack_rows(&refs)?, &flat_tokens(&f)?, lambda)? * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Mean feature alignment loss of `student` against `teacher` over `data`.
pub fn feature_align_eval(teacher: &Model, student: &Model, data: &[Sample], lambda: f64, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Param("cannot evaluate on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let targets = teacher_features(teacher, data, &idx, batch_size)?;
    feature_loss_cached(student, data, &idx, &targets, lambda, batch_size)
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub model: Model,
    pub log: TrainLog,
    /// Validation loss before any update.
    pub initial_val: f64,
    pub best_val: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Feature alignment on final-norm tokens with early stopping on a held-out split.
pub fn stage2_feature_align(teacher: &Model, student: &Model, data: &[Sample], cfg: &StageConfig) -> Result<Stage2Outcome> {
    cfg.validate()?;
    check_pair(teacher, student)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    Rng::new(cfg.seed).fork(u64::MAX).shuffle(&mut order);
    let n_val = if cfg.val_fraction > 0.0 {
        ((data.len() as f64 * cfg.val_fraction).round() as usize).max(1)
    } else {
        0
    };
    if n_val >= data.len() {
        return Err(Error::Param("validation split leaves no training data".into()));
    }
    let (val_idx, train_idx) = order.split_at(n_val);
    let (val_idx, train_idx) = (val_idx.to_vec(), train_idx.to_vec());
    let train_targets = teacher_features(teacher, data, &train_idx, cfg.batch_size)?;
    let val_targets = teacher_features(teacher, data, &val_idx, cfg.batch_size)?;
    let monitor = |m: &Model| -> Result<f64> {
        if val_idx.is_empty() {
            feature_loss_cached(m, data, &train_idx, &train_targets, cfg.lambda, cfg.batch_size)
        } else {
            feature_loss_cached(m, data, &val_idx, &val_targets, cfg.lambda, cfg.batch_size)
        }
    };

    let mut model = student.clone();
    let initial_val = monitor(&model)?;
    info!("stage2 initial val loss {initial_val:.6}");
    let mut best = (initial_val, 0, model.clone());
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut log = TrainLog::default();
    let mut opt = AdamW::new();
    let per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut step = 0;
    let positions: Vec<usize> = (0..train_idx.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut perm = positions.clone();
        Rng::new(cfg.seed).fork(epoch as u64).shuffle(&mut perm);
        let mut epoch_loss = 0.0;
        for chunk in perm.chunks(cfg.batch_size) {
            let idx: Vec<usize> = chunk.iter().map(|&p| train_idx[p]).collect();
            let targets: Vec<&Tensor<f32>> = chunk.iter().map(|&p| &train_targets[p]).collect();
            let mut g = Graph::new();
            let vars: ModelVars = model.bind(&mut g, |n| n != "head");
            let trace = model.forward_graph(&mut g, &vars, &batch_images(&pick(data, &idx))?, false)?;
            let target = g.constant(stack_rows(&targets)?);
            let loss = feature_align_graph(&mut g, target, trace.features, cfg.lambda)?;
            let grads = g.backward(loss)?;
            let lr = lr_at(step, total, cfg)?;
            apply_grads(&mut model, &vars.trainable, &grads, &mut opt, |_| lr, cfg.weight_decay)?;
            let l = g.value(loss).data()[0] as f64;
            log.push_step(2, lr, l);
            epoch_loss += l * idx.len() as f64;
            step += 1;
        }
        let val = monitor(&model)?;
        let train_loss = epoch_loss / train_idx.len() as f64;
        info!("stage2 epoch {} loss {train_loss:.6} val {val:.6}", epoch + 1);
        log.epochs.push(super::EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss: Some(val),
        });
        if val < best.0 {
            best = (val, epoch + 1, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                info!("stage2 early stop after epoch {}", epoch + 1);
                stopped_early = true;
                break;
            }
        }
    }
    let (best_val, best_epoch, best_model) = best;
    let model = if cfg.early_stop_patience > 0 { best_model } else { model };
    Ok(Stage2Outcome {
        model,
        log,
        initial_val,
        best_val,
        best_epoch,
        stopped_early,
    })
}

/// Cross-entropy training shared by teacher training and stage 3.
fn supervised(model: &mut Model, data: &[Sample], cfg: &StageConfig, backbone_ratio: f64) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::Param("supervised training needs data".into()));
    }
    let classes = model.config.num_classes;
    if let Some(s) = data.iter().find(|s| s.label >= classes) {
        return Err(Error::Label {
            label: s.label,
            classes,
        });
    }
    let mut log = TrainLog::default();
    let mut opt = AdamW::new();
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = Rng::new(cfg.seed).fork(epoch as u64);
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for idx in batches(&order, cfg.batch_size) {
            let mut imgs = Vec::with_capacity(idx.len());
            for &i in idx {
                imgs.push(if cfg.crop_pad > 0 || cfg.jitter > 0.0 {
                    augment(&data[i].image, &mut rng, cfg.crop_pad, cfg.jitter)?
                } else {
                    data[i].image.clone()
                });
            }
            let labels: Vec<usize> = idx.iter().map(|&i| data[i].label).collect();
            let mut g = Graph::new();
            let vars = model.bind(&mut g, |_| true);
            let trace = model.forward_graph(&mut g, &vars, &Tensor::stack(&imgs)?, false)?;
            let logits = model.logits_graph(&mut g, &vars, trace.features, idx.len())?;
            let loss = g.cross_entropy(logits, &labels)?;
            let grads = g.backward(loss)?;
            let lr = lr_at(step, total, cfg)?;
            let lr_for = |n: &str| if n == "head" { lr } else { lr * backbone_ratio };
            apply_grads(model, &vars.trainable, &grads, &mut opt, lr_for, cfg.weight_decay)?;
            let l = g.value(loss).data()[0] as f64;
            log.push_step(cfg.stage, lr, l);
            epoch_loss += l * idx.len() as f64;
            step += 1;
        }
        let train_loss = epoch_loss / data.len() as f64;
        info!("stage{} epoch {} loss {train_loss:.6}", cfg.stage, epoch + 1);
        log.epochs.push(super::EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss: None,
        });
    }
    Ok(log)
}

/// Train a model (usually softmax) with every parameter at the full rate.
pub fn train_teacher(model: &Model, data: &[Sample], cfg: &StageConfig) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    let mut m = model.clone();
    if m.head.is_none() {
        return Err(Error::Config("teacher training needs a classification head".into()));
    }
    let log = supervised(&mut m, data, cfg, 1.0)?;
    Ok((m, log))
}

/// Supervised fine-tuning with a reduced backbone learning rate.
///
/// The inherited head is kept unless `fresh_head` is set or there is none.
pub fn stage3_sft(student: &Model, data: &[Sample], cfg: &StageConfig) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    let mut m = student.clone();
    if cfg.fresh_head || m.head.is_none() {
        let d = m.config.d_model;
        let std = 1.0 / (d as f64).sqrt();
        m.head = Some(Tensor::randn(&[d, m.config.num_classes], std, &mut Rng::new(cfg.seed).fork(u64::MAX)));
    }
    let log = supervised(&mut m, data, cfg, cfg.backbone_lr_ratio)?;
    Ok((m, log))
}

/// Top-1 accuracy; ties go to the lowest class index.
pub fn evaluate(model: &Model, data: &[Sample], batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Param("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let refs: Vec<&Sample> = data.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let out = model.forward(&batch_images(chunk)?, ForwardMode::Logits)?;
        let logits = out.logits.expect("logits mode");
        for (r, s) in chunk.iter().enumerate() {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            correct += usize::from(best == s.label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
