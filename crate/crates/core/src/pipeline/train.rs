//! Detection loss and the deterministic training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::assign::{assign_targets, level_grids, GtBox};
use super::config::{ClsLoss, ModelConfig};
use super::decode::{decode_and_nms, decode_level, decode_points, DecodeParams};
use super::model::{build_model, LevelOutput, Model, Network};
use super::synth::Dataset;
use crate::boxes::Bbox;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::losses::{bce_loss, ciou_loss_tape, focal_loss_tape, varifocal_loss, FocalParams, Reduction, VflParams};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Peak step size, decayed by a half cosine over the run.
    pub lr: f64,
    /// Step size at the final epoch as a fraction of `lr`.
    pub lr_final_fraction: f64,
    pub batch_size: usize,
    /// Heavy-ball momentum; 0 gives plain SGD.
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub val_fraction: f64,
    /// Evaluate every this many epochs (and always after the last); 0 only after the last.
    pub eval_every: usize,
    pub decode: DecodeParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.03,
            lr_final_fraction: 0.05,
            batch_size: 4,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: Some(10.0),
            val_fraction: 0.25,
            eval_every: 0,
            decode: DecodeParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("lr_final_fraction and val_fraction must be fractions".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("weight_decay and grad_clip must be non-negative".into()));
        }
        Ok(())
    }

    /// Step size for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        let floor = self.lr * self.lr_final_fraction;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Human-readable optimiser description for reports.
    pub fn optimizer_label(&self) -> String {
        format!(
            "SGD (momentum {}, weight decay {}) with half-cosine step decay from {} to {}",
            self.momentum,
            self.weight_decay,
            self.lr,
            self.lr * self.lr_final_fraction
        )
    }
}

/// Scalar loss handles on the tape plus their detached values.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub cls: f64,
    pub boxes: f64,
    pub positives: usize,
}

/// Positive points of one image at one level with their ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPositives {
    pub image: usize,
    pub points: Vec<usize>,
    pub gts: Vec<Bbox>,
}

/// Assignment of a batch, treated as constant by the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets {
    /// Per level, target quality laid out like the `[N, K, H, W]` logits.
    pub q: Vec<Vec<f64>>,
    pub positives: Vec<Vec<LevelPositives>>,
    pub num_positives: usize,
}

/// Assigns `targets` (one list per batch image) against the current
/// predictions in `levels`.
pub fn build_targets(model: &Model, levels: &[LevelOutput<Tensor>], targets: &[Vec<GtBox>]) -> Result<BatchTargets> {
    let cfg = &model.config;
    let grids = level_grids(cfg.input_size, &cfg.strides);
    let k = cfg.num_classes;
    let mut q: Vec<Vec<f64>> = levels.iter().map(|l| vec![0.0; l.cls.len()]).collect();
    let mut positives: Vec<Vec<LevelPositives>> = vec![Vec::new(); levels.len()];
    let mut num_positives = 0;
    for (img, gts) in targets.iter().enumerate() {
        if let Some(g) = gts.iter().find(|g| g.class >= k) {
            return Err(Error::Dimension(format!("target class {} outside {k} classes", g.class)));
        }
        let preds: Vec<Bbox> = levels.iter().flat_map(|l| decode_level(&l.reg, l.stride, img)).collect();
        let assigned = assign_targets(&grids, gts, &preds);
        let mut offset = 0;
        for (li, grid) in grids.iter().enumerate() {
            let hw = grid.len();
            let mut pos = LevelPositives {
                image: img,
                points: Vec::new(),
                gts: Vec::new(),
            };
            for (p, t) in assigned[offset..offset + hw].iter().enumerate() {
                if let Some(gi) = t.gt {
                    q[li][(img * k + t.class) * hw + p] = t.q;
                    pos.points.push(p);
                    pos.gts.push(gts[gi].bbox);
                }
            }
            num_positives += pos.points.len();
            if !pos.points.is_empty() {
                positives[li].push(pos);
            }
            offset += hw;
        }
    }
    Ok(BatchTargets {
        q,
        positives,
        num_positives,
    })
}

fn detached(tape: &Tape, levels: &[LevelOutput<Var>]) -> Vec<LevelOutput<Tensor>> {
    levels
        .iter()
        .map(|l| LevelOutput {
            stride: l.stride,
            cls: tape.value(l.cls).clone(),
            reg: tape.value(l.reg).clone(),
        })
        .collect()
}

/// Weighted classification plus weighted CIoU loss for a batch, both
/// normalised by the number of positives in the batch. Targets are assigned
/// from the current predictions.
pub fn detection_loss(
    model: &Model,
    tape: &mut Tape,
    images: Var,
    params: &Network<Var>,
    targets: &[Vec<GtBox>],
) -> Result<LossParts> {
    let n = tape.shape(images).n;
    if targets.len() != n {
        return Err(Error::Dimension(format!("{} target lists for a batch of {n}", targets.len())));
    }
    let levels = model.forward(tape, images, params)?;
    let assigned = build_targets(model, &detached(tape, &levels), targets)?;
    loss_from_outputs(model, tape, &levels, &assigned)
}

/// As [`detection_loss`] with a fixed assignment.
pub fn detection_loss_with_targets(
    model: &Model,
    tape: &mut Tape,
    images: Var,
    params: &Network<Var>,
    targets: &BatchTargets,
) -> Result<LossParts> {
    let levels = model.forward(tape, images, params)?;
    loss_from_outputs(model, tape, &levels, targets)
}

fn loss_from_outputs(model: &Model, tape: &mut Tape, levels: &[LevelOutput<Var>], targets: &BatchTargets) -> Result<LossParts> {
    let cfg = &model.config;
    if targets.q.len() != levels.len() {
        return Err(Error::Dimension("targets built for a different head layout".into()));
    }
    let mut cls_terms = Vec::new();
    let mut box_terms = Vec::new();
    for (li, level) in levels.iter().enumerate() {
        let scores = tape.sigmoid(level.cls);
        let q = &targets.q[li];
        let term = match cfg.cls_loss {
            ClsLoss::Vfl => {
                let params = VflParams {
                    reduction: Reduction::Sum,
                    ..cfg.vfl
                };
                varifocal_loss(tape, scores, q, &params)?
            }
            ClsLoss::Focal => {
                let params = FocalParams {
                    reduction: Reduction::Sum,
                    ..cfg.focal
                };
                let labels: Vec<f64> = q.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                focal_loss_tape(tape, scores, &labels, &params)?
            }
            ClsLoss::Bce => bce_loss(tape, scores, q, cfg.vfl.epsilon, Reduction::Sum)?,
        };
        cls_terms.push(term);
        for pos in &targets.positives[li] {
            let coords = decode_points(tape, level.reg, level.stride, pos.image, &pos.points)?;
            box_terms.push(ciou_loss_tape(tape, coords, &pos.gts)?);
        }
    }
    let sum_all = |tape: &mut Tape, terms: &[Var]| -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for &t in terms {
            acc = Some(match acc {
                None => t,
                Some(a) => tape.add(a, t)?,
            });
        }
        Ok(acc)
    };
    let norm = 1.0 / targets.num_positives.max(1) as f64;
    let cls_sum = sum_all(tape, &cls_terms)?.expect("at least one head level");
    let cls = tape.scale(cls_sum, norm);
    let weighted_cls = tape.scale(cls, cfg.cls_weight);
    let (total, boxes) = match sum_all(tape, &box_terms)? {
        Some(b) => {
            let b = tape.scale(b, norm);
            let weighted = tape.scale(b, cfg.box_weight);
            (tape.add(weighted_cls, weighted)?, tape.value(b).item()?)
        }
        None => (weighted_cls, 0.0),
    };
    Ok(LossParts {
        total,
        cls: tape.value(cls).item()?,
        boxes,
        positives: targets.num_positives,
    })
}

/// Loss value and parameter gradients (in `Network::flatten` order) for the
/// given images of `dataset`.
pub fn loss_and_gradients(model: &Model, dataset: &Dataset, indices: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let x = tape.leaf(dataset.batch_tensor(indices, model.config.input_size)?);
    let params = model.params.register(&mut tape);
    let targets: Vec<Vec<GtBox>> = indices.iter().map(|&i| dataset.targets(i)).collect();
    let parts = detection_loss(model, &mut tape, x, &params, &targets)?;
    let value = tape.value(parts.total).item()?;
    let grads = tape.backward(parts.total)?;
    Ok((value, params.named().into_iter().map(|(_, v)| grads.get(*v)).collect()))
}

/// Detections of `model` on the given images and COCO evaluation against their annotations.
pub fn evaluate_model(model: &Model, dataset: &Dataset, indices: &[usize], decode: &DecodeParams) -> Result<EvalResult> {
    let subset = dataset.subset(indices);
    let cats = subset.category_ids();
    let mut dets = Vec::new();
    let all: Vec<usize> = (0..subset.len()).collect();
    for chunk in all.chunks(8) {
        let x = subset.batch_tensor(chunk, model.config.input_size)?;
        let out = model.predict(&x)?;
        let ids: Vec<u64> = chunk.iter().map(|&i| subset.coco.images[i].id).collect();
        dets.extend(decode_and_nms(&out, &ids, &cats, decode)?);
    }
    evaluate(&dets, &subset.coco.box_annotations(), &subset.coco.categories)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss, each measured before that batch's update.
    pub loss: f64,
    pub cls_loss: f64,
    pub box_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EvalResult>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub model: Model,
    /// Held-out evaluation of the final model (also of the untrained model when `epochs == 0`).
    pub final_eval: EvalResult,
}

fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Trains a freshly built model on `dataset`. Everything, including the
/// shuffling, is determined by `model_config.seed`.
pub fn train_demo(model_config: &ModelConfig, dataset: &Dataset, train: &TrainConfig) -> Result<TrainOutcome> {
    train.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training needs a non-empty dataset".into()));
    }
    if model_config.num_classes != dataset.coco.categories.len() {
        return Err(Error::Config(format!(
            "model has {} classes, dataset has {}",
            model_config.num_classes,
            dataset.coco.categories.len()
        )));
    }
    let mut model = build_model(model_config)?;
    let (train_idx, val_idx) = dataset.split(train.val_fraction);
    let mut velocity: Vec<Tensor> = model.params.flatten().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut history = Vec::with_capacity(train.epochs);
    let mut order = train_idx.clone();
    for epoch in 0..train.epochs {
        let lr = train.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(model_config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64);
        order.copy_from_slice(&train_idx);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut cls_sum, mut box_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (step, batch) in order.chunks(train.batch_size).enumerate() {
            let mut tape = Tape::new();
            let x = tape.leaf(dataset.batch_tensor(batch, model_config.input_size)?);
            let params = model.params.register(&mut tape);
            let targets: Vec<Vec<GtBox>> = batch.iter().map(|&i| dataset.targets(i)).collect();
            let parts = detection_loss(&model, &mut tape, x, &params, &targets)?;
            let loss = tape.value(parts.total).item()?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch: epoch + 1, step, loss });
            }
            let grads = tape.backward(parts.total)?;
            let mut flat: Vec<Tensor> = params.named().into_iter().map(|(_, v)| grads.get(*v)).collect();
            let norm = global_norm(&flat);
            if !norm.is_finite() {
                return Err(Error::Divergence { epoch: epoch + 1, step, loss: norm });
            }
            if let Some(clip) = train.grad_clip {
                if norm > clip {
                    let s = clip / norm;
                    flat.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
                }
            }
            let mut i = 0;
            model.params = model.params.map(|p| {
                let (g, vel) = (&flat[i], &mut velocity[i]);
                let mut next = p.clone();
                for ((w, &dw), m) in next.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                    *m = train.momentum * *m + dw + train.weight_decay * *w;
                    *w -= lr * *m;
                }
                i += 1;
                next
            });
            loss_sum += loss;
            cls_sum += parts.cls;
            box_sum += parts.boxes;
            batches += 1;
        }
        let last = epoch + 1 == train.epochs;
        let eval = if last || (train.eval_every > 0 && (epoch + 1) % train.eval_every == 0) {
            Some(evaluate_model(&model, dataset, &val_idx, &train.decode)?)
        } else {
            None
        };
        let b = batches.max(1) as f64;
        log::debug!("epoch {} lr {lr:.5} loss {:.5}", epoch + 1, loss_sum / b);
        history.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            loss: loss_sum / b,
            cls_loss: cls_sum / b,
            box_loss: box_sum / b,
            eval,
        });
    }
    let final_eval = match history.last().and_then(|r| r.eval.clone()) {
        Some(e) => e,
        None => evaluate_model(&model, dataset, &val_idx, &train.decode)?,
    };
    Ok(TrainOutcome {
        history,
        model,
        final_eval,
    })
}
