//! Deterministic training loop: step-decayed Nesterov SGD, light
//! augmentation, per-epoch evaluation, and best-by-validation checkpointing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{mapped_accuracy, ConfusionMatrix, MetricsReport};
use crate::model::Apn;
use crate::optim::{sgd_nesterov_step, SgdConfig};
use crate::param::{Mode, ParamStore, Session};
use crate::rng::{streams, Rng};
use crate::synth::Dataset;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_decay_epochs")]
    pub lr_decay_epochs: Vec<usize>,
    /// Each passed decay epoch multiplies the rate by this factor.
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_augment")]
    pub augment: bool,
}

fn default_lr0() -> f64 {
    0.1
}
fn default_decay_epochs() -> Vec<usize> {
    vec![120, 200, 260]
}
fn default_decay_factor() -> f64 {
    0.2
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_batch_size() -> usize {
    64
}
fn default_epochs() -> usize {
    300
}
fn default_augment() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: default_lr0(),
            lr_decay_epochs: default_decay_epochs(),
            lr_decay_factor: default_decay_factor(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            augment: default_augment(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if !self.lr_decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "decay epochs must be strictly increasing".into(),
            ));
        }
        if self.lr_decay_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(Error::Config("decay epochs must be < epochs".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant schedule: lr0 scaled once per passed decay epoch.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let passed = cfg.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
    cfg.lr0 * cfg.lr_decay_factor.powi(passed as i32)
}

pub fn hflip(img: &[f32], channels: usize, size: usize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for c in 0..channels {
        let base = c * size * size;
        for i in 0..size {
            for j in 0..size {
                out[base + i * size + j] = img[base + i * size + (size - 1 - j)];
            }
        }
    }
    out
}

/// Crop a size x size window from the zero-padded image at offset (oy, ox),
/// with 0 <= oy, ox <= 2*pad. The centered offset (pad, pad) is the identity.
pub fn crop_padded(
    img: &[f32],
    channels: usize,
    size: usize,
    pad: usize,
    oy: usize,
    ox: usize,
) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for c in 0..channels {
        let base = c * size * size;
        for i in 0..size {
            for j in 0..size {
                let src_i = (i + oy) as i64 - pad as i64;
                let src_j = (j + ox) as i64 - pad as i64;
                if src_i >= 0 && src_j >= 0 && (src_i as usize) < size && (src_j as usize) < size {
                    out[base + i * size + j] = img[base + src_i as usize * size + src_j as usize];
                }
            }
        }
    }
    out
}

/// Train-time augmentation: horizontal flip with probability one half, then
/// a random crop from the 4-pixel zero-padded image.
pub fn augment(img: &[f32], channels: usize, size: usize, rng: &mut Rng) -> Vec<f32> {
    let flipped = if rng.next_f64() < 0.5 {
        hflip(img, channels, size)
    } else {
        img.to_vec()
    };
    let pad = 4;
    let oy = rng.next_below(2 * pad + 1);
    let ox = rng.next_below(2 * pad + 1);
    crop_padded(&flipped, channels, size, pad, oy, ox)
}

fn batch_tensor(dataset: &Dataset, indices: &[usize], images: Option<&[Vec<f32>]>) -> Tensor<f32> {
    let size = dataset.image_size;
    let plane = 3 * size * size;
    let mut data = Vec::with_capacity(indices.len() * plane);
    for (pos, &idx) in indices.iter().enumerate() {
        match images {
            Some(aug) => data.extend_from_slice(&aug[pos]),
            None => data.extend_from_slice(&dataset.images[idx]),
        }
    }
    Tensor::new(vec![indices.len(), 3, size, size], data).expect("batch dims")
}

fn argmax_rows(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

/// Full evaluation report plus coarse (species) accuracy of the same
/// predictions.
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub coarse_top1: f64,
}

pub fn evaluate(
    model: &Apn,
    store: &mut ParamStore<f32>,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut confusion = ConfusionMatrix::new(dataset.num_classes);
    let mut predictions = Vec::with_capacity(dataset.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut session = Session::new(store, Mode::Eval);
        let x = session.input(batch_tensor(dataset, chunk, None));
        let art = model.forward(&mut session, x)?;
        let logits = session.tape.value(art.logits).data();
        for (pos, pred) in argmax_rows(logits, dataset.num_classes)
            .into_iter()
            .enumerate()
        {
            confusion.record(dataset.fine[chunk[pos]], pred);
            predictions.push(pred);
        }
    }
    let metrics = MetricsReport::from_confusion(confusion)?;

    // fine -> coarse mapping as observed in the ground truth
    let mut to_coarse = vec![usize::MAX; dataset.num_classes];
    for (&f, &c) in dataset.fine.iter().zip(dataset.coarse.iter()) {
        if to_coarse[f] != usize::MAX && to_coarse[f] != c {
            return Err(Error::Data(format!(
                "fine class {f} maps to two species ({} and {c})",
                to_coarse[f]
            )));
        }
        to_coarse[f] = c;
    }
    let coarse_top1 = mapped_accuracy(&dataset.fine, &predictions, |f| {
        if to_coarse[f] == usize::MAX {
            f
        } else {
            to_coarse[f]
        }
    });
    Ok(Evaluation {
        metrics,
        coarse_top1,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Eval-mode accuracy on the training split at epoch end.
    pub train_top1: f64,
    pub val_top1: f64,
    pub val_macro_precision: f64,
    pub val_macro_recall: f64,
    pub val_macro_f1: f64,
    pub val_coarse_top1: f64,
}

pub struct TrainResult {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_top1: f64,
    /// Checkpoint bytes of the best-validation epoch.
    pub best_checkpoint: Vec<u8>,
}

impl TrainResult {
    pub fn log_lines(&self) -> String {
        let mut out = String::new();
        for record in &self.log {
            out.push_str(&serde_json::to_string(record).expect("serializable record"));
            out.push('\n');
        }
        out
    }
}

/// Train `model` in place. Deterministic for a fixed (config, seed): batch
/// order and augmentation draws come from per-epoch streams of the root
/// seed. Aborts with a diagnostic if the loss leaves the finite range.
pub fn train(
    model: &Apn,
    store: &mut ParamStore<f32>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(
            "train and validation sets must be nonempty".into(),
        ));
    }
    if train_set.num_classes != model.spec.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            train_set.num_classes, model.spec.num_classes
        )));
    }

    let size = train_set.image_size;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<u8>)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let mut shuffle_rng = streams::epoch_rng(seed, streams::SHUFFLE, epoch as u64);
        let mut augment_rng = streams::epoch_rng(seed, streams::AUGMENT, epoch as u64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // a trailing single sample cannot supply train-mode batch
            // statistics for the 1x1 attention descriptors
            if chunk.len() == 1 && train_set.len() > 1 {
                continue;
            }
            let images: Option<Vec<Vec<f32>>> = if cfg.augment {
                Some(
                    chunk
                        .iter()
                        .map(|&i| augment(&train_set.images[i], 3, size, &mut augment_rng))
                        .collect(),
                )
            } else {
                None
            };
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.fine[i]).collect();

            store.zero_grads();
            let mut session = Session::new(store, Mode::Train);
            let x = session.input(batch_tensor(train_set, chunk, images.as_deref()));
            let art = model.forward(&mut session, x)?;
            let loss = session.tape.softmax_cross_entropy(art.logits, &labels)?;
            let loss_value = session.tape.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            session.tape.backward(loss)?;
            session.collect_grads();
            drop(session);
            sgd_nesterov_step(
                store,
                SgdConfig {
                    lr,
                    momentum: cfg.momentum,
                    weight_decay: cfg.weight_decay,
                },
            );
            loss_sum += loss_value;
            batches += 1;
        }

        let train_eval = evaluate(model, store, train_set, cfg.batch_size)?;
        let val_eval = evaluate(model, store, val_set, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            train_top1: train_eval.metrics.top1,
            val_top1: val_eval.metrics.top1,
            val_macro_precision: val_eval.metrics.macro_precision,
            val_macro_recall: val_eval.metrics.macro_recall,
            val_macro_f1: val_eval.metrics.macro_f1,
            val_coarse_top1: val_eval.coarse_top1,
        };
        let improved = match &best {
            None => true,
            Some((_, top1, _)) => record.val_top1 > *top1,
        };
        if improved {
            best = Some((epoch, record.val_top1, checkpoint::save_to_vec(store)));
        }
        log.push(record);
    }

    let (best_epoch, best_val_top1, best_checkpoint) = best.expect("at least one epoch");
    let result = TrainResult {
        log,
        best_epoch,
        best_val_top1,
        best_checkpoint,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.jsonl"), result.log_lines())?;
        std::fs::write(dir.join("best.ckpt"), &result.best_checkpoint)?;
    }
    Ok(result)
}
