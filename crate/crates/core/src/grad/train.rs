//! Finetuning: SGD with momentum, cosine decay, gradient clipping and
//! validation-selected checkpoints over a learning-rate grid.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{preprocess_eval, preprocess_train, ImageBatch};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::probe::argmax;
use crate::rng::{derive_seed, keyed_rng};
use crate::tensor::{clip_global_norm, Real};
use crate::vit::{forward, ModelConfig, ModelWeights};

use super::backward::loss_and_grads;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rate of a single run; the grid search uses `lr_grid` instead.
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub clip_norm: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub lr_grid: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-2,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 64,
            total_steps: 500,
            eval_interval: 50,
            clip_norm: 1.0,
            val_fraction: 0.2,
            seed: 0,
            lr_grid: vec![1e-3, 3e-3, 1e-2, 3e-2],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return bad("total_steps, batch_size and eval_interval must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!(
                "val_fraction must be in (0, 1), got {}",
                self.val_fraction
            ));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|&lr| !(lr > 0.0)) {
            return bad("lr_grid must hold positive learning rates".into());
        }
        Ok(())
    }
}

/// `η · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Schedule { step, total_steps });
    }
    let t = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Classic momentum: `v ← μ·v + g`, `w ← w − lr·v`.
pub fn sgd_momentum_step<T: Real>(
    w: &mut ModelWeights<T>,
    grads: &ModelWeights<T>,
    velocity: &mut ModelWeights<T>,
    lr: f64,
    momentum: f64,
) {
    velocity.scale(T::lit(momentum));
    velocity.axpy(T::one(), grads);
    w.axpy(T::lit(-lr), velocity);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Number of completed optimizer steps.
    pub step: usize,
    pub lr: f64,
    pub weights: ModelWeights<f32>,
    pub val_accuracy: f64,
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr_current: f64,
    pub lr_base: f64,
    pub train_loss: f64,
    pub grad_norm_preclip: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub lr: f64,
    pub log: Vec<LogRow>,
    /// `(step, val_accuracy)` at each evaluation.
    pub evaluations: Vec<(usize, f64)>,
    pub best: Checkpoint,
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub best: Checkpoint,
    /// One run per grid entry, in grid order.
    pub runs: Vec<RunResult>,
}

impl FinetuneResult {
    /// All log rows, grid order then step order.
    pub fn log(&self) -> impl Iterator<Item = &LogRow> {
        self.runs.iter().flat_map(|r| r.log.iter())
    }
}

/// Writes log rows as CSV; `val_accuracy` is empty where not evaluated.
pub fn write_train_log<'a>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = &'a LogRow>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::storage(path.as_ref(), e.into_error()))?;
    write_atomic(path.as_ref(), &bytes)
}

/// Fraction of correct argmax predictions on already preprocessed images.
pub fn accuracy(
    images: &crate::tensor::Tensor<f32>,
    labels: &[usize],
    w: &ModelWeights<f32>,
    cfg: &ModelConfig,
) -> Result<f64> {
    let logits = forward(images, w, cfg)?;
    let correct = (0..labels.len())
        .filter(|&i| argmax(logits.row(i)) == labels[i])
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Splits off the last `val_fraction` of the training order for validation.
pub fn validation_split(data: &ImageBatch, val_fraction: f64) -> Result<(ImageBatch, ImageBatch)> {
    let n = data.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::Data(format!(
            "cannot hold out {val_fraction} of {n} samples for validation"
        )));
    }
    let idx: Vec<usize> = (0..n).collect();
    Ok((
        data.select(&idx[..n - n_val]),
        data.select(&idx[n - n_val..]),
    ))
}

/// Mini-batch index stream: a fresh seeded permutation every epoch.
struct Batches {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.n {
                self.order = (0..self.n).collect();
                self.order
                    .shuffle(&mut keyed_rng(self.seed, "epoch", self.epoch));
                self.epoch += 1;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn run_single(
    train: &ImageBatch,
    val_images: &crate::tensor::Tensor<f32>,
    val_labels: &[usize],
    w0: &ModelWeights<f32>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    lr: f64,
) -> Result<RunResult> {
    let mut w = w0.clone();
    let mut velocity = w.zeros_like();
    let mut batches = Batches::new(train.len(), tc.seed);
    let mut log = Vec::with_capacity(tc.total_steps);
    let mut evaluations = Vec::new();
    let mut best: Option<Checkpoint> = None;
    for t in 0..tc.total_steps {
        let idx = batches.next(tc.batch_size);
        let batch = train.select(&idx);
        let images = preprocess_train(&batch.images, derive_seed(tc.seed, "augment", t as u64))?;
        let (loss, mut grads) = loss_and_grads(&images, &batch.labels, &w, cfg)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at step {} with lr {lr}",
                t + 1
            )));
        }
        if tc.weight_decay > 0.0 {
            grads.axpy(tc.weight_decay as f32, &w);
        }
        let norm = clip_global_norm(grads.tensors_mut(), tc.clip_norm)?;
        let lr_t = cosine_lr(t, tc.total_steps, lr)?;
        sgd_momentum_step(&mut w, &grads, &mut velocity, lr_t, tc.momentum);
        let step = t + 1;
        let val_accuracy = if step % tc.eval_interval == 0 || step == tc.total_steps {
            let acc = accuracy(val_images, val_labels, &w, cfg)?;
            evaluations.push((step, acc));
            log::info!("lr {lr:e} step {step}/{}: loss {loss:.4}, val {acc:.4}", tc.total_steps);
            if best.as_ref().map_or(true, |b| acc > b.val_accuracy) {
                best = Some(Checkpoint {
                    step,
                    lr,
                    weights: w.clone(),
                    val_accuracy: acc,
                });
            }
            Some(acc)
        } else {
            None
        };
        log.push(LogRow {
            step,
            lr_current: lr_t,
            lr_base: lr,
            train_loss: loss,
            grad_norm_preclip: norm,
            val_accuracy,
        });
    }
    Ok(RunResult {
        lr,
        log,
        evaluations,
        best: best.expect("at least one evaluation"),
    })
}

/// Trains one copy of `w0` per learning rate in the grid and returns the
/// checkpoint with the highest validation accuracy (ties: earlier step, then
/// lower learning rate). `train` is used in its stored order; its last
/// `val_fraction` is held out for validation.
pub fn finetune(
    train: &ImageBatch,
    w0: &ModelWeights<f32>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<FinetuneResult> {
    tc.validate()?;
    w0.validate(cfg)?;
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    if let Some(&l) = train.labels.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(Error::Data(format!(
            "label {l} out of range for a {}-class model",
            cfg.num_classes
        )));
    }
    let (fit, val) = validation_split(train, tc.val_fraction)?;
    let val_images = preprocess_eval(&val.images)?;
    let runs: Vec<RunResult> = tc
        .lr_grid
        .par_iter()
        .map(|&lr| run_single(&fit, &val_images, &val.labels, w0, cfg, tc, lr))
        .collect::<Result<_>>()?;
    let best = runs
        .iter()
        .map(|r| &r.best)
        .min_by(|a, b| {
            b.val_accuracy
                .total_cmp(&a.val_accuracy)
                .then(a.step.cmp(&b.step))
                .then(a.lr.total_cmp(&b.lr))
        })
        .expect("non-empty grid")
        .clone();
    Ok(FinetuneResult { best, runs })
}
