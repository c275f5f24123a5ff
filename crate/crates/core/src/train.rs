//! Mini-batch training with Adam, gradient-norm clipping and early stopping
//! on validation accuracy.

use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sissa_nn::{apply_bn_updates, Adam, Forward, Scalar, Tensor};

use crate::encode::Window;
use crate::models::{CheckpointMeta, Model, ModelConfig, ModelError};
use crate::seeds::derive_seed;
use crate::store::DatasetSplit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without a validation-accuracy improvement before stopping.
    pub patience: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { max_epochs: 150, batch_size: 64, learning_rate: 1e-3, patience: 20, clip_norm: 5.0, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.max_epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(ModelError::Config(
                "max_epochs and batch_size must be positive, learning_rate > 0, clip_norm >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: Model,
    pub meta: CheckpointMeta,
    pub history: Vec<EpochRecord>,
}

pub fn check_spec(config: &ModelConfig, split: &DatasetSplit) -> Result<(), ModelError> {
    let enc = &split.manifest.encoding;
    if enc.window != config.window || enc.width() != config.features {
        return Err(ModelError::SpecMismatch(format!(
            "dataset windows are {}x{}, model expects {}x{}",
            enc.window,
            enc.width(),
            config.window,
            config.features
        )));
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(ModelError::SpecMismatch("train and val must be non-empty".into()));
    }
    Ok(())
}

/// Concatenated features and labels of `windows[idx]`.
pub fn gather(windows: &[Window], idx: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let mut x = Vec::with_capacity(idx.len() * windows.first().map_or(0, |w| w.features.len()));
    let mut y = Vec::with_capacity(idx.len());
    for &i in idx {
        x.extend_from_slice(&windows[i].features);
        y.push(windows[i].label.index());
    }
    (x, y)
}

fn correct(logits: &[Scalar], labels: &[usize], classes: usize) -> usize {
    logits
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == y
        })
        .count()
}

/// Mean loss and accuracy in inference mode.
pub fn evaluate(model: &Model, windows: &[Window], batch: usize) -> Result<(f64, f64), ModelError> {
    let (mut loss, mut hits) = (0.0, 0);
    let idx: Vec<usize> = (0..windows.len()).collect();
    for part in idx.chunks(batch.max(1)) {
        let (x, y) = gather(windows, part);
        let mut f = Forward::new(&model.store, false);
        let xv = f.tape.input(Tensor::from_f32(&[part.len(), model.config.window, model.config.features], &x)?);
        let logits = model.forward(&mut f, xv)?;
        let l = f.tape.cross_entropy(logits, &y)?;
        loss += f.tape.value(l).item() as f64 * part.len() as f64;
        hits += correct(f.tape.value(logits).data(), &y, model.config.classes);
    }
    let n = windows.len().max(1) as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Builds a fresh model from `config` and trains it.
pub fn train(config: &ModelConfig, split: &DatasetSplit, tc: &TrainConfig) -> Result<TrainOutcome, ModelError> {
    let model = Model::new(config.clone(), derive_seed(tc.seed, "init", 0))?;
    fit(model, split, tc)
}

/// Trains `model` in place on `split.train`, selecting by `split.val`.
pub fn fit(mut model: Model, split: &DatasetSplit, tc: &TrainConfig) -> Result<TrainOutcome, ModelError> {
    tc.validate()?;
    check_spec(&model.config, split)?;
    let mut adam = Adam::new(&model.store, tc.learning_rate as Scalar);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, model.store.clone());
    let shape = |b: usize| [b, model.config.window, model.config.features];
    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, "epoch", epoch as u64)));
        let (mut loss_sum, mut hits) = (0.0, 0);
        for part in order.chunks(tc.batch_size) {
            let (x, y) = gather(&split.train, part);
            let mut f = Forward::new(&model.store, true);
            let xv = f.tape.input(Tensor::from_f32(&shape(part.len()), &x)?);
            let logits = model.forward(&mut f, xv)?;
            let loss = f.tape.cross_entropy(logits, &y)?;
            loss_sum += f.tape.value(loss).item() as f64 * part.len() as f64;
            hits += correct(f.tape.value(logits).data(), &y, model.config.classes);
            let (tape, bn) = f.finish();
            let grads = tape.backward(loss)?;
            model.store.zero_grads();
            tape.accumulate_param_grads(&grads, &mut model.store);
            if tc.clip_norm > 0.0 {
                let norm = model.store.grad_norm() as f64;
                if norm > tc.clip_norm {
                    model.store.scale_grads((tc.clip_norm / norm) as Scalar);
                }
            }
            adam.step(&mut model.store);
            apply_bn_updates(&mut model.store, &bn);
        }
        let n = split.train.len() as f64;
        let (val_loss, val_acc) = evaluate(&model, &split.val, 256)?;
        let rec = EpochRecord { epoch, train_loss: loss_sum / n, train_acc: hits as f64 / n, val_loss, val_acc };
        info!(
            "{} epoch {epoch}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}",
            model.config.variant, rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc
        );
        history.push(rec);
        if val_acc > best.0 {
            best = (val_acc, epoch, model.store.clone());
        } else if epoch - best.1 >= tc.patience {
            info!("{}: early stop at epoch {epoch}, best epoch {}", model.config.variant, best.1);
            break;
        }
    }
    let (best_val_acc, epoch, store) = best;
    model.store = store;
    let meta = CheckpointMeta {
        epoch,
        best_val_acc,
        seed: tc.seed,
        dataset_hash: split.manifest.content_hash.clone(),
    };
    Ok(TrainOutcome { model, meta, history })
}

/// Writes `epoch,train_loss,train_acc,val_loss,val_acc` rows.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,train_acc,val_loss,val_acc")?;
    for r in history {
        writeln!(w, "{},{},{},{},{}", r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc)?;
    }
    Ok(())
}
