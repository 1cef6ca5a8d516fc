use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{accuracy, predict};
use super::TrainError;
use crate::diffcore::{AdamW, AdamWConfig, DiffError, ParamStore, Tape, Tensor};
use crate::model::{Camd, ModelError};
use crate::sigsynth::DatasetFile;

/// Frames per gradient chunk. Chunks are fixed by position in the batch, so
/// the reduction order does not depend on the worker count.
pub const GRAD_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 1e-3,
            batch_size: 512,
            epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(TrainError::Config(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, if any epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    pub wall_seconds: f64,
}

/// Stacks frames `[Nr×L×2]` into a `[N×Nr×L×2]` tensor.
pub fn frames_tensor(d: &DatasetFile, indices: &[usize]) -> Result<Tensor<f32>, TrainError> {
    let per = d.nr() * d.len() * 2;
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        let f = d.frames.get(i).ok_or(TrainError::Index {
            index: i,
            len: d.frames.len(),
        })?;
        data.extend_from_slice(&f.iq);
    }
    Ok(Tensor::new(&[indices.len(), d.nr(), d.len(), 2], data).map_err(ModelError::from)?)
}

pub fn labels_of(d: &DatasetFile, indices: &[usize]) -> Vec<usize> {
    indices
        .iter()
        .map(|&i| d.frames[i].label as usize)
        .collect()
}

/// Summed loss and gradients of one chunk, normalized by the batch size.
fn chunk_gradients(
    model: &Camd<f32>,
    d: &DatasetFile,
    chunk: &[usize],
    batch_len: usize,
) -> Result<(f64, Vec<Vec<f32>>), TrainError> {
    let mut tape = Tape::new();
    let r = tape.constant(&frames_tensor(d, chunk)?);
    let logits = model.forward(&mut tape, r)?;
    let loss = tape
        .cross_entropy_normalized(logits, &labels_of(d, chunk), batch_len)
        .map_err(ModelError::from)?;
    let grads = tape.backward(loss).map_err(ModelError::from)?;
    let mut flat: Vec<Vec<f32>> = model
        .params()
        .iter()
        .map(|(_, _, t)| vec![0.0; t.numel()])
        .collect();
    for (id, g) in tape.param_grads(&grads) {
        for (acc, v) in flat[id.0].iter_mut().zip(g) {
            *acc += v;
        }
    }
    Ok((tape.value(loss)[0] as f64, flat))
}

/// Mean loss over `batch` with gradients left in the parameter store.
pub fn batch_gradients(
    model: &mut Camd<f32>,
    d: &DatasetFile,
    batch: &[usize],
) -> Result<f64, TrainError> {
    let shared: &Camd<f32> = model;
    let parts: Vec<(f64, Vec<Vec<f32>>)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| chunk_gradients(shared, d, chunk, batch.len()))
        .collect::<Result<_, _>>()?;
    let store: &mut ParamStore<f32> = model.params_mut();
    store.zero_grad();
    let mut loss = 0.0;
    for (chunk_loss, grads) in &parts {
        loss += chunk_loss;
        for ((_, t), g) in store.iter_mut().zip(grads) {
            t.accumulate_grad(g);
        }
    }
    Ok(loss)
}

fn diverged(err: TrainError, epoch: usize, step: usize) -> TrainError {
    match err {
        TrainError::Model(ModelError::Diff(DiffError::NonFinite { .. })) => {
            TrainError::Divergence {
                epoch,
                step,
                loss: f64::NAN,
            }
        }
        other => other,
    }
}

/// Mean cross-entropy over `indices`, evaluated in chunks.
pub fn mean_loss(model: &Camd<f32>, d: &DatasetFile, indices: &[usize]) -> Result<f64, TrainError> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let parts: Vec<f64> = indices
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| -> Result<f64, TrainError> {
            let mut tape = Tape::new();
            let r = tape.constant(&frames_tensor(d, chunk)?);
            let logits = model.forward(&mut tape, r)?;
            let loss = tape
                .cross_entropy_normalized(logits, &labels_of(d, chunk), indices.len())
                .map_err(ModelError::from)?;
            Ok(tape.value(loss)[0] as f64)
        })
        .collect::<Result<_, _>>()?;
    Ok(parts.iter().sum())
}

/// Trains with AdamW on shuffled mini-batches (the last partial batch is
/// kept) at a constant learning rate. Returns the parameters of the epoch
/// with the best validation accuracy, or the final ones when `val` is empty.
pub fn train(
    model: Camd<f32>,
    d: &DatasetFile,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<(Camd<f32>, TrainLog), TrainError> {
    train_with(model, d, train_idx, val_idx, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    mut model: Camd<f32>,
    d: &DatasetFile,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Camd<f32>, TrainLog), TrainError> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer(), model.params());
    let mut order = train_idx.to_vec();
    let mut log = TrainLog {
        seed: cfg.seed,
        config: cfg.clone(),
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: None,
        best_val_acc: None,
        wall_seconds: 0.0,
    };
    let mut best: Option<Camd<f32>> = None;
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let loss =
                batch_gradients(&mut model, d, batch).map_err(|e| diverged(e, epoch, step))?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence { epoch, step, loss });
            }
            opt.step(model.params_mut());
            total += loss * batch.len() as f64;
        }
        let train_loss = total / order.len() as f64;
        let (val_loss, val_acc) = if val_idx.is_empty() {
            (None, None)
        } else {
            let preds = predict(&model, d, val_idx)?;
            let acc = accuracy(&preds, &labels_of(d, val_idx));
            (Some(mean_loss(&model, d, val_idx)?), Some(acc))
        };
        let improved = match (val_acc, log.best_val_acc) {
            (Some(acc), Some(best)) => acc > best,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            log.best_epoch = Some(epoch);
            log.best_val_acc = val_acc;
            best = Some(model.clone());
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.epochs.push(record);
    }
    log.wall_seconds = started.elapsed().as_secs_f64();
    Ok((best.unwrap_or(model), log))
}
