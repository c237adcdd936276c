//! Mini-batch training with teacher forcing, validation-based early stopping
//! and best-model restoration.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kpi::{Features, TrainingSample};
use crate::loss::{total_loss, LossWeights};
use crate::model::{Hyperparams, ModelError, ModelInput, Mode, RupFormer};
use crate::optim::{clip_gradients, Adam, AdamConfig, OptimError};
use crate::tape::Tape;
use crate::tensor::TensorError;

/// Optimization settings. [`Default`] is the reference training protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub clip_norm: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub alpha: f32,
    pub beta: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 400,
            lr: 1e-4,
            weight_decay: 1e-5,
            clip_norm: 1.0,
            patience: 10,
            min_delta: 1e-5,
            alpha: 0.9,
            beta: 1.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = self.epochs > 0
            && self.batch_size > 0
            && self.lr > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm > 0.0
            && self.patience > 0
            && self.min_delta >= 0.0
            && self.alpha > 0.0
            && self.beta > 0.0;
        if positive {
            Ok(())
        } else {
            Err(TrainError::Config)
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta: self.beta }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("training configuration values must be positive")]
    Config,
    #[error("the {0} split has no samples")]
    EmptySplit(&'static str),
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("epoch {epoch}: {source}")]
    Optim { epoch: usize, source: OptimError },
}

/// Overflow inside the forward pass is a numerical failure like a NaN loss.
fn forward_error(e: ModelError) -> TrainError {
    match e {
        ModelError::Tensor(TensorError::NonFinite { .. }) => TrainError::NonFiniteLoss { epoch: 0, batch: 0 },
        other => other.into(),
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f32,
    pub stopped: bool,
}

/// Patience counter on the validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    stale: usize,
}

/// Outcome of feeding one validation loss to [`EarlyStopping`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { patience, min_delta, best: f64::INFINITY, stale: 0 }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> Verdict {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.stale = 0;
            Verdict { improved: true, stop: false }
        } else {
            self.stale += 1;
            Verdict { improved: false, stop: self.stale >= self.patience }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation loss.
    pub model: RupFormer,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

fn targets(batch: &[&TrainingSample]) -> Vec<Features> {
    batch.iter().flat_map(|s| s.decoder_targets.iter().copied()).collect()
}

/// Runs one optimizer step on `batch` and returns the batch loss before the update.
pub fn train_step(
    model: &mut RupFormer,
    adam: &mut Adam,
    batch: &[&TrainingSample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    model.params_mut().zero_grads();
    let input = ModelInput::teacher_forced(batch);
    let target = targets(batch);
    let (loss, grads) = {
        let mut tape = Tape::new();
        let head = model.forward(&mut tape, &input, &mut Mode::Train(rng)).map_err(forward_error)?;
        let q = &model.hyperparams().quantiles;
        let loss = total_loss(&mut tape, head, &target, q, cfg.loss_weights())?;
        let value = f64::from(tape.value(loss)[0]);
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch: 0, batch: 0 });
        }
        (value, tape.backward(loss)?)
    };
    model.params_mut().accumulate(&grads);
    clip_gradients(model.params_mut(), cfg.clip_norm);
    adam.step(model.params_mut()).map_err(|source| TrainError::Optim { epoch: 0, source })?;
    Ok(loss)
}

/// Sample-weighted mean loss with dropout off and teacher forcing on.
pub fn evaluate_loss(
    model: &RupFormer,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let mut sum = 0.0;
    for chunk in samples.chunks(cfg.batch_size) {
        let batch: Vec<&TrainingSample> = chunk.iter().collect();
        let input = ModelInput::teacher_forced(&batch);
        let mut tape = Tape::new();
        let head = model.forward(&mut tape, &input, &mut Mode::Eval).map_err(forward_error)?;
        let q = &model.hyperparams().quantiles;
        let loss = total_loss(&mut tape, head, &targets(&batch), q, cfg.loss_weights())?;
        sum += f64::from(tape.value(loss)[0]) * chunk.len() as f64;
    }
    Ok(sum / samples.len() as f64)
}

/// Trains a fresh model seeded from `cfg.seed`.
pub fn train(
    train_samples: &[TrainingSample],
    val_samples: &[TrainingSample],
    hp: Hyperparams,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_samples.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if val_samples.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut model = RupFormer::new(hp, cfg.seed)?;
    let mut best = model.clone();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr, cfg.weight_decay), model.params());
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut history = Vec::new();
    let mut best_epoch = 0;
    let mut order: Vec<usize> = (0..train_samples.len()).collect();

    for epoch in 1..=cfg.epochs {
        let mut shuffle = epoch_rng(cfg.seed, epoch, 1);
        let mut dropout = epoch_rng(cfg.seed, epoch, 2);
        order.sort_unstable();
        order.shuffle(&mut shuffle);

        let mut sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainingSample> = idx.iter().map(|&i| &train_samples[i]).collect();
            let loss = train_step(&mut model, &mut adam, &batch, cfg, &mut dropout).map_err(|e| match e {
                TrainError::NonFiniteLoss { .. } => TrainError::NonFiniteLoss { epoch, batch: b },
                TrainError::Optim { source, .. } => TrainError::Optim { epoch, source },
                other => other,
            })?;
            sum += loss * idx.len() as f64;
        }
        let train_loss = sum / train_samples.len() as f64;
        let val_loss = evaluate_loss(&model, val_samples, cfg).map_err(|e| match e {
            TrainError::NonFiniteLoss { .. } => TrainError::NonFiniteLoss { epoch, batch: 0 },
            other => other,
        })?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: 0 });
        }
        let verdict = stopper.observe(val_loss);
        if verdict.improved {
            best.params_mut().copy_values_from(model.params());
            best_epoch = epoch;
        }
        let record = EpochRecord { epoch, train_loss, val_loss, lr: cfg.lr, stopped: verdict.stop };
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        on_epoch(&record);
        history.push(record);
        if verdict.stop {
            break;
        }
    }
    Ok(TrainOutcome { model: best, history, best_epoch, best_val_loss: stopper.best() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_counts_stale_epochs() {
        let mut es = EarlyStopping::new(10, 1e-5);
        let mut losses = alloc::vec![1.0, 0.9];
        losses.extend(core::iter::repeat_n(0.9, 10));
        let mut stopped_at = None;
        for (i, l) in losses.iter().enumerate() {
            if es.observe(*l).stop {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(12));
        assert_eq!(es.best(), 0.9);
    }

    #[test]
    fn improvements_below_min_delta_do_not_count() {
        let mut es = EarlyStopping::new(2, 0.1);
        assert!(es.observe(1.0).improved);
        assert!(!es.observe(0.95).improved);
        assert!(es.observe(0.85).improved);
    }
}
