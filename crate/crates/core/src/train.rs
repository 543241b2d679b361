//! Minibatch Adam loop with validation-based model selection, shared by the
//! supervised recurrent models.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{clip_global_norm, AdamState, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 3e-3,
            clip_norm: 5.0,
            patience: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    /// Epoch (0-based) whose parameters were kept; `None` if no epoch ran.
    pub best_epoch: Option<usize>,
}

/// A model trainable by [`fit`]: flat parameter access plus a minibatch
/// objective.
pub(crate) trait Trainable: Clone {
    fn flatten(&self) -> Vec<f64>;
    fn unflatten(&mut self, flat: &[f64]) -> Result<()>;
    /// Mean training objective over `batch` and its gradient, in flat order.
    fn batch_grad(&self, batch: &[usize], rng: &mut Rng) -> Result<(f64, Vec<f64>)>;
    /// Model-selection loss, evaluated without dropout.
    fn validation_loss(&self) -> Result<f64>;
}

/// Runs `cfg.epochs` epochs over `n_train` instances and returns the
/// parameters of the epoch with the lowest validation loss (ties go to the
/// earliest epoch).
pub(crate) fn fit<M: Trainable>(mut model: M, n_train: usize, cfg: &TrainConfig, rng: &mut Rng) -> Result<(M, TrainLog)> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if cfg.lr < 0.0 || !cfg.lr.is_finite() {
        return Err(Error::Config(format!("learning rate {} is invalid", cfg.lr)));
    }
    let mut log = TrainLog::default();
    if cfg.epochs == 0 || n_train == 0 {
        return Ok((model, log));
    }
    let mut flat = model.flatten();
    let mut adam = AdamState::new(flat.len(), cfg.lr);
    let mut best: Option<(f64, M)> = None;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..n_train).collect();

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, mut grad) = model.batch_grad(batch, rng)?;
            total += loss * batch.len() as f64;
            clip_global_norm(&mut grad, cfg.clip_norm);
            adam.step(&mut flat, &grad)?;
            model.unflatten(&flat)?;
        }
        let train = total / n_train as f64;
        let val = model.validation_loss()?;
        if !train.is_finite() || !val.is_finite() {
            return Err(Error::Domain(format!("training diverged at epoch {epoch}")));
        }
        debug!("epoch {epoch}: train {train:.5} validation {val:.5}");
        log.train_loss.push(train);
        log.validation_loss.push(val);
        if best.as_ref().is_none_or(|(b, _)| val < *b) {
            best = Some((val, model.clone()));
            log.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best.map(|(_, m)| m).unwrap_or(model), log))
}

/// Binary cross-entropy of a logit clamped to ±30, and its derivative
/// (zero where the clamp is active).
pub fn bce_with_logit(logit: f64, y: f64) -> (f64, f64) {
    let z = logit.clamp(-30.0, 30.0);
    let loss = crate::numerics::softplus(z) - y * z;
    let grad = if logit.abs() > 30.0 { 0.0 } else { crate::numerics::sigmoid(z) - y };
    (loss, grad)
}
