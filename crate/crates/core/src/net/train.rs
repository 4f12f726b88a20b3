//! Adam and the mini-batch training loop.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EmbeddingParams, Mode, TrainSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `(1/(2LK)) sum ||q - q_hat||^2` against solver labels.
    SupervisedMse,
    /// `-(1/(2LK)) sum rate`, needing no labels.
    UnsupervisedSumRate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One bias-corrected step on the coordinates in `range`.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], range: Range<usize>) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in range {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            theta[i] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
    }
}

/// Which parameters a training run may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Everything, with batch statistics in the normalisation layers.
    All,
    /// The fully-connected layer only; convolutions and normalisation stay
    /// frozen and run on their stored statistics.
    FcOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Fraction of the (shuffled) data held out for validation.
    pub val_fraction: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            patience: 20,
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub early_stop: Option<EarlyStop>,
    pub params: ParamGroup,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 100,
            adam: AdamConfig::default(),
            early_stop: Some(EarlyStop::default()),
            params: ParamGroup::All,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation parameters when early stopping is on, else the last.
    pub params: EmbeddingParams,
    /// Training loss of every pass.
    pub loss_trace: Vec<f64>,
    /// Validation loss after every epoch (empty without early stopping).
    pub val_trace: Vec<f64>,
    /// Forward/backward passes, one per mini-batch.
    pub passes: usize,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Mini-batch Adam training with optional early stopping on a held-out
/// tail of a seeded shuffle.
pub fn train(
    theta0: &EmbeddingParams,
    data: &[TrainSample],
    objective: Objective,
    noise: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidSpec("batch_size must be positive".into()));
    }
    if objective == Objective::SupervisedMse && data.iter().any(|s| s.label.is_none()) {
        return Err(Error::InvalidSpec("supervised training needs labelled samples".into()));
    }
    if objective == Objective::UnsupervisedSumRate && noise.len() != theta0.arch.k {
        return Err(Error::DimensionMismatch("noise vector length".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = match cfg.early_stop {
        Some(es) if data.len() >= 2 => {
            ((es.val_fraction * data.len() as f64).ceil() as usize).clamp(1, data.len() - 1)
        }
        _ => 0,
    };
    let mut train_idx = order[..data.len() - n_val].to_vec();
    let val: Vec<&TrainSample> = order[data.len() - n_val..].iter().map(|&i| &data[i]).collect();

    let (mode, range) = match cfg.params {
        ParamGroup::All => (Mode::Train, 0..theta0.theta.len()),
        ParamGroup::FcOnly => (Mode::Eval, theta0.fc_range()),
    };

    let mut params = theta0.clone();
    let mut adam = Adam::new(params.theta.len(), cfg.adam);
    let mut out = TrainOutcome {
        params: theta0.clone(),
        loss_trace: Vec::new(),
        val_trace: Vec::new(),
        passes: 0,
        epochs_run: 0,
        best_epoch: None,
        stopped_early: false,
    };
    let mut best = f64::INFINITY;
    let mut waited = 0;

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        for chunk in train_idx.chunks(cfg.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grad, cache) = params.loss_and_grad(objective, &batch, noise, mode)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite loss {loss} at epoch {epoch}, pass {}",
                    out.passes
                )));
            }
            adam.step(&mut params.theta, &grad, range.clone());
            params.update_running_stats(&cache);
            out.passes += 1;
            out.loss_trace.push(loss);
        }
        out.epochs_run = epoch + 1;

        if let (Some(es), false) = (cfg.early_stop, val.is_empty()) {
            let v = params.eval_loss(objective, &val, noise)?;
            if !v.is_finite() {
                return Err(Error::Divergence(format!("non-finite validation loss at epoch {epoch}")));
            }
            out.val_trace.push(v);
            if v < best {
                best = v;
                waited = 0;
                out.best_epoch = Some(epoch);
                out.params = params.clone();
            } else {
                waited += 1;
                if waited >= es.patience {
                    out.stopped_early = true;
                    break;
                }
            }
        }
    }
    if n_val == 0 || out.best_epoch.is_none() {
        out.params = params;
    }
    Ok(out)
}
