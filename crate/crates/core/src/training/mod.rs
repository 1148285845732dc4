//! Joint CTC/attention objective, optimizer, schedule and the epoch loop.

mod ctc;
mod optim;
mod trainer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor};
use crate::model::ModelError;
use crate::phoneset::PAD;
use crate::scalar::Scalar;

pub use ctc::{ctc_loss, ctc_min_frames};
pub use optim::{
    adam_step, average_checkpoints, average_params, averaging_window, clip_grad_norm, AdamConfig, OptimizerState,
};
pub use trainer::{
    evaluate_loss, make_batches, train_loop, Example, LossBreakdown, MetricRecord, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("target needs {needed} frames but only {frames} are available")]
    TargetTooLong { needed: usize, frames: usize },
    #[error("label {label} is blank or outside vocabulary of {vocab}")]
    BadLabel { label: usize, vocab: usize },
    #[error("learning-rate step must be >= 1")]
    BadStep,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("architecture fingerprints differ: {0} vs {1}")]
    FingerprintMismatch(String, String),
    #[error("no trainable utterances ({skipped} skipped)")]
    NoTrainableData { skipped: usize },
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("loss became non-finite at step {step}")]
    Diverged { step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<AutodiffError> for TrainingError {
    fn from(e: AutodiffError) -> Self {
        TrainingError::Model(ModelError::Autodiff(e))
    }
}

/// Optimization recipe. Defaults are the full-scale values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// λ in `λ·ctc + (1−λ)·att`.
    pub ctc_weight: f64,
    pub label_smoothing: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Use `peak_lr` for every step instead of the warmup schedule.
    pub constant_lr: bool,
    pub epochs: usize,
    pub average_last: usize,
    /// Upper bound on the summed input frames of one batch.
    pub batch_frames: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ctc_weight: 0.1,
            label_smoothing: 0.1,
            peak_lr: 1e-3,
            warmup_steps: 2000,
            constant_lr: false,
            epochs: 60,
            average_last: 10,
            batch_frames: 4000,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: String| Err(TrainingError::BadConfig(m));
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return bad(format!("ctc_weight {} outside [0, 1]", self.ctc_weight));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.warmup_steps < 1 {
            return bad("warmup_steps must be >= 1".into());
        }
        if self.average_last > self.epochs || (self.epochs > 0 && self.average_last == 0) {
            return bad(format!("average_last {} must be in 1..={}", self.average_last, self.epochs));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if self.batch_frames == 0 || !(self.grad_clip > 0.0) {
            return bad("batch_frames and grad_clip must be positive".into());
        }
        Ok(())
    }

    pub fn lr(&self, step: u64) -> Result<f64, TrainingError> {
        if self.constant_lr {
            if step == 0 {
                return Err(TrainingError::BadStep);
            }
            Ok(self.peak_lr)
        } else {
            lr_at(step, self.peak_lr, self.warmup_steps)
        }
    }
}

/// `peak · min(step/warmup, sqrt(warmup/step))`.
pub fn lr_at(step: u64, peak: f64, warmup: u64) -> Result<f64, TrainingError> {
    if step == 0 || warmup == 0 {
        return Err(TrainingError::BadStep);
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(peak * (s / w).min((w / s).sqrt()))
}

/// `λ·ctc + (1−λ)·att`.
pub fn joint_loss<T: Scalar>(ctc: T, att: T, lambda: f64) -> T {
    T::of(lambda) * ctc + T::of(1.0 - lambda) * att
}

/// Summed label-smoothed cross-entropy over non-pad rows of a `L×V`
/// log-probability matrix, the number of rows counted, and the gradient
/// of the sum. The smoothed target is `(1−ε)·onehot + ε/V`.
pub fn smoothed_ce_sum<T: Scalar>(log_probs: &Tensor<T>, targets: &[usize], eps: f64) -> Result<(f64, usize, Vec<T>), TrainingError> {
    let (rows, v) = log_probs.dims2()?;
    if rows != targets.len() {
        return Err(TrainingError::ShapeMismatch(format!("{rows} decoder rows for {} targets", targets.len())));
    }
    let mut grad = vec![T::zero(); rows * v];
    let (mut total, mut count) = (0.0, 0);
    let uniform = eps / v as f64;
    for (i, &y) in targets.iter().enumerate() {
        if y == PAD {
            continue;
        }
        if y >= v {
            return Err(TrainingError::BadLabel { label: y, vocab: v });
        }
        let row = log_probs.row(i);
        let mut sum_lp = 0.0;
        for (k, &lp) in row.iter().enumerate() {
            sum_lp += lp.to_f64c();
            grad[i * v + k] = T::of(-uniform);
        }
        total += -(1.0 - eps) * row[y].to_f64c() - uniform * sum_lp;
        grad[i * v + y] -= T::of(1.0 - eps);
        count += 1;
    }
    Ok((total, count, grad))
}

fn log_softmax_rows(logits: &Tensor<f64>) -> Result<Tensor<f64>, TrainingError> {
    let (_, v) = logits.dims2()?;
    let mut out = Vec::with_capacity(logits.len());
    for r in logits.data().chunks(v) {
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z = m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        out.extend(r.iter().map(|x| x - z));
    }
    Ok(Tensor::new(logits.shape().to_vec(), out)?)
}

/// Mean label-smoothed cross-entropy of decoder logits against teacher-forced
/// targets (which end with `<sos/eos>`); pad targets are ignored.
pub fn attention_loss<T: Scalar>(logits: &Tensor<T>, targets: &[usize], eps: f64) -> Result<T, TrainingError> {
    let lp = log_softmax_rows(&logits.cast())?;
    let (sum, count, _) = smoothed_ce_sum(&lp, targets, eps)?;
    Ok(T::of(if count == 0 { 0.0 } else { sum / count as f64 }))
}
