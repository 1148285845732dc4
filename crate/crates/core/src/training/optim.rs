use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use super::TrainingError;
use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::model::ModelParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter plus the update count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        Self { step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

/// One bias-corrected Adam update. Parameters without an entry in `grads`
/// are updated as if their gradient were zero.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Vec<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TrainingError> {
    for (name, g) in grads {
        match params.get(name) {
            Some(p) if p.len() == g.len() => {}
            Some(p) => return Err(TrainingError::ShapeMismatch(format!("{name}: gradient {} vs parameter {}", g.len(), p.len()))),
            None => return Err(TrainingError::ShapeMismatch(format!("gradient for unknown parameter {name}"))),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    for (name, p) in params.iter_mut() {
        let n = p.len();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
        if m.len() != n || v.len() != n {
            return Err(TrainingError::ShapeMismatch(format!("{name}: optimizer moments sized {} for {n}", m.len())));
        }
        let g = grads.get(name);
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(T::zero(), |g| g[i]);
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut BTreeMap<String, Vec<T>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g.to_f64c().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Epochs averaged at the end of training: the last `average_last` of `epochs`.
pub fn averaging_window(epochs: usize, average_last: usize) -> RangeInclusive<usize> {
    let k = average_last.min(epochs);
    (epochs + 1 - k.max(1))..=epochs
}

/// Elementwise arithmetic mean. Each element's values are sorted and summed
/// in f64 as offsets from their minimum, so the result does not depend on
/// input order and identical inputs average to themselves exactly.
pub fn average_params<T: Scalar>(inputs: &[&ModelParams<T>]) -> Result<ModelParams<T>, TrainingError> {
    let first = inputs.first().ok_or_else(|| TrainingError::BadConfig("nothing to average".into()))?;
    for other in &inputs[1..] {
        let same = other.len() == first.len()
            && first.iter().all(|(name, t)| other.get(name).is_some_and(|o| o.shape() == t.shape()));
        if !same {
            return Err(TrainingError::FingerprintMismatch("parameter set".into(), "differs".into()));
        }
    }
    let n = inputs.len() as f64;
    let mut out = ModelParams::new();
    let mut vals = Vec::with_capacity(inputs.len());
    for (name, t) in first.iter() {
        let sources: Vec<&[T]> = inputs.iter().map(|p| p.get(name).expect("checked above").data()).collect();
        let data = (0..t.len())
            .map(|i| {
                vals.clear();
                vals.extend(sources.iter().map(|s| s[i].to_f64c()));
                vals.sort_by(f64::total_cmp);
                let lo = vals[0];
                T::of(lo + vals.iter().map(|v| v - lo).sum::<f64>() / n)
            })
            .collect();
        out.insert(name, Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(out)
}

/// Averages checkpoints of one architecture; the result records every
/// source epoch.
pub fn average_checkpoints<T: Scalar>(checkpoints: &[Checkpoint<T>]) -> Result<Checkpoint<T>, TrainingError> {
    let first = checkpoints.first().ok_or_else(|| TrainingError::BadConfig("nothing to average".into()))?;
    let fp = first.fingerprint();
    if let Some(bad) = checkpoints.iter().find(|c| c.fingerprint() != fp) {
        return Err(TrainingError::FingerprintMismatch(fp, bad.fingerprint()));
    }
    let params = average_params(&checkpoints.iter().map(|c| &c.params).collect::<Vec<_>>())?;
    let mut epochs: Vec<usize> = checkpoints.iter().flat_map(|c| c.averaged_epochs.iter().copied()).collect();
    epochs.sort_unstable();
    Ok(Checkpoint { params, averaged_epochs: epochs, ..first.clone() })
}
