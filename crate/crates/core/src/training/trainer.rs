use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adam_step, average_params, averaging_window, clip_grad_norm, AdamConfig, OptimizerState};
use super::{ctc_loss, ctc_min_frames, smoothed_ce_sum, TrainConfig, TrainingError};
use crate::autodiff::{Tensor, Var};
use crate::model::{ArchConfig, ModelParams, Session};
use crate::phoneset::{BLANK, PAD, SOS_EOS};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, mix};

/// One training utterance: `frames×feat_dim` features and target ids
/// (without `<sos/eos>`), shared by both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub id: String,
    pub features: Tensor<T>,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ctc: f64,
    pub att: f64,
    pub joint: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    /// `step` or `epoch`.
    pub kind: String,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss_ctc: f64,
    pub loss_att: f64,
    pub loss_joint: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Average over the final epochs, or the initial parameters when
    /// `epochs == 0`.
    pub params: ModelParams<T>,
    /// Snapshots of the averaged epochs only; earlier epochs are dropped
    /// to bound memory.
    pub epoch_params: Vec<(usize, ModelParams<T>)>,
    pub averaged_epochs: Vec<usize>,
    pub metrics: Vec<MetricRecord>,
    pub skipped: Vec<String>,
    pub steps: u64,
}

/// Why an example cannot be trained on, if it cannot.
pub(crate) fn check_example<T: Scalar>(arch: &ArchConfig, ex: &Example<T>) -> Result<(), String> {
    let (frames, dim) = ex.features.dims2().map_err(|e| e.to_string())?;
    if dim != arch.feat_dim {
        return Err(format!("feature dim {dim}, model expects {}", arch.feat_dim));
    }
    if let Some(&bad) = ex.targets.iter().find(|&&k| k == BLANK || k == SOS_EOS || k == PAD || k >= arch.vocab_size_out) {
        return Err(format!("label {bad} not allowed"));
    }
    let sub = arch.subsampled_len(frames);
    let needed = ctc_min_frames(&ex.targets);
    if sub < needed.max(1) {
        return Err(format!("{sub} encoder frames for a target needing {needed}"));
    }
    if ex.targets.len() + 1 > arch.max_dec_len {
        return Err(format!("target length {} exceeds decoder limit", ex.targets.len()));
    }
    Ok(())
}

struct UttLoss {
    ctc_node: Var,
    att_node: Var,
    ctc: f64,
    att_sum: f64,
    tokens: usize,
}

fn utterance_loss<T: Scalar>(s: &mut Session<'_, T>, ex: &Example<T>, smoothing: f64) -> Result<UttLoss, TrainingError> {
    let frames = ex.features.shape()[0];
    let enc = s.encode(&ex.features, frames)?;
    let lp = s.ctc_head(enc)?;
    let (nll, g) = ctc_loss(s.tape.value(lp), &ex.targets, BLANK)?;
    let ctc_node = s.tape.custom_scalar(lp, nll, g.into_data())?;
    let mut prefix = Vec::with_capacity(ex.targets.len() + 1);
    prefix.push(SOS_EOS);
    prefix.extend_from_slice(&ex.targets);
    let logits = s.decoder_forward(enc, &prefix)?;
    let alp = s.tape.log_softmax(logits, 1)?;
    let mut out = ex.targets.clone();
    out.push(SOS_EOS);
    let (att_sum, tokens, grad) = smoothed_ce_sum(s.tape.value(alp), &out, smoothing)?;
    let att_node = s.tape.custom_scalar(alp, T::of(att_sum), grad)?;
    Ok(UttLoss { ctc_node, att_node, ctc: nll.to_f64c(), att_sum, tokens })
}

/// Mean losses without dropout: CTC per utterance, attention per token.
/// Examples that fail the length preconditions are ignored.
pub fn evaluate_loss<T: Scalar>(
    params: &ModelParams<T>,
    arch: &ArchConfig,
    examples: &[Example<T>],
    cfg: &TrainConfig,
) -> Result<LossBreakdown, TrainingError> {
    let (mut ctc, mut att, mut utts, mut tokens) = (0.0, 0.0, 0usize, 0usize);
    for ex in examples.iter().filter(|e| check_example(arch, e).is_ok()) {
        let mut s = Session::inference(params, arch);
        let u = utterance_loss(&mut s, ex, cfg.label_smoothing)?;
        ctc += u.ctc;
        att += u.att_sum;
        utts += 1;
        tokens += u.tokens;
    }
    let ctc = if utts == 0 { 0.0 } else { ctc / utts as f64 };
    let att = if tokens == 0 { 0.0 } else { att / tokens as f64 };
    Ok(LossBreakdown { ctc, att, joint: cfg.ctc_weight * ctc + (1.0 - cfg.ctc_weight) * att })
}

/// Length-sorted batches under a total-frame budget, in an order shuffled
/// by `seed` and `epoch`. A single over-budget utterance forms its own batch.
pub fn make_batches(lengths: &[usize], budget: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut frames = 0;
    for i in order {
        if !cur.is_empty() && frames + lengths[i] > budget {
            batches.push(std::mem::take(&mut cur));
            frames = 0;
        }
        frames += lengths[i];
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["batches", &epoch.to_string()]));
    batches.shuffle(&mut rng);
    batches
}

fn accumulate<T: Scalar>(total: &mut BTreeMap<String, Vec<T>>, part: BTreeMap<String, Vec<T>>) {
    for (name, g) in part {
        match total.get_mut(&name) {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            None => {
                total.insert(name, g);
            }
        }
    }
}

/// Runs `cfg.epochs` epochs of joint CTC/attention training with Adam.
///
/// Utterances violating the loss preconditions are skipped and listed in
/// the outcome. Each batch's gradient is the sum of per-utterance gradients
/// of `λ/B·ctc_u + (1−λ)/N·att_u`, where `B` is the batch size and `N` its
/// token count, accumulated in batch order.
pub fn train_loop<T: Scalar>(
    init: ModelParams<T>,
    arch: &ArchConfig,
    train: &[Example<T>],
    dev: &[Example<T>],
    cfg: &TrainConfig,
    stage: &str,
) -> Result<TrainOutcome<T>, TrainingError> {
    cfg.validate()?;
    arch.validate()?;
    init.check_against(arch)?;
    let mut skipped = Vec::new();
    let mut usable = Vec::new();
    for ex in train {
        match check_example(arch, ex) {
            Ok(()) => usable.push(ex),
            Err(why) => {
                log::warn!("{stage}: skipping {}: {why}", ex.id);
                skipped.push(ex.id.clone());
            }
        }
    }
    if !skipped.is_empty() {
        log::warn!("{stage}: skipped {} of {} utterances", skipped.len(), train.len());
    }
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { params: init, epoch_params: Vec::new(), averaged_epochs: Vec::new(), metrics: Vec::new(), skipped, steps: 0 });
    }
    if usable.is_empty() {
        return Err(TrainingError::NoTrainableData { skipped: skipped.len() });
    }
    let lengths: Vec<usize> = usable.iter().map(|e| e.features.shape()[0]).collect();
    let window = averaging_window(cfg.epochs, cfg.average_last);
    let adam = AdamConfig::default();
    let mut params = init;
    let mut opt = OptimizerState::new();
    let mut metrics = Vec::new();
    let mut kept = Vec::new();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let (mut e_ctc, mut e_att, mut e_joint, mut e_batches) = (0.0, 0.0, 0.0, 0usize);
        for batch in make_batches(&lengths, cfg.batch_frames, cfg.seed, epoch) {
            step += 1;
            let lr = cfg.lr(step)?;
            let n_tok: usize = batch.iter().map(|&i| usable[i].targets.len() + 1).sum();
            let (wc, wa) = (cfg.ctc_weight / batch.len() as f64, (1.0 - cfg.ctc_weight) / n_tok as f64);
            let mut grads = BTreeMap::new();
            let (mut b_ctc, mut b_att) = (0.0, 0.0);
            for (pos, &i) in batch.iter().enumerate() {
                let mut s = Session::training(&params, arch, Some(mix(mix(cfg.seed, step), pos as u64)));
                let u = utterance_loss(&mut s, usable[i], cfg.label_smoothing)?;
                let c = s.tape.scale(u.ctc_node, T::of(wc))?;
                let a = s.tape.scale(u.att_node, T::of(wa))?;
                let total = s.tape.add(c, a)?;
                s.tape.backward(total)?;
                accumulate(&mut grads, s.gradients());
                b_ctc += u.ctc;
                b_att += u.att_sum;
            }
            let (l_ctc, l_att) = (b_ctc / batch.len() as f64, b_att / n_tok as f64);
            let l_joint = cfg.ctc_weight * l_ctc + (1.0 - cfg.ctc_weight) * l_att;
            if !l_joint.is_finite() {
                return Err(TrainingError::Diverged { step });
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            adam_step(&mut params, &grads, &mut opt, lr, &adam)?;
            metrics.push(MetricRecord {
                stage: stage.to_string(),
                kind: "step".into(),
                epoch,
                step,
                lr,
                loss_ctc: l_ctc,
                loss_att: l_att,
                loss_joint: l_joint,
                dev_loss: None,
            });
            e_ctc += l_ctc;
            e_att += l_att;
            e_joint += l_joint;
            e_batches += 1;
        }
        let dev_loss = if dev.is_empty() { None } else { Some(evaluate_loss(&params, arch, dev, cfg)?.joint) };
        let nb = e_batches as f64;
        log::info!("{stage}: epoch {epoch} step {step} loss {:.4} dev {:?}", e_joint / nb, dev_loss);
        metrics.push(MetricRecord {
            stage: stage.to_string(),
            kind: "epoch".into(),
            epoch,
            step,
            lr: cfg.lr(step)?,
            loss_ctc: e_ctc / nb,
            loss_att: e_att / nb,
            loss_joint: e_joint / nb,
            dev_loss,
        });
        if window.contains(&epoch) {
            kept.push((epoch, params.clone()));
        }
    }
    let averaged = average_params(&kept.iter().map(|(_, p)| p).collect::<Vec<_>>())?;
    Ok(TrainOutcome {
        params: averaged,
        averaged_epochs: kept.iter().map(|(e, _)| *e).collect(),
        epoch_params: kept,
        metrics,
        skipped,
        steps: step,
    })
}
