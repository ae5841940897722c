//! Frozen-backbone fine-tuning: BCE loss, AdamW with decoupled weight
//! decay, a step learning-rate schedule, and the epoch loop with held-out
//! evaluation and best-checkpoint tracking.
//!
//! Training is bit-deterministic for a fixed seed: the shuffle order is
//! derived per epoch, per-sample gradients are computed independently (in
//! parallel) and merged in sample order, and the optimizer touches only the
//! trainable set.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::patchify_mask;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics;
use crate::rng::SplitMix64;
use crate::tensor::{grad_check_against, Tape, Tensor, Var};
use crate::variants::PeftModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adamw: AdamWParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            step_size: 10,
            gamma: 0.5,
            epochs: 100,
            batch_size: 8,
            seed: 42,
            adamw: AdamWParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::InvalidConfig(format!("lr0 {} must be positive", self.lr0)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!("gamma {} must be in (0, 1]", self.gamma)));
        }
        if self.step_size == 0 {
            return Err(Error::InvalidConfig("step_size must be at least 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// lr0 · gamma^⌊epoch / step_size⌋ — piecewise constant, non-increasing for
/// gamma ≤ 1.
pub fn step_lr(lr0: f64, epoch: usize, step_size: usize, gamma: f64) -> f64 {
    lr0 * gamma.powi((epoch / step_size) as i32)
}

/// Mean binary cross-entropy from logits. Targets must be exactly 0 or 1;
/// the computation uses the stable form max(z,0) − z·t + ln(1+e^{−|z|}).
pub fn bce_loss(tape: &mut Tape, logits: Var, targets: &[f64]) -> Result<Var> {
    for (i, t) in targets.iter().enumerate() {
        if *t != 0.0 && *t != 1.0 {
            return Err(Error::Invalid(format!(
                "target {i} is {t}; binary cross-entropy requires 0/1 targets"
            )));
        }
    }
    tape.bce_with_logits(logits, targets)
}

/// AdamW with decoupled weight decay. Moment state exists only for
/// trainable parameters, keyed by parameter path.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub params: AdamWParams,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(params: AdamWParams) -> Self {
        AdamW {
            params,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the trainable set. Every trainable parameter must
    /// hold an accumulated gradient; frozen parameters are never touched.
    /// p ← p − lr·wd·p − lr·m̂/(√v̂ + ε), with bias-corrected moments.
    pub fn step(&mut self, model: &mut PeftModel, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.params.beta1.powi(t);
        let bias2 = 1.0 - self.params.beta2.powi(t);
        for (path, tensor) in model.trainable_params_mut() {
            let grad = tensor.grad().ok_or_else(|| {
                Error::Invalid(format!("trainable parameter '{path}' has no gradient"))
            })?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of '{path}'; aborting the epoch"
                )));
            }
            let grad = grad.to_vec();
            let m = self
                .first
                .entry(path.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .second
                .entry(path)
                .or_insert_with(|| vec![0.0; grad.len()]);
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                m[i] = self.params.beta1 * m[i] + (1.0 - self.params.beta1) * grad[i];
                v[i] = self.params.beta2 * v[i] + (1.0 - self.params.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= lr * self.params.weight_decay * data[i]
                    + lr * m_hat / (v_hat.sqrt() + self.params.eps);
            }
        }
        Ok(())
    }
}

// ── evaluation ──────────────────────────────────────────────────────

/// Mean over samples of the per-pixel mean of |σ(logit) − target|. Fans out
/// over samples; the reduction is in sample order, so the result does not
/// depend on thread count.
pub fn evaluate_mae(model: &PeftModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty dataset".into()));
    }
    let per_sample: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let probs = model.predict(&s.image)?;
            Ok(metrics::mae(&probs, s.mask.data()))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}

/// Average precision over all pixels of the dataset pooled together.
/// `None` when the dataset has no positive pixel.
pub fn evaluate_ap(model: &PeftModel, samples: &[Sample]) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty dataset".into()));
    }
    let parts: Vec<(Vec<f64>, Vec<f64>)> = samples
        .par_iter()
        .map(|s| {
            let probs = model.predict(&s.image)?;
            Ok((probs, s.mask.data().to_vec()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (p, l) in parts {
        scores.extend(p);
        labels.extend(l);
    }
    Ok(metrics::average_precision(&scores, &labels))
}

// ── training loop ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// Held-out MAE of the best epoch (the saved checkpoint).
    pub mae: f64,
    /// Held-out average precision at the best epoch, when defined.
    pub ap: Option<f64>,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
}

pub struct TrainOutcome {
    pub report: MetricReport,
    /// The model at its best held-out MAE.
    pub best_model: PeftModel,
}

/// Gradient of the batch-mean BCE for one sample, aligned with the
/// trainable subset of the binding order, plus the sample's loss.
fn sample_gradients(
    model: &PeftModel,
    sample: &Sample,
    trainable_mask: &[bool],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let logits = model.forward_bound(&mut tape, &vars, &sample.image)?;
    let targets = patchify_mask(&sample.mask, model.config())?;
    let loss = bce_loss(&mut tape, logits, &targets)?;
    let value = tape.value(loss)[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss on sample '{}'", sample.id)));
    }
    let mut grads = tape.backward(loss)?;
    let collected = vars
        .bindings
        .iter()
        .zip(trainable_mask)
        .filter(|(_, keep)| **keep)
        .map(|((_, var), _)| grads.take(*var))
        .collect();
    Ok((value, collected))
}

/// Fine-tune a frozen model. Evaluates the held-out split every epoch,
/// reports per-epoch records through `sink`, and returns the model restored
/// to its best held-out MAE.
pub fn train(
    model: &mut PeftModel,
    train_set: &[Sample],
    test_set: &[Sample],
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Invalid("training requires non-empty train and test splits".into()));
    }
    if model.freeze_mask.is_empty() {
        return Err(Error::Invalid(
            "model is not frozen; call freeze_backbone before training".into(),
        ));
    }
    let trainable_mask: Vec<bool> = model.params().iter().map(|(_, t)| t.requires_grad()).collect();
    let mut optimizer = AdamW::new(cfg.adamw);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, usize, Vec<(String, Tensor)>, Option<f64>)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut final_train_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = step_lr(cfg.lr0, epoch, cfg.step_size, cfg.gamma);
        let mut shuffle_rng = SplitMix64::derive(cfg.seed, 0x5u64.wrapping_add(epoch as u64));
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Vec<Vec<f64>>)> = batch
                .par_iter()
                .map(|&i| sample_gradients(model, &train_set[i], &trainable_mask))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            for (value, grads) in &results {
                loss_sum += value;
                for ((_, tensor), grad) in model.trainable_params_mut().into_iter().zip(grads) {
                    // mean over the batch, matching a batch-level loss
                    let scaled: Vec<f64> = grad.iter().map(|g| g * scale).collect();
                    tensor.accumulate_grad(&scaled);
                }
            }
            optimizer.step(model, lr)?;
            model.zero_grads();
        }
        let train_loss = loss_sum / train_set.len() as f64;
        final_train_loss = train_loss;

        let mae = evaluate_mae(model, test_set)?;
        let ap = evaluate_ap(model, test_set)?;
        if best.as_ref().map_or(true, |(m, ..)| mae < *m) {
            let snapshot: Vec<(String, Tensor)> = model
                .trainable_params()
                .into_iter()
                .map(|(p, t)| (p, t.clone()))
                .collect();
            best = Some((mae, epoch, snapshot, ap));
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            mae: Some(mae),
            ap,
            seconds: started.elapsed().as_secs_f64(),
        };
        sink(&record);
        epochs.push(record);
    }

    let (best_mae, best_epoch, snapshot, best_ap) = best.expect("at least one epoch ran");
    let mut best_model = model.clone();
    {
        let mut by_path: BTreeMap<String, Tensor> = snapshot.into_iter().collect();
        for (path, tensor) in best_model.trainable_params_mut() {
            let saved = by_path.remove(&path).expect("snapshot covers the trainable set");
            tensor.data_mut().copy_from_slice(saved.data());
        }
    }
    Ok(TrainOutcome {
        report: MetricReport {
            mae: best_mae,
            ap: best_ap,
            best_epoch,
            final_train_loss,
            epochs,
        },
        best_model,
    })
}

// ── whole-model gradient checking ───────────────────────────────────

/// Mean BCE over a batch, built on one tape with shared parameter leaves.
fn batch_loss_var(model: &PeftModel, tape: &mut Tape, batch: &[Sample]) -> Result<(Var, Vec<(String, Var)>)> {
    let vars = model.bind(tape);
    let mut total: Option<Var> = None;
    for sample in batch {
        let logits = model.forward_bound(tape, &vars, &sample.image)?;
        let targets = patchify_mask(&sample.mask, model.config())?;
        let loss = bce_loss(tape, logits, &targets)?;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    let sum = total.expect("non-empty batch");
    let mean = tape.mul_scalar(sum, 1.0 / batch.len() as f64);
    Ok((mean, vars.bindings))
}

fn batch_loss_value(model: &PeftModel, batch: &[Sample]) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = batch_loss_var(model, &mut tape, batch)?;
    Ok(tape.value(loss)[0])
}

fn grad_check_model_impl(
    model: &PeftModel,
    batch: &[Sample],
    step: f64,
    corrupt_first: bool,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("gradient check needs at least one sample".into()));
    }
    let trainable: Vec<(String, Tensor)> = model
        .trainable_params()
        .into_iter()
        .map(|(p, t)| (p, t.clone()))
        .collect();
    if trainable.is_empty() {
        return Err(Error::Invalid("no trainable parameters; freeze_backbone first".into()));
    }

    // analytic side: one tape over the whole batch
    let mut analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let (loss, bindings) = batch_loss_var(model, &mut tape, batch)?;
        let mut grads = tape.backward(loss)?;
        let by_path: BTreeMap<String, Var> = bindings.into_iter().collect();
        trainable
            .iter()
            .map(|(p, _)| grads.take(by_path[p]))
            .collect()
    };
    if corrupt_first {
        analytic[0][0] = analytic[0][0] * 2.0 + 1.0;
    }

    // numeric side: central differences through a work copy of the model
    let work = std::cell::RefCell::new(model.clone());
    let params: Vec<Tensor> = trainable.iter().map(|(_, t)| t.clone()).collect();
    grad_check_against(
        |probe| {
            let mut m = work.borrow_mut();
            for ((_, slot), src) in m.trainable_params_mut().into_iter().zip(probe) {
                slot.data_mut().copy_from_slice(src.data());
            }
            batch_loss_value(&m, batch)
        },
        &params,
        &analytic,
        step,
    )
}

/// Max relative error between the tape's gradients and central finite
/// differences, over every trainable parameter of the model on one batch.
pub fn grad_check_model(model: &PeftModel, batch: &[Sample], step: f64) -> Result<f64> {
    grad_check_model_impl(model, batch, step, false)
}

/// Move every parameter to a generic O(0.1–1) position before checking
/// gradients. At the zero-init state the new elements are exact no-ops and
/// deep query-path gradients underflow the relative-error floor, which
/// would make the comparison vacuous; a generic position exercises every
/// backward rule with measurable gradients.
pub fn randomize_for_gradcheck(model: &mut PeftModel, seed: u64) {
    let mut rng = SplitMix64::derive(seed, 0x6C);
    for (path, tensor) in model.params_mut() {
        let gain = path.ends_with("norm1.gain") || path.ends_with("norm2.gain");
        for v in tensor.data_mut() {
            *v = if gain {
                1.0 + rng.next_normal_trunc(0.1, 2.0)
            } else {
                rng.next_normal_trunc(0.3, 2.0)
            };
        }
    }
}

/// Negative-control fixture: same check with the first analytic gradient
/// entry deliberately corrupted. Used to prove the checker (and its CLI
/// exit code) actually detects a broken backward rule.
pub fn grad_check_model_corrupted(model: &PeftModel, batch: &[Sample], step: f64) -> Result<f64> {
    grad_check_model_impl(model, batch, step, true)
}
