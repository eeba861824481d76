//! Masked-reconstruction pretraining and task fine-tuning.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{class_indices, evaluate_metrics, EvalReport, BALANCED_ACCURACY, RMSE};
use super::optim::{adamw_step, cosine_lr, AdamWConfig, OptimState, Schedule};
use crate::data_io::Sample;
use crate::dsp::PatchedSignal;
use crate::error::{Error, Result};
use crate::model::{sample_mask, Batch, MaskSpec, Model, TaskKind};
use crate::numeric::{Graph, Mode, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// When set, training stops after exactly this many optimizer steps and
    /// `epochs` is raised if needed to reach it.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// Cosine cycle in epochs; defaults to the number of epochs run.
    pub cycle_epochs: Option<usize>,
    pub optim: AdamWConfig,
    pub shuffle: bool,
    /// Keep each sample's mask fixed across epochs instead of redrawing it
    /// every step.
    pub fixed_masks: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            steps: None,
            batch_size: 128,
            lr: 5e-4,
            min_lr: 1e-5,
            cycle_epochs: Some(40),
            optim: AdamWConfig::with_weight_decay(5e-2),
            shuffle: true,
            fixed_masks: false,
        }
    }
}

impl PretrainConfig {
    /// 200 steps at batch 16. The learning rate is doubled relative to the
    /// full-scale default because the run is a small fraction of 40 epochs.
    pub fn desk() -> Self {
        Self {
            steps: Some(200),
            batch_size: 16,
            lr: 1e-3,
            cycle_epochs: None,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub cycle_epochs: Option<usize>,
    pub optim: AdamWConfig,
    /// Applied to multi-class cross-entropy targets only.
    pub label_smoothing: f64,
    pub shuffle: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-4,
            min_lr: 1e-6,
            cycle_epochs: Some(50),
            optim: AdamWConfig::with_weight_decay(1e-2),
            label_smoothing: 0.1,
            shuffle: true,
        }
    }
}

impl FinetuneConfig {
    /// Full-scale optimizer settings with batch 16 for small corpora.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub trace: Vec<StepRecord>,
    /// Mean validation reconstruction loss per epoch (empty without a
    /// validation set).
    pub val_losses: Vec<f64>,
    /// Epoch whose parameters the model holds on return.
    pub selected_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Balanced accuracy (classification) or RMSE (regression) on the
    /// validation set; NaN without one.
    pub val_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub test_report: Option<EvalReport>,
}

impl FinetuneOutcome {
    /// First epoch (1-based count) whose validation balanced accuracy reached
    /// `threshold`.
    pub fn epochs_to_reach(&self, threshold: f64) -> Option<usize> {
        self.epochs
            .iter()
            .position(|e| e.val_score >= threshold)
            .map(|i| i + 1)
    }
}

/// `step,epoch,lr,loss,grad_norm` rows.
pub fn trace_csv(trace: &[StepRecord]) -> String {
    let mut out = String::from("step,epoch,lr,loss,grad_norm\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.epoch, r.lr, r.loss, r.grad_norm
        ));
    }
    out
}

/// `epoch,lr,train_loss,val_score` rows.
pub fn epochs_csv(epochs: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_score\n");
    for r in epochs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.lr, r.train_loss, r.val_score
        ));
    }
    out
}

fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::ConfigInvalid("batch size must be at least 1".into()));
    }
    Ok(())
}

fn epoch_order(n: usize, shuffle: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order
}

/// Mask seed for sample `index` that does not depend on the step.
fn fixed_mask_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn signals<'a>(samples: &'a [Sample], idx: &[usize]) -> Vec<&'a PatchedSignal> {
    idx.iter().map(|&i| &samples[i].signal).collect()
}

/// Eval-mode reconstruction loss averaged over samples, with per-sample
/// masks that depend only on `seed` and the sample index.
pub fn validation_loss(
    model: &Model,
    samples: &[Sample],
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    check_batch_size(batch_size)?;
    let mut total = 0.0;
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let batch = Batch::new(&signals(samples, chunk))?;
        let masks = chunk
            .iter()
            .map(|&i| {
                sample_mask(
                    batch.shape.segments,
                    model.config.mask_ratio,
                    fixed_mask_seed(seed, i),
                )
            })
            .collect::<Result<Vec<MaskSpec>>>()?;
        let mut g = Graph::eval();
        let loss = model.pretrain_loss(&mut g, &model.params, &batch, &masks)?;
        total += g.value(loss).data()[0] * chunk.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Masked-reconstruction pretraining. Per step: draw a mask per sample,
/// reconstruct, back-propagate, clip, AdamW. The learning rate follows a
/// cosine schedule advanced once per epoch. With a validation set the
/// parameters of the epoch with the lowest validation loss are kept.
pub fn pretrain(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    pretrain_with(model, train, val, cfg, seed, &mut |_| {})
}

/// [`pretrain`] with a callback invoked after every step.
pub fn pretrain_with(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    cfg: &PretrainConfig,
    seed: u64,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<PretrainOutcome> {
    check_batch_size(cfg.batch_size)?;
    if train.is_empty() {
        return Err(Error::EmptyInput("no pretraining samples".into()));
    }
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let epochs = match cfg.steps {
        Some(s) => s.div_ceil(per_epoch),
        None => cfg.epochs,
    };
    let total_steps = cfg.steps.unwrap_or(epochs * per_epoch);
    let sch = Schedule::new(
        cfg.lr,
        cfg.min_lr,
        cfg.cycle_epochs.unwrap_or(epochs).max(1),
    )?;
    let mut st = OptimState::new(&model.params, cfg.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ratio = model.config.mask_ratio;

    let mut trace = Vec::with_capacity(total_steps);
    let mut val_losses = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut selected_epoch = 0;
    'epochs: for epoch in 0..epochs {
        let lr = cosine_lr(epoch, &sch);
        let order = epoch_order(train.len(), cfg.shuffle, &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if trace.len() == total_steps {
                break 'epochs;
            }
            let batch = Batch::new(&signals(train, chunk))?;
            let masks = chunk
                .iter()
                .map(|&i| {
                    let s = if cfg.fixed_masks {
                        fixed_mask_seed(seed, i)
                    } else {
                        rng.next_u64()
                    };
                    sample_mask(batch.shape.segments, ratio, s)
                })
                .collect::<Result<Vec<MaskSpec>>>()?;
            let mut g = Graph::new(Mode::Train, rng.next_u64());
            let loss = model.pretrain_loss(&mut g, &model.params, &batch, &masks)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::DivergenceDetected {
                    step: trace.len(),
                    loss: value,
                });
            }
            model.params.zero_grad();
            g.backward(loss)?.accumulate_into(&g, &mut model.params);
            let grad_norm = adamw_step(&mut model.params, &mut st, lr)?;
            let rec = StepRecord {
                step: trace.len(),
                epoch,
                lr,
                loss: value,
                grad_norm,
            };
            on_step(&rec);
            trace.push(rec);
        }
        selected_epoch = epoch;
        if !val.is_empty() {
            let v = validation_loss(model, val, cfg.batch_size, seed)?;
            val_losses.push(v);
            if best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, epoch, model.params.clone()));
            }
        }
    }
    if let Some((_, epoch, params)) = best {
        model.params = params;
        selected_epoch = epoch;
    }
    Ok(PretrainOutcome {
        trace,
        val_losses,
        selected_epoch,
    })
}

/// Validates targets against the task: class indices for classification,
/// finite values for regression.
pub fn check_targets(samples: &[Sample], kind: TaskKind) -> Result<()> {
    let targets: Vec<f64> = samples.iter().map(|s| s.label).collect();
    match kind {
        TaskKind::Classification { classes } => class_indices(&targets, classes).map(|_| ()),
        TaskKind::Regression => match targets.iter().find(|t| !t.is_finite()) {
            Some(t) => Err(Error::LabelMismatch(format!("regression target {t}"))),
            None => Ok(()),
        },
    }
}

/// Eval-mode task outputs `[N, outputs]` computed `batch_size` samples at a
/// time.
pub fn predict_all(model: &Model, samples: &[Sample], batch_size: usize) -> Result<Tensor> {
    check_batch_size(batch_size)?;
    let outputs = model.head.as_ref().map_or(1, |h| h.kind.outputs());
    let mut data = Vec::with_capacity(samples.len() * outputs);
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&PatchedSignal> = chunk.iter().map(|s| &s.signal).collect();
        data.extend_from_slice(model.predict(&refs)?.data());
    }
    Tensor::new(vec![samples.len(), outputs], data)
}

pub fn evaluate(model: &Model, samples: &[Sample], batch_size: usize) -> Result<EvalReport> {
    let kind = model
        .head
        .as_ref()
        .ok_or_else(|| Error::HeadMismatch("model has no task head".into()))?
        .kind;
    if samples.is_empty() {
        return Err(Error::EmptyInput("no samples to evaluate".into()));
    }
    check_targets(samples, kind)?;
    let outputs = predict_all(model, samples, batch_size)?;
    let targets: Vec<f64> = samples.iter().map(|s| s.label).collect();
    evaluate_metrics(&outputs, &targets, kind)
}

/// Selection score on the validation set; larger is better.
fn selection_score(model: &Model, val: &[Sample], batch_size: usize) -> Result<(f64, f64)> {
    let report = evaluate(model, val, batch_size)?;
    Ok(match report.task {
        TaskKind::Classification { .. } => {
            let b = report.get(BALANCED_ACCURACY).unwrap_or(0.0);
            (b, b)
        }
        TaskKind::Regression => {
            let r = report.get(RMSE).unwrap_or(f64::INFINITY);
            (-r, r)
        }
    })
}

/// Full-model fine-tuning. A head for `kind` is attached (seeded by `seed`)
/// unless a matching one is present. The parameters of the epoch with the
/// best validation score are kept and scored on `test`.
pub fn finetune(
    model: &mut Model,
    kind: TaskKind,
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    finetune_with(model, kind, train, val, test, cfg, seed, &mut |_| {})
}

/// [`finetune`] with a callback invoked after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn finetune_with(
    model: &mut Model,
    kind: TaskKind,
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    cfg: &FinetuneConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FinetuneOutcome> {
    check_batch_size(cfg.batch_size)?;
    let first = train
        .first()
        .ok_or_else(|| Error::EmptyInput("no fine-tuning samples".into()))?;
    for set in [train, val, test] {
        check_targets(set, kind)?;
    }
    let (c, n) = (first.signal.num_channels(), first.signal.num_segments());
    match &model.head {
        None => model.attach_head(kind, c, n, seed)?,
        Some(h) if h.kind == kind && h.channels == c && h.segments == n => {}
        Some(h) => {
            return Err(Error::HeadMismatch(format!(
                "attached head is {:?} for {}x{} tokens",
                h.kind, h.channels, h.segments
            )))
        }
    }
    let sch = Schedule::new(
        cfg.lr,
        cfg.min_lr,
        cfg.cycle_epochs.unwrap_or(cfg.epochs).max(1),
    )?;
    let mut st = OptimState::new(&model.params, cfg.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, &sch);
        let order = epoch_order(train.len(), cfg.shuffle, &mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::new(&signals(train, chunk))?;
            let targets: Vec<f64> = chunk.iter().map(|&i| train[i].label).collect();
            let mut g = Graph::new(Mode::Train, rng.next_u64());
            let loss =
                model.task_loss(&mut g, &model.params, &batch, &targets, cfg.label_smoothing)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::DivergenceDetected {
                    step: epoch,
                    loss: value,
                });
            }
            model.params.zero_grad();
            g.backward(loss)?.accumulate_into(&g, &mut model.params);
            adamw_step(&mut model.params, &mut st, lr)?;
            loss_sum += value * chunk.len() as f64;
        }
        let (score, reported) = if val.is_empty() {
            (f64::NEG_INFINITY, f64::NAN)
        } else {
            selection_score(model, val, cfg.batch_size)?
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_score: reported,
        };
        on_epoch(&rec);
        epochs.push(rec);
        // Without validation data the last epoch wins.
        if val.is_empty() || best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, model.params.clone()));
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => 0,
    };
    let test_report = if test.is_empty() {
        None
    } else {
        Some(evaluate(model, test, cfg.batch_size)?)
    };
    Ok(FinetuneOutcome {
        epochs,
        best_epoch,
        test_report,
    })
}
