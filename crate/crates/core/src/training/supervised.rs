use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::datamodel::{ModalitySpec, Segment, Stage, TrainConfig};
use crate::encoders::{EncoderConfig, HeadKind, Model};
use crate::error::{Error, Result};
use crate::nn::soft_cross_entropy;
use crate::preprocess::norm_stats_for_segments;
use crate::rng::derive_seed;

use super::data::{
    accuracy, apply_mixup, argmax_rows, draw_mixup, epoch_order, labeled_inputs, one_hot, Inputs, LabeledAugment,
    SpectralSet,
};
use super::schedule::cosine_lr;
use super::{diverged, divergence, expect_stage, scalar, Adam, EpochRecord, RunOptions, TrainOutcome};

/// Keeps the weights of the epoch with the best selection accuracy and
/// signals early stopping.
pub(crate) struct BestTracker {
    prefix: &'static str,
    patience: Option<usize>,
    best: Option<(f64, usize, BTreeMap<String, Tensor>)>,
}

impl BestTracker {
    pub(crate) fn new(prefix: &'static str, patience: Option<usize>) -> Self {
        Self {
            prefix,
            patience,
            best: None,
        }
    }

    /// Returns `true` when training should stop.
    pub(crate) fn observe(&mut self, epoch: usize, score: f64, model: &Model) -> Result<bool> {
        let improved = self.best.as_ref().is_none_or(|(b, _, _)| score > *b);
        if improved {
            self.best = Some((score, epoch, model.store.snapshot(self.prefix)?));
            return Ok(false);
        }
        let best_epoch = self.best.as_ref().map_or(0, |b| b.1);
        Ok(self.patience.is_some_and(|p| epoch - best_epoch >= p))
    }

    pub(crate) fn restore(self, model: &Model) -> Result<Option<usize>> {
        match self.best {
            Some((_, epoch, snapshot)) => {
                model.store.restore(&snapshot)?;
                Ok(Some(epoch))
            }
            None => Ok(None),
        }
    }
}

pub(crate) fn distinct_classes(labels: &[usize]) -> usize {
    let mut seen: Vec<usize> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Clean standardized inputs split into evaluation batches.
pub(crate) fn eval_batches(set: &SpectralSet, model: &Model, batch: usize) -> Result<Vec<(Vec<usize>, Inputs)>> {
    let indices: Vec<usize> = (0..set.len()).collect();
    indices
        .chunks(batch.max(1))
        .map(|c| {
            Ok((
                c.to_vec(),
                labeled_inputs(set, c, &model.specs, &model.norm, model.store.dtype(), None)?,
            ))
        })
        .collect()
}

fn evaluate(model: &Model, batches: &[(Vec<usize>, Inputs)], labels: &[usize]) -> Result<Option<f64>> {
    if labels.is_empty() {
        return Ok(None);
    }
    let mut pred = Vec::with_capacity(labels.len());
    for (_, inputs) in batches {
        pred.extend(argmax_rows(&model.logits(inputs)?.detach())?);
    }
    Ok(Some(accuracy(&pred, labels)))
}

/// Trains encoder and fusion head end to end with cross-entropy on
/// mixup-softened targets, keeping the weights of the best validation epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised(
    train: &[Segment],
    val: &[Segment],
    specs: &[ModalitySpec],
    num_classes: usize,
    config: &TrainConfig,
    encoder_config: &EncoderConfig,
    options: &RunOptions,
) -> Result<TrainOutcome> {
    expect_stage(config.stage, Stage::Supervised)?;
    config.check()?;
    options.augment.check()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let train_set = SpectralSet::from_segments(train, specs)?;
    let val_set = SpectralSet::from_segments(val, specs)?;
    let train_labels = train_set.labels(num_classes)?;
    let val_labels = val_set.labels(num_classes)?;
    if distinct_classes(&train_labels) < 2 {
        return Err(Error::SingleClassDataset);
    }
    let mut model = Model::new(specs, encoder_config, Stage::Supervised, options.dtype)?;
    model.norm = norm_stats_for_segments(train, specs)?;
    model.attach_head(
        HeadKind::SupervisedFusion,
        num_classes,
        derive_seed(encoder_config.seed, "head", &[]),
    )?;
    let aug = LabeledAugment::new(Stage::Supervised, &config.augmentations, &options.augment);
    let mut opt = Adam::new(config.optimizer, model.trainable_vars(Stage::Supervised), config.weight_decay);
    let train_eval = eval_batches(&train_set, &model, options.eval_batch)?;
    let val_eval = eval_batches(&val_set, &model, options.eval_batch)?;
    let mut tracker = BestTracker::new("", config.patience);
    let mut history = Vec::new();
    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config)?;
        let snapshot = model.store.snapshot("")?;
        let order = epoch_order(train_set.len(), config.seed, "supervised-order", epoch);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let step = || -> Result<Tensor> {
                let inputs = labeled_inputs(
                    &train_set,
                    batch,
                    specs,
                    &model.norm,
                    options.dtype,
                    Some((&aug, epoch, config.seed)),
                )?;
                let labels: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
                let targets = one_hot(&labels, num_classes, options.dtype)?;
                let (inputs, targets) = if aug.mixup {
                    let draw = draw_mixup(
                        batch.len(),
                        aug.params.mixup_alpha,
                        derive_seed(config.seed, "supervised-mixup", &[epoch as u64, b as u64]),
                    );
                    apply_mixup(&inputs, &targets, &draw)?
                } else {
                    (inputs, targets)
                };
                soft_cross_entropy(&model.logits(&inputs)?, &targets)
            };
            let loss = step().map_err(|e| divergence(e, epoch, &model, &snapshot))?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(diverged(epoch, &model, &snapshot));
            }
            opt.step(&loss.backward()?, lr)?;
            loss_sum += value * batch.len() as f64;
        }
        let train_acc = evaluate(&model, &train_eval, &train_labels)?;
        let val_acc = evaluate(&model, &val_eval, &val_labels)?;
        let record = EpochRecord {
            epoch,
            stage: Stage::Supervised,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc,
            val_acc,
            shared: None,
            private: None,
            orth: None,
        };
        log::info!(
            "supervised epoch {epoch}: loss {:.4}, train acc {:.3}, val acc {}",
            record.train_loss,
            train_acc.unwrap_or(0.0),
            val_acc.map_or("-".to_string(), |v| format!("{v:.3}"))
        );
        history.push(record);
        let score = val_acc.or(train_acc).unwrap_or(0.0);
        if tracker.observe(epoch, score, &model)? {
            break;
        }
    }
    let best_epoch = tracker.restore(&model)?;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}
