use candle_core::Tensor;

use crate::checkpoint::Checkpoint;
use crate::datamodel::{Segment, Stage, TrainConfig};
use crate::encoders::{HeadKind, Model, HEAD_OUTPUT_PREFIX, HEAD_PREFIX};
use crate::error::{Error, Result};
use crate::nn::soft_cross_entropy;
use crate::rng::derive_seed;

use super::data::{
    accuracy, apply_mixup, argmax_rows, draw_mixup, epoch_order, labeled_inputs, one_hot, Inputs, LabeledAugment,
    SpectralSet,
};
use super::schedule::cosine_lr;
use super::supervised::{eval_batches, BestTracker};
use super::{diverged, expect_stage, scalar, Adam, EpochRecord, RunOptions, TrainOutcome};

/// Output of the frozen part of the model, detached from the graph.
fn frozen_features(model: &Model, stage: Stage, inputs: &Inputs) -> Result<Tensor> {
    let concat = Model::concat(&model.embed(inputs)?)?;
    let features = match stage {
        Stage::SupervisedFinetune => {
            let hidden = model.head()?.hidden.as_ref().ok_or_else(|| {
                Error::Config("supervised-fine-tune model lacks a fusion layer".into())
            })?;
            hidden.forward(&concat)?.relu()?
        }
        _ => concat,
    };
    Ok(features.detach())
}

fn cached_features(model: &Model, stage: Stage, set: &SpectralSet, batch: usize) -> Result<Option<Tensor>> {
    if set.is_empty() {
        return Ok(None);
    }
    let parts = eval_batches(set, model, batch)?
        .iter()
        .map(|(_, inputs)| frozen_features(model, stage, inputs))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(Tensor::cat(&parts, 0)?))
}

fn head_accuracy(model: &Model, features: &Option<Tensor>, labels: &[usize]) -> Result<Option<f64>> {
    match features {
        Some(f) => {
            let logits = model.head()?.output.forward(f)?.detach();
            Ok(Some(accuracy(&argmax_rows(&logits)?, labels)))
        }
        None => Ok(None),
    }
}

/// Trains only the final classification layer on frozen features.
#[allow(clippy::too_many_arguments)]
fn train_output_layer(
    mut model: Model,
    stage: Stage,
    train: &[Segment],
    val: &[Segment],
    num_classes: usize,
    config: &TrainConfig,
    options: &RunOptions,
) -> Result<TrainOutcome> {
    let specs = model.specs.clone();
    let train_set = SpectralSet::from_segments(train, &specs)?;
    let val_set = SpectralSet::from_segments(val, &specs)?;
    let train_labels = train_set.labels(num_classes)?;
    let val_labels = val_set.labels(num_classes)?;
    let aug = LabeledAugment::new(stage, &config.augmentations, &options.augment);
    let prefix = match stage {
        Stage::SupervisedFinetune => HEAD_OUTPUT_PREFIX,
        _ => HEAD_PREFIX,
    };
    let mut opt = Adam::new(config.optimizer, model.store.with_prefix(prefix), config.weight_decay);
    let train_features = cached_features(&model, stage, &train_set, options.eval_batch)?;
    let val_features = cached_features(&model, stage, &val_set, options.eval_batch)?;
    let mut tracker = BestTracker::new(prefix, config.patience);
    let mut history = Vec::new();
    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config)?;
        let snapshot = model.store.snapshot(prefix)?;
        let order = epoch_order(train_set.len(), config.seed, "finetune-order", epoch);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let labels: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let targets = one_hot(&labels, num_classes, options.dtype)?;
            let draw = aug.mixup.then(|| {
                draw_mixup(
                    batch.len(),
                    aug.params.mixup_alpha,
                    derive_seed(config.seed, "finetune-mixup", &[epoch as u64, b as u64]),
                )
            });
            let (features, targets) = if aug.is_identity() {
                let idx = Tensor::new(batch.iter().map(|&i| i as u32).collect::<Vec<_>>(), &candle_core::Device::Cpu)?;
                let cached = train_features.as_ref().ok_or(Error::EmptySubset)?;
                (cached.index_select(&idx, 0)?, targets)
            } else {
                let inputs = labeled_inputs(
                    &train_set,
                    batch,
                    &specs,
                    &model.norm,
                    options.dtype,
                    Some((&aug, epoch, config.seed)),
                )?;
                let (inputs, targets) = match &draw {
                    Some(d) => apply_mixup(&inputs, &targets, d)?,
                    None => (inputs, targets),
                };
                (frozen_features(&model, stage, &inputs)?, targets)
            };
            let loss = soft_cross_entropy(&model.head()?.output.forward(&features)?, &targets)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(diverged(epoch, &model, &snapshot));
            }
            opt.step(&loss.backward()?, lr)?;
            loss_sum += value * batch.len() as f64;
        }
        let train_acc = head_accuracy(&model, &train_features, &train_labels)?;
        let val_acc = head_accuracy(&model, &val_features, &val_labels)?;
        log::info!(
            "{stage} epoch {epoch}: loss {:.4}, train acc {:.3}",
            loss_sum / train_set.len() as f64,
            train_acc.unwrap_or(0.0)
        );
        history.push(EpochRecord {
            epoch,
            stage,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc,
            val_acc,
            shared: None,
            private: None,
            orth: None,
        });
        let score = val_acc.or(train_acc).unwrap_or(0.0);
        if tracker.observe(epoch, score, &model)? {
            break;
        }
    }
    let best_epoch = tracker.restore(&model)?;
    model.stage = stage;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

fn check_inputs(config: &TrainConfig, options: &RunOptions, subset: &[Segment], num_classes: usize) -> Result<()> {
    config.check()?;
    options.augment.check()?;
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    if num_classes == 0 {
        return Err(Error::Config("num_classes must be positive".into()));
    }
    Ok(())
}

/// Freezes a pre-trained encoder and trains a linear probe on the
/// concatenated modality embeddings.
pub fn finetune_linear(
    checkpoint: &Checkpoint,
    subset: &[Segment],
    val: &[Segment],
    num_classes: usize,
    config: &TrainConfig,
    options: &RunOptions,
) -> Result<TrainOutcome> {
    expect_stage(checkpoint.meta.stage, Stage::Pretrain)?;
    expect_stage(config.stage, Stage::Finetune)?;
    check_inputs(config, options, subset, num_classes)?;
    let mut model = checkpoint.to_model()?;
    model.attach_head(
        HeadKind::LinearProbe,
        num_classes,
        derive_seed(config.seed, "probe", &[]),
    )?;
    train_output_layer(model, Stage::Finetune, subset, val, num_classes, config, options)
}

/// Freezes a supervised model except for its final layer, which is
/// re-initialized for `num_classes` and trained like the linear probe.
pub fn finetune_supervised_baseline(
    checkpoint: &Checkpoint,
    subset: &[Segment],
    val: &[Segment],
    num_classes: usize,
    config: &TrainConfig,
    options: &RunOptions,
) -> Result<TrainOutcome> {
    expect_stage(checkpoint.meta.stage, Stage::Supervised)?;
    if !matches!(config.stage, Stage::SupervisedFinetune | Stage::Finetune) {
        return Err(Error::StageMismatch {
            expected: Stage::SupervisedFinetune.to_string(),
            found: config.stage.to_string(),
        });
    }
    let mut stage_config = config.clone();
    stage_config.stage = Stage::SupervisedFinetune;
    check_inputs(&stage_config, options, subset, num_classes)?;
    let mut model = checkpoint.to_model()?;
    model.reset_output_layer(num_classes, derive_seed(config.seed, "probe", &[]))?;
    train_output_layer(
        model,
        Stage::SupervisedFinetune,
        subset,
        val,
        num_classes,
        &stage_config,
        options,
    )
}
