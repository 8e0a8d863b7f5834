use std::collections::BTreeMap;

use crate::augment::sample_plan_with;
use crate::datamodel::{ModalitySpec, Segment, Spectrogram, Stage, TrainConfig};
use crate::encoders::{batch_inputs, EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::focal::focal_loss_t;
use crate::preprocess::{norm_stats_for_segments, normalize, stft_signals, NormStats};
use crate::rng::derive_seed;

use super::data::{epoch_order, Inputs};
use super::{diverged, divergence, expect_stage, Adam, EpochRecord, RunOptions, TrainOutcome};
use super::schedule::cosine_lr;

/// One augmented, standardized view of the samples at `indices`.
#[allow(clippy::too_many_arguments)]
pub fn augmented_view(
    dataset: &[Segment],
    indices: &[usize],
    specs: &[ModalitySpec],
    norm: &NormStats,
    config: &TrainConfig,
    options: &RunOptions,
    epoch: usize,
    view: u64,
) -> Result<Inputs> {
    let samples = indices
        .iter()
        .map(|&i| {
            let seed = derive_seed(config.seed, "pretrain-view", &[epoch as u64, i as u64, view]);
            let plan = sample_plan_with(Stage::Pretrain, seed, &options.augment, &config.augmentations);
            let signals = plan.apply_time(&dataset[i].signals)?;
            let spectra = plan.apply_freq(&stft_signals(&signals, specs)?);
            spectra
                .iter()
                .map(|(k, s)| Ok((k.clone(), normalize(s, norm)?)))
                .collect::<Result<BTreeMap<String, Spectrogram>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = samples.iter().collect();
    batch_inputs(&refs, specs, options.dtype)
}

/// Trains the encoders on unlabeled segments with the contrastive objective
/// over two augmented views per sample. Labels are ignored.
pub fn pretrain(
    dataset: &[Segment],
    specs: &[ModalitySpec],
    config: &TrainConfig,
    encoder_config: &EncoderConfig,
    options: &RunOptions,
) -> Result<TrainOutcome> {
    expect_stage(config.stage, Stage::Pretrain)?;
    config.check()?;
    options.augment.check()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let norm = norm_stats_for_segments(dataset, specs)?;
    let mut model = Model::new(specs, encoder_config, Stage::Pretrain, options.dtype)?;
    model.norm = norm;
    let mut opt = Adam::new(config.optimizer, model.trainable_vars(Stage::Pretrain), config.weight_decay);
    let shared_dim = encoder_config.shared_dim;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config)?;
        let snapshot = model.store.snapshot("")?;
        let order = epoch_order(dataset.len(), config.seed, "pretrain-order", epoch);
        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let step = || -> Result<_> {
                let v1 = augmented_view(dataset, batch, specs, &model.norm, config, options, epoch, 0)?;
                let v2 = augmented_view(dataset, batch, specs, &model.norm, config, options, epoch, 1)?;
                let e1 = model.embed(&v1)?;
                let e2 = model.embed(&v2)?;
                focal_loss_t(&e1, &e2, shared_dim, config)
            };
            let terms = step().map_err(|e| divergence(e, epoch, &model, &snapshot))?;
            let b = terms.breakdown()?;
            if !b.is_finite() {
                return Err(diverged(epoch, &model, &snapshot));
            }
            let grads = terms.total.backward()?;
            opt.step(&grads, lr)?;
            let n = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([b.total, b.shared_term, b.private_term, b.orth_term]) {
                *s += n * v;
            }
            seen += batch.len();
        }
        if seen == 0 {
            return Err(Error::Config(format!(
                "batch size {} leaves no batch of at least two samples",
                config.batch_size
            )));
        }
        let mean = |s: f64| s / seen as f64;
        let record = EpochRecord {
            epoch,
            stage: Stage::Pretrain,
            lr,
            train_loss: mean(sums[0]),
            train_acc: None,
            val_acc: None,
            shared: Some(mean(sums[1])),
            private: Some(mean(sums[2])),
            orth: Some(mean(sums[3])),
        };
        log::info!(
            "pretrain epoch {epoch}: loss {:.4} (shared {:.4}, private {:.4}, orth {:.4})",
            record.train_loss,
            mean(sums[1]),
            mean(sums[2]),
            mean(sums[3])
        );
        history.push(record);
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: None,
    })
}

/// Clean embeddings of `dataset` as `[N, D]` tensors per modality.
pub fn embed_dataset(model: &Model, dataset: &[Segment], batch: usize) -> Result<Inputs> {
    let mut parts: BTreeMap<String, Vec<candle_core::Tensor>> = BTreeMap::new();
    let set = super::SpectralSet::from_segments(dataset, &model.specs)?;
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let inputs = super::data::labeled_inputs(&set, chunk, &model.specs, &model.norm, model.store.dtype(), None)?;
        for (k, e) in model.embed(&inputs)? {
            parts.entry(k).or_default().push(e.detach());
        }
    }
    parts
        .into_iter()
        .map(|(k, v)| Ok((k, candle_core::Tensor::cat(&v, 0)?)))
        .collect()
}
