//! Pre-training, supervised training and the two fine-tuning regimes.

pub mod data;
pub mod finetune;
pub mod optim;
pub mod pretrain;
pub mod schedule;
pub mod supervised;

use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::checkpoint::Checkpoint;
use crate::datamodel::{ModalitySpec, Segment, Stage};
use crate::encoders::Model;
use crate::error::{Error, Result};

pub use data::SpectralSet;
pub use finetune::{finetune_linear, finetune_supervised_baseline};
pub use optim::Adam;
pub use pretrain::pretrain;
pub use schedule::{cosine_lr, lr_trace};
pub use supervised::train_supervised;

/// One line of the per-epoch metrics CSV. Fields a stage does not produce
/// are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub shared: Option<f64>,
    pub private: Option<f64>,
    pub orth: Option<f64>,
}

pub fn write_history_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Dataset(format!("{other:?}")),
    })?;
    if records.is_empty() {
        w.write_record([
            "epoch", "stage", "lr", "train_loss", "train_acc", "val_acc", "shared", "private", "orth",
        ])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Settings shared by all training loops that are not part of a stage
/// configuration.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub augment: AugmentConfig,
    pub dtype: DType,
    pub eval_batch: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            augment: AugmentConfig::default(),
            dtype: DType::F32,
            eval_batch: 64,
        }
    }
}

/// A trained model with its per-epoch history.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights were kept, when selection on validation accuracy
    /// was used.
    pub best_epoch: Option<usize>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, seed: u64, config: &crate::datamodel::TrainConfig) -> Result<Checkpoint> {
        Checkpoint::from_model(&self.model, seed, Some(config), self.history.clone())
    }
}

pub(crate) fn expect_stage(found: Stage, expected: Stage) -> Result<()> {
    if found != expected {
        return Err(Error::StageMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

/// Predicted classes of a model with a head.
pub fn predict(model: &Model, set: &SpectralSet, batch: usize) -> Result<Vec<usize>> {
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in indices.chunks(batch.max(1)) {
        let inputs = data::labeled_inputs(set, chunk, &model.specs, &model.norm, model.store.dtype(), None)?;
        out.extend(data::argmax_rows(&model.logits(&inputs)?.detach())?);
    }
    Ok(out)
}

pub fn predict_segments(model: &Model, segments: &[Segment], specs: &[ModalitySpec]) -> Result<Vec<usize>> {
    predict(model, &SpectralSet::from_segments(segments, specs)?, 64)
}

/// Converts non-finite activations raised during a training step into a
/// divergence report carrying the last finite weights.
pub(crate) fn divergence(
    err: Error,
    epoch: usize,
    model: &Model,
    snapshot: &std::collections::BTreeMap<String, candle_core::Tensor>,
) -> Error {
    match err {
        Error::NonFiniteActivation(_) | Error::NonFinite(_) => diverged(epoch, model, snapshot),
        other => other,
    }
}

pub(crate) fn diverged(
    epoch: usize,
    model: &Model,
    snapshot: &std::collections::BTreeMap<String, candle_core::Tensor>,
) -> Error {
    let last_finite = model
        .store
        .restore(snapshot)
        .and_then(|_| Checkpoint::from_model(model, 0, None, Vec::new()))
        .ok()
        .map(Box::new);
    Error::Divergence { epoch, last_finite }
}

pub(crate) fn scalar(t: &candle_core::Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let records = vec![
            EpochRecord {
                epoch: 0,
                stage: Stage::Pretrain,
                lr: 1e-4,
                train_loss: 3.25,
                train_acc: None,
                val_acc: None,
                shared: Some(1.0),
                private: Some(2.0),
                orth: Some(0.25),
            },
            EpochRecord {
                epoch: 1,
                stage: Stage::Finetune,
                lr: 0.1 + 0.2,
                train_loss: 0.5,
                train_acc: Some(0.75),
                val_acc: Some(1.0 / 3.0),
                shared: None,
                private: None,
                orth: None,
            },
        ];
        write_history_csv(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,stage,lr,train_loss,train_acc,val_acc,shared,private,orth\n"));
        assert!(text.contains("0,PRETRAIN,0.0001,3.25,,,1.0,2.0,0.25"));
        assert_eq!(read_history_csv(&path).unwrap(), records);
    }
}
