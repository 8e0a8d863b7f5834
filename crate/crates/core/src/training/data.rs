//! Spectrogram caches and batch assembly for the training loops.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;

use crate::augment::{self, AugmentConfig, AugmentationKind};
use crate::datamodel::{ModalitySpec, Segment, Spectrogram, Stage};
use crate::encoders::batch_inputs;
use crate::error::{Error, Result};
use crate::preprocess::{interval_stft, normalize, NormStats};
use crate::rng::{self, derive_seed};

pub type Inputs = BTreeMap<String, Tensor>;

/// Unnormalized spectrograms of a segment collection with their labels.
#[derive(Debug, Clone)]
pub struct SpectralSet {
    pub samples: Vec<BTreeMap<String, Spectrogram>>,
    pub labels: Vec<Option<usize>>,
}

impl SpectralSet {
    pub fn from_segments(segments: &[Segment], specs: &[ModalitySpec]) -> Result<Self> {
        let samples = segments
            .iter()
            .map(|s| {
                s.check(specs)?;
                interval_stft(s, specs)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            labels: segments.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Labels of every sample, each below `num_classes`.
    pub fn labels(&self, num_classes: usize) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                Some(l) if *l < num_classes => Ok(*l),
                Some(l) => Err(Error::Dataset(format!(
                    "sample {i} has label {l}, model has {num_classes} classes"
                ))),
                None => Err(Error::Dataset(format!("sample {i} is unlabeled"))),
            })
            .collect()
    }
}

/// Standardized model inputs for the samples at `indices`, optionally with a
/// per-sample phase shift drawn from the labeled-stage augmentation plan.
pub fn labeled_inputs(
    set: &SpectralSet,
    indices: &[usize],
    specs: &[ModalitySpec],
    norm: &NormStats,
    dtype: DType,
    augmentation: Option<(&LabeledAugment, usize, u64)>,
) -> Result<Inputs> {
    let prepared = indices
        .iter()
        .map(|&i| {
            let raw = &set.samples[i];
            let shifted = match augmentation {
                Some((aug, epoch, batch_seed)) if aug.phase_shift => {
                    let seed = derive_seed(batch_seed, "phase", &[epoch as u64, i as u64]);
                    let plan = augment::sample_plan_with(
                        aug.stage,
                        seed,
                        &aug.params,
                        &[AugmentationKind::PhaseShift],
                    );
                    plan.apply_freq(raw)
                }
                _ => raw.clone(),
            };
            shifted
                .iter()
                .map(|(k, s)| Ok((k.clone(), normalize(s, norm)?)))
                .collect::<Result<BTreeMap<_, _>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&BTreeMap<String, Spectrogram>> = prepared.iter().collect();
    batch_inputs(&refs, specs, dtype)
}

/// Augmentations of the labeled stages.
#[derive(Debug, Clone)]
pub struct LabeledAugment {
    pub stage: Stage,
    pub params: AugmentConfig,
    pub mixup: bool,
    pub phase_shift: bool,
}

impl LabeledAugment {
    pub fn new(stage: Stage, enabled: &[AugmentationKind], params: &AugmentConfig) -> Self {
        let allowed = AugmentationKind::allowed_for(stage);
        let on = |op| enabled.contains(&op) && allowed.contains(&op);
        Self {
            stage,
            params: params.clone(),
            mixup: on(AugmentationKind::Mixup),
            phase_shift: on(AugmentationKind::PhaseShift),
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.mixup && !self.phase_shift
    }
}

pub fn one_hot(labels: &[usize], num_classes: usize, dtype: DType) -> Result<Tensor> {
    let mut data = vec![0f32; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * num_classes + l] = 1.0;
    }
    Ok(Tensor::from_vec(data, (labels.len(), num_classes), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mixup draw for one batch: the weight of the original sample and the
/// partner index of every position.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupDraw {
    pub lambda: f64,
    pub partner: Vec<u32>,
}

pub fn draw_mixup(batch: usize, alpha: f64, seed: u64) -> MixupDraw {
    let mut r = rng::stream(seed, "mixup", &[]);
    let lambda = augment::sample_mixup_lambda(alpha, &mut r);
    let mut partner: Vec<u32> = (0..batch as u32).collect();
    partner.shuffle(&mut r);
    MixupDraw { lambda, partner }
}

/// `lambda * x + (1 - lambda) * x[partner]` for every tensor. Mixing
/// standardized spectrograms equals standardizing the spectrogram of the
/// mixed signals, since both maps are affine with weights summing to one.
pub fn apply_mixup(inputs: &Inputs, targets: &Tensor, draw: &MixupDraw) -> Result<(Inputs, Tensor)> {
    let idx = Tensor::new(draw.partner.as_slice(), &Device::Cpu)?;
    let mix = |x: &Tensor| -> Result<Tensor> {
        let other = x.index_select(&idx, 0)?;
        Ok(((x * draw.lambda)? + (other * (1.0 - draw.lambda))?)?)
    };
    let mixed = inputs
        .iter()
        .map(|(k, x)| Ok((k.clone(), mix(x)?)))
        .collect::<Result<Inputs>>()?;
    Ok((mixed, mix(targets)?))
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, stream: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, stream, &[epoch as u64]));
    order
}

pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let rows = logits.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    Ok(rows
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}
