//! Per-modality encoders, classification heads and the assembled model.

pub mod deepsense;
pub mod swin;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::datamodel::{EmbeddingBundle, EncoderKind, ModalitySpec, Spectrogram, Stage};
use crate::error::{Error, Result};
use crate::nn::{check_activation, to_f64_vec, Linear, ParamStore};
use crate::preprocess::NormStats;

pub use deepsense::{DeepSenseConfig, DeepSenseEncoder};
pub use swin::{SwinConfig, SwinEncoder, WindowLayout};

pub const DEFAULT_EMBEDDING_DIM: usize = 128;
pub const DEFAULT_SHARED_DIM: usize = 64;
pub const ACTIVATION_LIMIT: f64 = 1e6;

pub const ENCODER_PREFIX: &str = "encoder.";
pub const HEAD_PREFIX: &str = "head.";
pub const HEAD_OUTPUT_PREFIX: &str = "head.output.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub embedding_dim: usize,
    pub shared_dim: usize,
    pub deepsense: DeepSenseConfig,
    pub swin: SwinConfig,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Deepsense,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            shared_dim: DEFAULT_SHARED_DIM,
            deepsense: DeepSenseConfig::default(),
            swin: SwinConfig::default(),
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn new(kind: EncoderKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.shared_dim == 0 || self.shared_dim >= self.embedding_dim {
            return Err(Error::Config(format!(
                "shared_dim {} must lie in [1, {})",
                self.shared_dim, self.embedding_dim
            )));
        }
        match self.kind {
            EncoderKind::Deepsense => self.deepsense.check(),
            EncoderKind::Swin => self.swin.check(),
        }
    }

    pub fn private_dim(&self) -> usize {
        self.embedding_dim - self.shared_dim
    }
}

#[derive(Debug, Clone)]
pub enum ModalityEncoder {
    DeepSense(DeepSenseEncoder),
    Swin(SwinEncoder),
}

impl ModalityEncoder {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            ModalityEncoder::DeepSense(e) => e.forward(x),
            ModalityEncoder::Swin(e) => e.forward(x),
        }
    }
}

/// One encoder per modality, keyed by modality name.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    modalities: BTreeMap<String, ModalityEncoder>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, specs: &[ModalitySpec], config: &EncoderConfig) -> Result<Self> {
        config.check()?;
        let mut modalities = BTreeMap::new();
        for spec in specs {
            spec.check()?;
            let name = format!("{ENCODER_PREFIX}{}", spec.name);
            let enc = match config.kind {
                EncoderKind::Deepsense => ModalityEncoder::DeepSense(DeepSenseEncoder::new(
                    store,
                    &name,
                    spec,
                    &config.deepsense,
                    config.embedding_dim,
                )?),
                EncoderKind::Swin => ModalityEncoder::Swin(SwinEncoder::new(
                    store,
                    &name,
                    spec,
                    &config.swin,
                    config.embedding_dim,
                )?),
            };
            modalities.insert(spec.name.clone(), enc);
        }
        Ok(Self {
            config: config.clone(),
            modalities,
        })
    }

    /// Maps `[B, planes, intervals, bins]` inputs to `[B, D]` embeddings.
    pub fn forward(&self, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
        if inputs.len() != self.modalities.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} modalities, got {}",
                self.modalities.len(),
                inputs.len()
            )));
        }
        self.modalities
            .iter()
            .map(|(name, enc)| {
                let x = inputs
                    .get(name)
                    .ok_or_else(|| Error::UnknownModality(name.clone()))?;
                let e = enc.forward(x)?;
                check_activation(&e, &format!("`{name}` encoder"), ACTIVATION_LIMIT)?;
                Ok((name.clone(), e))
            })
            .collect()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HeadKind {
    LinearProbe,
    SupervisedFusion,
}

/// Classifier over concatenated modality embeddings.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub kind: HeadKind,
    pub hidden: Option<Linear>,
    pub output: Linear,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ClassifierHead {
    pub fn new(
        store: &mut ParamStore,
        kind: HeadKind,
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || num_classes == 0 {
            return Err(Error::Config("head sizes must be positive".into()));
        }
        let (hidden, out_in) = match kind {
            HeadKind::LinearProbe => (None, input_dim),
            HeadKind::SupervisedFusion => (
                Some(Linear::new(store, &format!("{HEAD_PREFIX}hidden"), input_dim, hidden_dim)?),
                hidden_dim,
            ),
        };
        let output = Linear::new(store, &format!("{HEAD_PREFIX}output"), out_in, num_classes)?;
        Ok(Self {
            kind,
            hidden,
            output,
            input_dim,
            num_classes,
        })
    }

    /// `[B, input_dim]` to `[B, num_classes]` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.dim(candle_core::D::Minus1)?;
        if d != self.input_dim {
            return Err(Error::DimMismatch(format!(
                "head expects {} inputs, got {d}",
                self.input_dim
            )));
        }
        match &self.hidden {
            Some(h) => self.output.forward(&h.forward(x)?.relu()?),
            None => self.output.forward(x),
        }
    }

    pub fn num_params(&self) -> usize {
        self.hidden.as_ref().map_or(0, Linear::num_params) + self.output.num_params()
    }
}

/// Encoder, optional head and the standardization constants they were
/// trained with.
#[derive(Debug)]
pub struct Model {
    pub specs: Vec<ModalitySpec>,
    pub encoder_config: EncoderConfig,
    pub stage: Stage,
    pub norm: NormStats,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: Option<ClassifierHead>,
}

impl Model {
    pub fn new(specs: &[ModalitySpec], encoder_config: &EncoderConfig, stage: Stage, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(encoder_config.seed, dtype);
        let encoder = Encoder::new(&mut store, specs, encoder_config)?;
        Ok(Self {
            specs: specs.to_vec(),
            encoder_config: encoder_config.clone(),
            stage,
            norm: NormStats::default(),
            store,
            encoder,
            head: None,
        })
    }

    pub fn concat_dim(&self) -> usize {
        self.specs.len() * self.encoder_config.embedding_dim
    }

    /// Registers a freshly initialized head, replacing any existing one.
    /// `seed` selects the initialization stream.
    pub fn attach_head(&mut self, kind: HeadKind, num_classes: usize, seed: u64) -> Result<()> {
        let input_dim = self.concat_dim();
        let hidden_dim = self.encoder_config.embedding_dim;
        self.store.remove(HEAD_PREFIX);
        let saved = self.store.reseed(seed);
        let head = ClassifierHead::new(&mut self.store, kind, input_dim, hidden_dim, num_classes);
        self.store.reseed(saved);
        self.head = Some(head?);
        Ok(())
    }

    /// Replaces only the final classification layer of the head.
    pub fn reset_output_layer(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        let head = self.head.as_mut().ok_or_else(|| Error::Config("model has no head".into()))?;
        let input = head.output.weight.dim(1)?;
        self.store.remove(HEAD_OUTPUT_PREFIX);
        let saved = self.store.reseed(seed);
        let output = Linear::new(&mut self.store, &format!("{HEAD_PREFIX}output"), input, num_classes);
        self.store.reseed(saved);
        head.output = output?;
        head.num_classes = num_classes;
        Ok(())
    }

    pub fn head(&self) -> Result<&ClassifierHead> {
        self.head.as_ref().ok_or_else(|| Error::Config("model has no head".into()))
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.head.as_ref().map(|h| h.num_classes)
    }

    pub fn embed(&self, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
        self.encoder.forward(inputs)
    }

    /// Modality embeddings concatenated in key order, `[B, M * D]`.
    pub fn concat(embeddings: &BTreeMap<String, Tensor>) -> Result<Tensor> {
        let parts: Vec<&Tensor> = embeddings.values().collect();
        Ok(Tensor::cat(&parts, 1)?)
    }

    pub fn logits(&self, inputs: &BTreeMap<String, Tensor>) -> Result<Tensor> {
        self.head()?.forward(&Self::concat(&self.embed(inputs)?)?)
    }

    /// Names of the parameters a stage updates.
    pub fn trainable_prefixes(stage: Stage) -> &'static [&'static str] {
        match stage {
            Stage::Pretrain => &[ENCODER_PREFIX],
            Stage::Supervised => &[ENCODER_PREFIX, HEAD_PREFIX],
            Stage::Finetune => &[HEAD_PREFIX],
            Stage::SupervisedFinetune => &[HEAD_OUTPUT_PREFIX],
        }
    }

    pub fn trainable_vars(&self, stage: Stage) -> Vec<(String, candle_core::Var)> {
        Self::trainable_prefixes(stage)
            .iter()
            .flat_map(|p| self.store.with_prefix(p))
            .collect()
    }
}

/// Stacks spectrograms into `[B, 2 * channels, intervals, bins]`, real and
/// imaginary planes interleaved per channel.
pub fn spectrogram_batch(items: &[&Spectrogram], dtype: DType) -> Result<Tensor> {
    let first = items.first().ok_or(Error::Empty)?;
    let [c, i, f] = first.shape();
    let mut data = Vec::with_capacity(items.len() * 2 * c * i * f);
    for s in items {
        if s.shape() != [c, i, f] {
            return Err(Error::ShapeMismatch(format!(
                "`{}` spectrograms of shapes {:?} and {:?} in one batch",
                s.modality,
                [c, i, f],
                s.shape()
            )));
        }
        for ch in 0..c {
            for plane in [&s.re, &s.im] {
                data.extend(plane.index_axis(ndarray::Axis(0), ch).iter().map(|&v| v as f32));
            }
        }
    }
    Ok(Tensor::from_vec(data, (items.len(), 2 * c, i, f), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Per-modality batches for a slice of samples.
pub fn batch_inputs(
    samples: &[&BTreeMap<String, Spectrogram>],
    specs: &[ModalitySpec],
    dtype: DType,
) -> Result<BTreeMap<String, Tensor>> {
    specs
        .iter()
        .map(|spec| {
            let items = samples
                .iter()
                .map(|s| {
                    s.get(&spec.name)
                        .ok_or_else(|| Error::ShapeMismatch(format!("missing `{}` spectrogram", spec.name)))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((spec.name.clone(), spectrogram_batch(&items, dtype)?))
        })
        .collect()
}

/// Embeds one normalized sample.
pub fn encode(spectrograms: &BTreeMap<String, Spectrogram>, model: &Model) -> Result<EmbeddingBundle> {
    for spec in &model.specs {
        let s = spectrograms
            .get(&spec.name)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing `{}` spectrogram", spec.name)))?;
        if !s.normalized {
            return Err(Error::NotNormalized);
        }
        s.check(spec).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFiniteActivation(what),
            other => other,
        })?;
    }
    if spectrograms.len() != model.specs.len() {
        return Err(Error::ShapeMismatch("unexpected extra modality".into()));
    }
    let inputs = batch_inputs(&[spectrograms], &model.specs, model.store.dtype())?;
    let embeddings = model
        .embed(&inputs)?
        .into_iter()
        .map(|(k, v)| Ok((k, to_f64_vec(&v)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    EmbeddingBundle::new(embeddings, model.encoder_config.shared_dim)
}

/// Head logits for one embedding bundle.
pub fn classify(bundle: &EmbeddingBundle, head: &ClassifierHead) -> Result<Vec<f64>> {
    let x = bundle.concat();
    if x.len() != head.input_dim {
        return Err(Error::DimMismatch(format!(
            "head expects {} inputs, bundle has {}",
            head.input_dim,
            x.len()
        )));
    }
    let dtype = head.output.weight.dtype();
    let t = Tensor::from_vec(x, (1, head.input_dim), &Device::Cpu)?.to_dtype(dtype)?;
    to_f64_vec(&head.forward(&t)?)
}

/// Parameters updated by `stage` for this model.
pub fn count_trainable_params(model: &Model, stage: Stage) -> usize {
    Model::trainable_prefixes(stage)
        .iter()
        .map(|p| model.store.count(p))
        .sum()
}
