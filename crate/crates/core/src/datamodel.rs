//! Canonical domain types shared by every stage of the pipeline.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationKind;
use crate::error::{Error, Result};

pub const ACOUSTIC: &str = "acoustic";
pub const SEISMIC: &str = "seismic";

pub const DEFAULT_SEGMENT_SECONDS: f64 = 2.0;
pub const DEFAULT_NUM_INTERVALS: usize = 10;
pub const DEFAULT_NUM_CLASSES: usize = 4;

/// Time-domain samples of one modality, shaped `[channels, samples]`.
pub type Signal = Array2<f32>;

/// Per-modality signals keyed by modality name.
pub type Signals = BTreeMap<String, Signal>;

/// Sampling layout of one sensing modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub sample_rate_hz: u32,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_intervals")]
    pub num_intervals: usize,
    #[serde(default = "default_segment_seconds")]
    pub segment_seconds: f64,
}

fn default_channels() -> usize {
    1
}
fn default_intervals() -> usize {
    DEFAULT_NUM_INTERVALS
}
fn default_segment_seconds() -> f64 {
    DEFAULT_SEGMENT_SECONDS
}

impl ModalitySpec {
    pub fn new(
        name: impl Into<String>,
        sample_rate_hz: u32,
        channels: usize,
        num_intervals: usize,
        segment_seconds: f64,
    ) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            sample_rate_hz,
            channels,
            num_intervals,
            segment_seconds,
        };
        spec.check()?;
        Ok(spec)
    }

    /// 8 kHz microphone, one channel.
    pub fn acoustic() -> Self {
        Self {
            name: ACOUSTIC.into(),
            sample_rate_hz: 8000,
            channels: 1,
            num_intervals: DEFAULT_NUM_INTERVALS,
            segment_seconds: DEFAULT_SEGMENT_SECONDS,
        }
    }

    /// 100 Hz geophone, one channel.
    pub fn seismic() -> Self {
        Self {
            name: SEISMIC.into(),
            sample_rate_hz: 100,
            channels: 1,
            num_intervals: DEFAULT_NUM_INTERVALS,
            segment_seconds: DEFAULT_SEGMENT_SECONDS,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::InvalidArgument("modality name is empty".into()));
        }
        if self.sample_rate_hz == 0 || self.channels == 0 || self.num_intervals == 0 {
            return Err(Error::InvalidArgument(format!(
                "modality `{}`: rate, channels and intervals must be positive",
                self.name
            )));
        }
        if !(self.segment_seconds > 0.0 && self.segment_seconds.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "modality `{}`: segment_seconds must be positive",
                self.name
            )));
        }
        let exact = self.sample_rate_hz as f64 * self.segment_seconds;
        if (exact - exact.round()).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "modality `{}`: {} Hz x {} s is not a whole number of samples",
                self.name, self.sample_rate_hz, self.segment_seconds
            )));
        }
        let n = self.samples_per_segment();
        if n % self.num_intervals != 0 {
            return Err(Error::Indivisible {
                len: n,
                parts: self.num_intervals,
            });
        }
        Ok(())
    }

    pub fn samples_per_segment(&self) -> usize {
        (self.sample_rate_hz as f64 * self.segment_seconds).round() as usize
    }

    pub fn interval_len(&self) -> usize {
        self.samples_per_segment() / self.num_intervals
    }

    /// Real-input FFT bin count of one interval.
    pub fn bins(&self) -> usize {
        self.interval_len() / 2 + 1
    }

    pub fn nyquist_hz(&self) -> f64 {
        self.sample_rate_hz as f64 / 2.0
    }
}

/// Acoustic (8 kHz) and seismic (100 Hz), 2 s segments, 10 intervals each.
pub fn default_specs() -> Vec<ModalitySpec> {
    vec![ModalitySpec::acoustic(), ModalitySpec::seismic()]
}

pub fn find_spec<'a>(specs: &'a [ModalitySpec], name: &str) -> Result<&'a ModalitySpec> {
    specs
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::UnknownModality(name.to_string()))
}

/// Collection day / corpus a segment came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DomainTag {
    ModUnlabeled,
    Control,
    Noisy,
    SynthA,
    SynthB,
}

impl DomainTag {
    pub const ALL: [DomainTag; 5] = [
        DomainTag::ModUnlabeled,
        DomainTag::Control,
        DomainTag::Noisy,
        DomainTag::SynthA,
        DomainTag::SynthB,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DomainTag::ModUnlabeled => "MOD_UNLABELED",
            DomainTag::Control => "CONTROL",
            DomainTag::Noisy => "NOISY",
            DomainTag::SynthA => "SYNTH_A",
            DomainTag::SynthB => "SYNTH_B",
        }
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self, DomainTag::SynthA | DomainTag::SynthB)
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DomainTag::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown domain tag `{s}`")))
    }
}

/// One multimodal window of sensor data.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub signals: Signals,
    pub label: Option<usize>,
    pub domain: DomainTag,
    pub run_id: String,
    pub start_time_s: f64,
}

impl Segment {
    pub fn signal(&self, modality: &str) -> Result<&Signal> {
        self.signals
            .get(modality)
            .ok_or_else(|| Error::UnknownModality(modality.to_string()))
    }

    pub fn check(&self, specs: &[ModalitySpec]) -> Result<()> {
        for name in self.signals.keys() {
            find_spec(specs, name)?;
        }
        for spec in specs {
            let signal = self.signals.get(&spec.name).ok_or_else(|| {
                Error::ShapeMismatch(format!("segment has no `{}` signal", spec.name))
            })?;
            let expected = [spec.channels, spec.samples_per_segment()];
            if signal.shape() != expected {
                return Err(Error::ShapeMismatch(format!(
                    "`{}` signal is {:?}, expected {:?}",
                    spec.name,
                    signal.shape(),
                    expected
                )));
            }
            if !signal.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("`{}` signal", spec.name)));
            }
        }
        if !(self.start_time_s >= 0.0 && self.start_time_s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "start_time_s {} must be non-negative",
                self.start_time_s
            )));
        }
        Ok(())
    }
}

/// Returns `segment` unchanged when its shapes and values agree with `specs`.
pub fn validate_segment(segment: Segment, specs: &[ModalitySpec]) -> Result<Segment> {
    segment.check(specs)?;
    Ok(segment)
}

/// Complex per-interval spectrum of one modality, `[channels, intervals, bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub modality: String,
    pub re: Array3<f64>,
    pub im: Array3<f64>,
    pub normalized: bool,
}

impl Spectrogram {
    pub fn shape(&self) -> [usize; 3] {
        let s = self.re.shape();
        [s[0], s[1], s[2]]
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().chain(self.im.iter()).all(|v| v.is_finite())
    }

    pub fn magnitude(&self) -> Array3<f64> {
        let mut out = self.re.clone();
        ndarray::Zip::from(&mut out)
            .and(&self.im)
            .for_each(|r, &i| *r = r.hypot(i));
        out
    }

    pub fn check(&self, spec: &ModalitySpec) -> Result<()> {
        let expected = [spec.channels, spec.num_intervals, spec.bins()];
        if self.shape() != expected || self.im.shape() != expected {
            return Err(Error::ShapeMismatch(format!(
                "`{}` spectrogram is {:?}, expected {:?}",
                self.modality,
                self.re.shape(),
                expected
            )));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite(format!("`{}` spectrogram", self.modality)));
        }
        Ok(())
    }
}

/// Per-modality embeddings, each split at `shared_dim` into shared and
/// private coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBundle {
    pub shared_dim: usize,
    pub embeddings: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingBundle {
    pub fn new(embeddings: BTreeMap<String, Vec<f64>>, shared_dim: usize) -> Result<Self> {
        let mut dims = embeddings.values().map(Vec::len);
        let dim = dims.next().ok_or(Error::Empty)?;
        if dims.any(|d| d != dim) {
            return Err(Error::DimMismatch(
                "modalities have different embedding sizes".into(),
            ));
        }
        if shared_dim == 0 || shared_dim >= dim {
            return Err(Error::DimMismatch(format!(
                "shared dim {shared_dim} must lie in [1, {dim})"
            )));
        }
        if !embeddings.values().flatten().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Self {
            shared_dim,
            embeddings,
        })
    }

    pub fn dim(&self) -> usize {
        self.embeddings.values().next().map_or(0, Vec::len)
    }

    pub fn num_modalities(&self) -> usize {
        self.embeddings.len()
    }

    /// Modality embeddings concatenated in key order.
    pub fn concat(&self) -> Vec<f64> {
        self.embeddings.values().flatten().copied().collect()
    }
}

/// Splits every modality embedding into `(shared, private)` halves.
pub fn split_embedding(bundle: &EmbeddingBundle) -> BTreeMap<String, (Vec<f64>, Vec<f64>)> {
    bundle
        .embeddings
        .iter()
        .map(|(name, e)| {
            let (s, p) = e.split_at(bundle.shared_dim);
            (name.clone(), (s.to_vec(), p.to_vec()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Supervised,
    Pretrain,
    Finetune,
    SupervisedFinetune,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Supervised => "SUPERVISED",
            Stage::Pretrain => "PRETRAIN",
            Stage::Finetune => "FINETUNE",
            Stage::SupervisedFinetune => "SUPERVISED_FINETUNE",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[serde(alias = "AdamW", alias = "ADAMW")]
    Adamw,
    #[serde(alias = "Adam", alias = "ADAM")]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    #[serde(alias = "Cosine", alias = "COSINE")]
    Cosine,
}

/// How the "LR decay" column is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// `lr_decay` is the final-to-initial ratio of the cosine curve.
    CosineFloor,
    /// Piecewise-constant rate multiplied by `lr_decay` at every quarter of
    /// the run.
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub shared: f64,
    pub private: f64,
    pub orth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            shared: 1.0,
            private: 1.0,
            orth: 1.0,
        }
    }
}

/// Hyperparameters of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub initial_lr: f64,
    pub scheduler: SchedulerKind,
    pub lr_decay: f64,
    pub epochs: usize,
    pub augmentations: Vec<AugmentationKind>,
    pub seed: u64,
    pub temperature: f64,
    pub loss_weights: LossWeights,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
    /// Early-stopping patience in epochs; `None` trains every epoch.
    pub patience: Option<usize>,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_EPOCH_SCALE: f64 = 0.05;

impl TrainConfig {
    /// The stage's row of the training-configuration table at full scale.
    pub fn table_defaults(stage: Stage) -> Self {
        use AugmentationKind::*;
        let (batch_size, optimizer, initial_lr, lr_decay, epochs, augmentations) = match stage {
            Stage::Supervised => (128, OptimizerKind::Adamw, 1e-4, 0.2, 500, vec![Mixup, PhaseShift]),
            Stage::Pretrain => (
                256,
                OptimizerKind::Adamw,
                1e-4,
                0.05,
                6000,
                vec![
                    Permutation,
                    Negation,
                    TimeWarp,
                    HorizontalFlip,
                    MagnitudeWarp,
                    Scaling,
                    PhaseShift,
                ],
            ),
            Stage::Finetune | Stage::SupervisedFinetune => {
                (256, OptimizerKind::Adam, 1e-3, 0.2, 200, vec![Mixup, PhaseShift])
            }
        };
        Self {
            stage,
            batch_size,
            optimizer,
            initial_lr,
            scheduler: SchedulerKind::Cosine,
            lr_decay,
            epochs,
            augmentations,
            seed: 0,
            temperature: DEFAULT_TEMPERATURE,
            loss_weights: LossWeights::default(),
            weight_decay: match optimizer {
                OptimizerKind::Adamw => 0.01,
                OptimizerKind::Adam => 0.0,
            },
            decay_mode: DecayMode::CosineFloor,
            patience: (stage != Stage::Pretrain).then_some(20),
        }
    }

    /// Stage defaults with the epoch count multiplied by `epoch_scale`.
    pub fn desk_scaled(stage: Stage, epoch_scale: f64) -> Self {
        let mut cfg = Self::table_defaults(stage);
        cfg.epochs = ((cfg.epochs as f64 * epoch_scale).round() as usize).max(1);
        cfg
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr {} must be positive", self.initial_lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} must lie in (0, 1]", self.lr_decay));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        let w = self.loss_weights;
        if [w.shared, w.private, w.orth]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return bad("loss weights must be non-negative".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        let allowed = AugmentationKind::allowed_for(self.stage);
        if let Some(op) = self.augmentations.iter().find(|op| !allowed.contains(op)) {
            return bad(format!("augmentation {op:?} is not used in stage {}", self.stage));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EncoderKind {
    #[serde(alias = "deepsense")]
    Deepsense,
    #[serde(alias = "swin")]
    Swin,
}

impl EncoderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EncoderKind::Deepsense => "DEEPSENSE",
            EncoderKind::Swin => "SWIN",
        }
    }

    pub fn display_name(&self) -> &'static str {
        match self {
            EncoderKind::Deepsense => "DeepSense",
            EncoderKind::Swin => "SW-T",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DEEPSENSE" => Ok(EncoderKind::Deepsense),
            "SWIN" | "SW-T" => Ok(EncoderKind::Swin),
            _ => Err(Error::InvalidArgument(format!("unknown encoder `{s}`"))),
        }
    }
}

/// The training framework a grid cell compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Framework {
    Supervised,
    SupervisedFinetune,
    Focal,
}

impl Framework {
    pub const ALL: [Framework; 3] = [
        Framework::Supervised,
        Framework::SupervisedFinetune,
        Framework::Focal,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Framework::Supervised => "SUPERVISED",
            Framework::SupervisedFinetune => "SUPERVISED_FINETUNE",
            Framework::Focal => "FOCAL",
        }
    }

    pub fn display_name(&self) -> &'static str {
        match self {
            Framework::Supervised => "Supervised",
            Framework::SupervisedFinetune => "Supervised-fine-tune",
            Framework::Focal => "FOCAL",
        }
    }
}

impl std::str::FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Framework::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown framework `{s}`")))
    }
}

pub const DEFAULT_LABEL_RATIOS: [f64; 4] = [1.0, 0.5, 0.1, 0.01];

/// One evaluated grid cell on one test domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub encoder: EncoderKind,
    pub framework: Framework,
    pub label_ratio: f64,
    pub train_domain: DomainTag,
    pub test_domain: DomainTag,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCurve {
    /// Cell identifier, also the file stem of the emitted curve files.
    pub cell: String,
    pub points: Vec<ConvergencePoint>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub curves: Vec<ConvergenceCurve>,
}

impl EvalReport {
    pub fn check(&self) -> Result<()> {
        for row in &self.rows {
            for (what, v) in [("accuracy", row.accuracy), ("macro_f1", row.macro_f1)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidArgument(format!("{what} {v} outside [0, 1]")));
                }
            }
            if !(row.label_ratio > 0.0 && row.label_ratio <= 1.0) {
                return Err(Error::RatioOutOfRange(row.label_ratio));
            }
        }
        Ok(())
    }
}
