//! Synthetic multimodal vibration runs with planted shared and private
//! structure.
//!
//! Each run is the sum of three parts:
//! - a class signature: a harmonic stack whose fundamental is set per class
//!   and modality, modulated by an envelope shared by every modality;
//! - a private texture per modality, drawn without looking at the label;
//! - noise (white background, low-frequency wind rumble, decaying transients).

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::datamodel::{default_specs, DomainTag, ModalitySpec, Segment, Signals, ACOUSTIC, SEISMIC};
use crate::error::{Error, Result};
use crate::preprocess::{interval_stft, segment_stream, StreamInfo};
use crate::rng::stream;

pub const SPEC_FILE: &str = "synth.toml";

/// Frequencies and modulation of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSignature {
    /// Fundamental frequency per modality, Hz.
    pub fundamental_hz: BTreeMap<String, f64>,
    /// Relative amplitude of harmonic 1, 2, ...
    pub harmonics: Vec<f64>,
    /// Rate of the shared amplitude envelope, Hz.
    pub am_rate_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub background_std: f64,
    pub wind_band_power: f64,
    /// Expected transients per second.
    pub transient_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub classes: Vec<ClassSignature>,
    pub shared_strength: f64,
    pub private_strength: BTreeMap<String, f64>,
    /// Frequency range of the private texture tones per modality, Hz.
    pub texture_band_hz: BTreeMap<String, [f64; 2]>,
    pub noise: NoiseSpec,
    /// Multipliers applied to `noise` for the shifted domain.
    pub domain_shift: NoiseSpec,
    /// Relative spread of each run's fundamentals around the class value.
    pub frequency_jitter: f64,
    /// Depth of the shared envelope in [0, 1].
    pub am_depth: f64,
    pub duration_s: f64,
    pub runs_per_class: usize,
    pub overlap_ratio: f64,
    pub modalities: Vec<ModalitySpec>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let num_classes = 4;
        Self {
            num_classes,
            classes: default_classes(num_classes),
            shared_strength: 1.0,
            private_strength: [(ACOUSTIC.to_string(), 0.8), (SEISMIC.to_string(), 0.8)].into(),
            texture_band_hz: [(ACOUSTIC.to_string(), [40.0, 600.0]), (SEISMIC.to_string(), [3.0, 45.0])].into(),
            noise: NoiseSpec {
                background_std: 0.6,
                wind_band_power: 0.3,
                transient_rate: 0.2,
            },
            domain_shift: NoiseSpec {
                background_std: 2.0,
                wind_band_power: 2.0,
                transient_rate: 2.0,
            },
            frequency_jitter: 0.25,
            am_depth: 0.6,
            duration_s: 60.0,
            runs_per_class: 10,
            overlap_ratio: 0.2,
            modalities: default_specs(),
            seed: 0,
        }
    }
}

/// Closely spaced fundamentals: seismic 6, 8, 10, ... Hz and acoustic 13x
/// those, with two harmonics whose balance changes by class.
pub fn default_classes(num_classes: usize) -> Vec<ClassSignature> {
    (0..num_classes)
        .map(|c| {
            let seismic = 6.0 + 2.0 * c as f64;
            ClassSignature {
                fundamental_hz: [(ACOUSTIC.to_string(), 13.0 * seismic), (SEISMIC.to_string(), seismic)].into(),
                harmonics: vec![1.0, 0.2 + 0.1 * c as f64],
                am_rate_hz: 0.5 + 0.25 * c as f64,
            }
        })
        .collect()
}

impl SynthSpec {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.classes.len() != self.num_classes {
            return bad(format!(
                "{} class signatures for {} classes",
                self.classes.len(),
                self.num_classes
            ));
        }
        if self.runs_per_class == 0 {
            return bad("runs_per_class must be positive".into());
        }
        if self.modalities.is_empty() {
            return bad("no modalities".into());
        }
        for spec in &self.modalities {
            spec.check()?;
        }
        if !(self.duration_s >= self.modalities[0].segment_seconds && self.duration_s.is_finite()) {
            return bad(format!("duration_s {} shorter than one segment", self.duration_s));
        }
        if !(0.0..1.0).contains(&self.overlap_ratio) {
            return bad(format!("overlap_ratio {} outside [0, 1)", self.overlap_ratio));
        }
        let mut strengths = vec![
            self.shared_strength,
            self.frequency_jitter,
            self.am_depth,
            self.noise.background_std,
            self.noise.wind_band_power,
            self.noise.transient_rate,
            self.domain_shift.background_std,
            self.domain_shift.wind_band_power,
            self.domain_shift.transient_rate,
        ];
        strengths.extend(self.private_strength.values());
        if strengths.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("strengths, noise levels and multipliers must be non-negative".into());
        }
        if self.am_depth > 1.0 || self.frequency_jitter >= 1.0 {
            return bad("am_depth must be at most 1 and frequency_jitter below 1".into());
        }
        for name in self.private_strength.keys().chain(self.texture_band_hz.keys()) {
            if !self.modalities.iter().any(|m| &m.name == name) {
                return Err(Error::UnknownModality(name.clone()));
            }
        }
        for (name, [lo, hi]) in &self.texture_band_hz {
            if !(*lo > 0.0 && lo < hi) {
                return bad(format!("`{name}` texture band [{lo}, {hi}] is empty"));
            }
            let nyquist = self.modalities.iter().find(|m| &m.name == name).map_or(0.0, |m| m.nyquist_hz());
            if *hi >= nyquist {
                return Err(Error::NyquistViolation {
                    modality: name.clone(),
                    freq_hz: *hi,
                    nyquist_hz: nyquist,
                });
            }
        }
        for class in &self.classes {
            if class.harmonics.iter().any(|h| !(*h >= 0.0 && h.is_finite())) || class.am_rate_hz < 0.0 {
                return bad("harmonic amplitudes and envelope rates must be non-negative".into());
            }
            for spec in &self.modalities {
                let f0 = *class.fundamental_hz.get(&spec.name).ok_or_else(|| {
                    Error::Config(format!("class signature lacks a `{}` fundamental", spec.name))
                })?;
                if !(f0 > 0.0) {
                    return bad(format!("`{}` fundamental {f0} must be positive", spec.name));
                }
                let top = f0 * class.harmonics.len() as f64 * (1.0 + self.frequency_jitter);
                if top >= spec.nyquist_hz() {
                    return Err(Error::NyquistViolation {
                        modality: spec.name.clone(),
                        freq_hz: top,
                        nyquist_hz: spec.nyquist_hz(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn noise_for(&self, domain: DomainTag) -> NoiseSpec {
        match domain {
            DomainTag::SynthB | DomainTag::Noisy => NoiseSpec {
                background_std: self.noise.background_std * self.domain_shift.background_std,
                wind_band_power: self.noise.wind_band_power * self.domain_shift.wind_band_power,
                transient_rate: self.noise.transient_rate * self.domain_shift.transient_rate,
            },
            _ => self.noise,
        }
    }

    pub fn num_runs(&self) -> usize {
        self.num_classes * self.runs_per_class
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.check()?;
        Ok(spec)
    }
}

fn samples(spec: &ModalitySpec, duration_s: f64) -> usize {
    (duration_s * spec.sample_rate_hz as f64).round() as usize
}

/// Class-bearing component of run `run` for every modality. The envelope
/// phase and the per-run jitter are shared across modalities.
fn signature(spec: &SynthSpec, class: usize, run: usize) -> Signals {
    let sig = &spec.classes[class];
    let mut rng = stream(spec.seed, "synth-signature", &[run as u64]);
    let jitter = 1.0 + spec.frequency_jitter * rng.random_range(-1.0..=1.0);
    let env_phase = rng.random_range(0.0..TAU);
    let phases: Vec<f64> = sig.harmonics.iter().map(|_| rng.random_range(0.0..TAU)).collect();
    spec.modalities
        .iter()
        .map(|m| {
            let rate = m.sample_rate_hz as f64;
            let f0 = sig.fundamental_hz[&m.name] * jitter;
            let n = samples(m, spec.duration_s);
            let wave = Array2::from_shape_fn((m.channels, n), |(_, i)| {
                let t = i as f64 / rate;
                let env = 1.0 + spec.am_depth * (TAU * sig.am_rate_hz * t + env_phase).sin();
                let stack: f64 = sig
                    .harmonics
                    .iter()
                    .zip(&phases)
                    .enumerate()
                    .map(|(h, (a, p))| a * (TAU * f0 * (h + 1) as f64 * t + p).sin())
                    .sum();
                (spec.shared_strength * env * stack) as f32
            });
            (m.name.clone(), wave)
        })
        .collect()
}

/// Modality-exclusive texture of run `run`: three tones at random
/// frequencies inside the modality's texture band (default: the middle 80%
/// of the spectrum), each with its own slow envelope. The draw depends on the run
/// index and modality only, never on the label.
pub fn private_texture(spec: &SynthSpec, run: usize, modality: usize) -> Result<Array2<f32>> {
    let m = spec
        .modalities
        .get(modality)
        .ok_or_else(|| Error::UnknownModality(format!("#{modality}")))?;
    let strength = spec.private_strength.get(&m.name).copied().unwrap_or(0.0);
    let mut rng = stream(spec.seed, "synth-texture", &[run as u64, modality as u64]);
    let rate = m.sample_rate_hz as f64;
    let [lo, hi] = spec
        .texture_band_hz
        .get(&m.name)
        .copied()
        .unwrap_or([0.05 * rate, 0.45 * rate]);
    let tones: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(lo..hi),
                rng.random_range(0.0..TAU),
                rng.random_range(0.1..1.0),
                rng.random_range(0.0..TAU),
            ]
        })
        .collect();
    let n = samples(m, spec.duration_s);
    Ok(Array2::from_shape_fn((m.channels, n), |(_, i)| {
        let t = i as f64 / rate;
        let v: f64 = tones
            .iter()
            .map(|[f, p, am, q]| (1.0 + 0.5 * (TAU * am * t + q).sin()) * (TAU * f * t + p).sin())
            .sum();
        (strength * v / 3f64.sqrt()) as f32
    }))
}

/// Noise of run `run` for modality `modality`. The random draws do not depend
/// on the levels, so scaling the levels scales the same realization.
fn noise(spec: &SynthSpec, levels: NoiseSpec, run: usize, modality: usize) -> Array2<f32> {
    let m = &spec.modalities[modality];
    let rate = m.sample_rate_hz as f64;
    let n = samples(m, spec.duration_s);
    let mut rng = stream(spec.seed, "synth-noise", &[run as u64, modality as u64]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // one-pole low-pass at 2% of the sampling rate, scaled to unit variance
    let a = (-TAU * 0.02).exp();
    let gain = (1.0 - a * a).sqrt();
    let wind_amp = levels.wind_band_power.sqrt();
    let mut out = Array2::zeros((m.channels, n));
    for c in 0..m.channels {
        let mut state = normal.sample(&mut rng);
        for i in 0..n {
            state = a * state + gain * normal.sample(&mut rng);
            let white: f64 = normal.sample(&mut rng);
            out[[c, i]] = (levels.background_std * white + wind_amp * state) as f32;
        }
    }
    // Transients are placed from a separate stream so the count can change
    // with the rate without disturbing the draws above.
    let mut trng = stream(spec.seed, "synth-transient", &[run as u64, modality as u64]);
    let expected = levels.transient_rate * spec.duration_s;
    if expected > 0.0 {
        let count = Poisson::new(expected).expect("positive mean").sample(&mut trng) as usize;
        let decay = 0.05 * rate;
        for _ in 0..count {
            let start = trng.random_range(0..n);
            let amp = trng.random_range(1.0..3.0);
            let freq = trng.random_range(0.05..0.4) * rate;
            for i in start..n.min(start + (6.0 * decay) as usize + 1) {
                let k = (i - start) as f64;
                let v = amp * (-k / decay).exp() * (TAU * freq * k / rate).sin();
                for c in 0..m.channels {
                    out[[c, i]] += v as f32;
                }
            }
        }
    }
    out
}

pub fn run_id(class: usize, run: usize) -> String {
    format!("c{class}-r{run:03}")
}

/// Continuous waveforms of one run before segmentation.
pub fn run_waveforms(spec: &SynthSpec, domain: DomainTag, class: usize, run: usize) -> Result<Signals> {
    let global = class * spec.runs_per_class + run;
    let levels = spec.noise_for(domain);
    let mut waves = signature(spec, class, global);
    for (mi, m) in spec.modalities.iter().enumerate() {
        let texture = private_texture(spec, global, mi)?;
        let wave = waves.get_mut(&m.name).expect("signature covers all modalities");
        *wave += &texture;
        *wave += &noise(spec, levels, global, mi);
    }
    Ok(waves)
}

/// Labeled, segmented runs of every class. `domain` must be a synthetic tag;
/// the shifted domain multiplies the noise levels by `domain_shift`.
pub fn generate_dataset(spec: &SynthSpec, domain: DomainTag) -> Result<Vec<Segment>> {
    spec.check()?;
    if !domain.is_synthetic() {
        return Err(Error::InvalidArgument(format!("{domain} is not a synthetic domain")));
    }
    let seconds = spec.modalities[0].segment_seconds;
    let mut out = Vec::new();
    for class in 0..spec.num_classes {
        for run in 0..spec.runs_per_class {
            let waves = run_waveforms(spec, domain, class, run)?;
            let info = StreamInfo {
                run_id: run_id(class, run),
                label: Some(class),
                domain,
                start_offset_s: 0.0,
            };
            out.extend(segment_stream(&waves, &spec.modalities, seconds, spec.overlap_ratio, &info)?);
        }
    }
    Ok(out)
}

/// Writes the dataset and its generating spec side by side.
pub fn write_synth(root: &Path, spec: &SynthSpec, segments: &[Segment]) -> Result<()> {
    crate::store::write_dataset(root, segments)?;
    let path = root.join(SPEC_FILE);
    std::fs::write(&path, spec.to_toml()?).map_err(|e| Error::io(&path, e))
}

/// Per-segment feature: interval- and channel-averaged magnitude spectrum of
/// each modality, concatenated.
fn mean_spectra(segment: &Segment, specs: &[ModalitySpec]) -> Result<Vec<Vec<f64>>> {
    interval_stft(segment, specs)?
        .values()
        .map(|s| {
            let mag = s.magnitude();
            let (c, i, b) = mag.dim();
            Ok((0..b)
                .map(|k| {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ii in 0..i {
                            acc += mag[[ci, ii, k]];
                        }
                    }
                    acc / (c * i) as f64
                })
                .collect())
        })
        .collect()
}

/// Leave-one-out nearest-centroid accuracy on mean magnitude spectra. Each
/// modality block is scaled by its average norm so modalities weigh equally.
pub fn separability_probe(dataset: &[Segment], specs: &[ModalitySpec]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels: Vec<usize> = dataset
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Dataset(format!("unlabeled segment in run {}", s.run_id))))
        .collect::<Result<_>>()?;
    let blocks: Vec<Vec<Vec<f64>>> = dataset.iter().map(|s| mean_spectra(s, specs)).collect::<Result<_>>()?;
    let num_blocks = blocks[0].len();
    let scales: Vec<f64> = (0..num_blocks)
        .map(|b| {
            let mean = blocks.iter().map(|x| norm(&x[b])).sum::<f64>() / blocks.len() as f64;
            if mean > 0.0 { 1.0 / mean } else { 1.0 }
        })
        .collect();
    let features: Vec<Vec<f64>> = blocks
        .iter()
        .map(|x| x.iter().zip(&scales).flat_map(|(v, s)| v.iter().map(move |e| e * s)).collect())
        .collect();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let dim = features[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (f, &y) in features.iter().zip(&labels) {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(f) {
            *s += v;
        }
    }
    let mut correct = 0usize;
    for (f, &y) in features.iter().zip(&labels) {
        let mut best = (f64::INFINITY, usize::MAX);
        for c in 0..k {
            let n = counts[c] - usize::from(c == y);
            if n == 0 {
                continue;
            }
            let d: f64 = sums[c]
                .iter()
                .zip(f)
                .map(|(s, v)| {
                    let mean = if c == y { (s - v) / n as f64 } else { s / n as f64 };
                    (v - mean).powi(2)
                })
                .sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        correct += usize::from(best.1 == y);
    }
    Ok(correct as f64 / dataset.len() as f64)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
