//! Stream segmentation, per-interval STFT and spectrogram standardization.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array3, ArrayView2};
use realfft::{RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::datamodel::{find_spec, DomainTag, ModalitySpec, Segment, Signals, Spectrogram};
use crate::error::{Error, Result};

/// Metadata stamped onto every segment cut from one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamInfo {
    pub run_id: String,
    pub label: Option<usize>,
    pub domain: DomainTag,
    /// Wall-clock time of the first stream sample.
    pub start_offset_s: f64,
}

impl StreamInfo {
    pub fn unlabeled(run_id: impl Into<String>, domain: DomainTag) -> Self {
        Self {
            run_id: run_id.into(),
            label: None,
            domain,
            start_offset_s: 0.0,
        }
    }
}

const TIME_EPS: f64 = 1e-9;

/// Cuts synchronized multimodal streams into overlapping fixed-length windows.
///
/// Windows advance by `segment_seconds * (1 - overlap_ratio)`. Start times are
/// quantized on the grid of the slowest modality so every modality is cut at
/// the same wall-clock instant.
pub fn segment_stream(
    waveforms: &Signals,
    specs: &[ModalitySpec],
    segment_seconds: f64,
    overlap_ratio: f64,
    info: &StreamInfo,
) -> Result<Vec<Segment>> {
    if !(0.0..1.0).contains(&overlap_ratio) {
        return Err(Error::InvalidArgument(format!(
            "overlap_ratio {overlap_ratio} outside [0, 1)"
        )));
    }
    if !(segment_seconds > 0.0 && segment_seconds.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "segment_seconds {segment_seconds} must be positive"
        )));
    }
    if waveforms.is_empty() {
        return Err(Error::Empty);
    }
    let mut durations = Vec::with_capacity(waveforms.len());
    for (name, wave) in waveforms {
        let spec = find_spec(specs, name)?;
        if wave.nrows() != spec.channels {
            return Err(Error::ShapeMismatch(format!(
                "`{name}` stream has {} channels, expected {}",
                wave.nrows(),
                spec.channels
            )));
        }
        let expected = spec.sample_rate_hz as f64 * segment_seconds;
        if (expected.round() as usize) != spec.samples_per_segment() {
            return Err(Error::ShapeMismatch(format!(
                "`{name}` spec is laid out for {} s segments, not {segment_seconds} s",
                spec.segment_seconds
            )));
        }
        durations.push((spec, wave.ncols() as f64 / spec.sample_rate_hz as f64));
    }
    let slowest = durations
        .iter()
        .map(|(spec, _)| spec.sample_rate_hz)
        .min()
        .unwrap_or(1) as f64;
    let shortest = durations.iter().map(|d| d.1).fold(f64::INFINITY, f64::min);
    let longest = durations.iter().map(|d| d.1).fold(0.0, f64::max);
    if longest - shortest > 1.0 / slowest + TIME_EPS {
        return Err(Error::MisalignedStreams(format!(
            "durations range from {shortest} s to {longest} s"
        )));
    }
    if shortest + TIME_EPS < segment_seconds {
        return Err(Error::StreamTooShort {
            duration_s: shortest,
            segment_s: segment_seconds,
        });
    }

    let stride = segment_seconds * (1.0 - overlap_ratio);
    let count = ((shortest - segment_seconds) / stride + TIME_EPS).floor() as usize + 1;
    let mut segments = Vec::with_capacity(count);
    for k in 0..count {
        let start_s = (k as f64 * stride * slowest).round() / slowest;
        let mut signals = Signals::new();
        for (name, wave) in waveforms {
            let spec = find_spec(specs, name)?;
            let rate = spec.sample_rate_hz as f64;
            let start = (start_s * rate).round() as usize;
            let len = spec.samples_per_segment();
            if start + len > wave.ncols() {
                break;
            }
            let window = wave.slice(ndarray::s![.., start..start + len]).to_owned();
            signals.insert(name.clone(), window);
        }
        if signals.len() != waveforms.len() {
            break;
        }
        segments.push(Segment {
            signals,
            label: info.label,
            domain: info.domain,
            run_id: info.run_id.clone(),
            start_time_s: info.start_offset_s + start_s,
        });
    }
    Ok(segments)
}

thread_local! {
    static PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

fn forward_plan(len: usize) -> Arc<dyn RealToComplex<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(len))
}

/// Splits each channel into `num_intervals` equal pieces and applies a
/// real-input FFT (rectangular window) to each piece.
pub fn signal_stft(
    modality: &str,
    signal: ArrayView2<'_, f32>,
    num_intervals: usize,
) -> Result<Spectrogram> {
    let (channels, samples) = signal.dim();
    if num_intervals == 0 || samples % num_intervals != 0 || samples == 0 {
        return Err(Error::Indivisible {
            len: samples,
            parts: num_intervals,
        });
    }
    let len = samples / num_intervals;
    let bins = len / 2 + 1;
    let plan = forward_plan(len);
    let mut input = plan.make_input_vec();
    let mut output = plan.make_output_vec();
    let mut scratch = plan.make_scratch_vec();
    let mut re = Array3::zeros((channels, num_intervals, bins));
    let mut im = Array3::zeros((channels, num_intervals, bins));
    for c in 0..channels {
        let row = signal.row(c);
        for i in 0..num_intervals {
            for (dst, src) in input.iter_mut().zip(row.iter().skip(i * len)) {
                *dst = *src as f64;
            }
            plan.process_with_scratch(&mut input, &mut output, &mut scratch)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for (k, z) in output.iter().enumerate() {
                re[[c, i, k]] = z.re;
                im[[c, i, k]] = z.im;
            }
        }
    }
    Ok(Spectrogram {
        modality: modality.to_string(),
        re,
        im,
        normalized: false,
    })
}

/// Per-interval spectrogram of every modality of a segment.
pub fn interval_stft(
    segment: &Segment,
    specs: &[ModalitySpec],
) -> Result<BTreeMap<String, Spectrogram>> {
    stft_signals(&segment.signals, specs)
}

pub fn stft_signals(
    signals: &Signals,
    specs: &[ModalitySpec],
) -> Result<BTreeMap<String, Spectrogram>> {
    specs
        .iter()
        .map(|spec| {
            let signal = signals.get(&spec.name).ok_or_else(|| {
                Error::ShapeMismatch(format!("missing `{}` signal", spec.name))
            })?;
            let spectrogram = signal_stft(&spec.name, signal.view(), spec.num_intervals)?;
            Ok((spec.name.clone(), spectrogram))
        })
        .collect()
}

pub const STD_FLOOR: f64 = 1e-8;

/// Mean and standard deviation of the real and imaginary planes of one modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneStats {
    pub mean_re: f64,
    pub std_re: f64,
    pub mean_im: f64,
    pub std_im: f64,
}

impl PlaneStats {
    pub const IDENTITY: PlaneStats = PlaneStats {
        mean_re: 0.0,
        std_re: 1.0,
        mean_im: 0.0,
        std_im: 1.0,
    };
}

/// Training-set standardization constants, keyed by modality.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NormStats {
    pub modalities: BTreeMap<String, PlaneStats>,
}

impl NormStats {
    pub fn get(&self, modality: &str) -> Result<&PlaneStats> {
        self.modalities
            .get(modality)
            .ok_or_else(|| Error::UnknownModality(modality.to_string()))
    }
}

/// `(count, mean, sum of squared deviations)` of one plane of one spectrogram.
#[derive(Debug, Clone, Copy)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn of<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> Self {
        let (n, sum) = values.clone().fold((0.0, 0.0), |(n, s), v| (n + 1.0, s + v));
        let mean = sum / n;
        let m2 = values.map(|v| (v - mean) * (v - mean)).sum();
        Self { n, mean, m2 }
    }

    fn merge(self, other: Self) -> Self {
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        Self {
            n,
            mean: self.mean + delta * other.n / n,
            m2: self.m2 + other.m2 + delta * delta * self.n * other.n / n,
        }
    }
}

/// Folds per-spectrogram moments after sorting them, so the result does not
/// depend on input order.
fn reduce(mut parts: Vec<Moments>) -> (f64, f64) {
    parts.sort_by(|a, b| {
        a.mean
            .total_cmp(&b.mean)
            .then(a.m2.total_cmp(&b.m2))
            .then(a.n.total_cmp(&b.n))
    });
    let total = parts
        .into_iter()
        .reduce(Moments::merge)
        .expect("reduce called on non-empty parts");
    (total.mean, (total.m2 / total.n).sqrt().max(STD_FLOOR))
}

#[derive(Default)]
struct StatsBuilder {
    parts: BTreeMap<String, (Vec<Moments>, Vec<Moments>)>,
}

impl StatsBuilder {
    fn push(&mut self, spectrogram: &Spectrogram) {
        let entry = self.parts.entry(spectrogram.modality.clone()).or_default();
        entry.0.push(Moments::of(spectrogram.re.iter()));
        entry.1.push(Moments::of(spectrogram.im.iter()));
    }

    fn finish(self) -> Result<NormStats> {
        if self.parts.is_empty() {
            return Err(Error::EmptyCollection);
        }
        let modalities = self
            .parts
            .into_iter()
            .map(|(name, (re, im))| {
                let (mean_re, std_re) = reduce(re);
                let (mean_im, std_im) = reduce(im);
                (
                    name,
                    PlaneStats {
                        mean_re,
                        std_re,
                        mean_im,
                        std_im,
                    },
                )
            })
            .collect();
        Ok(NormStats { modalities })
    }
}

/// Per-modality plane statistics over a training collection.
pub fn compute_norm_stats(spectrograms: &[BTreeMap<String, Spectrogram>]) -> Result<NormStats> {
    let mut builder = StatsBuilder::default();
    for sample in spectrograms {
        for spectrogram in sample.values() {
            builder.push(spectrogram);
        }
    }
    builder.finish()
}

/// Same as [`compute_norm_stats`] but transforms one segment at a time.
pub fn norm_stats_for_segments<'a>(
    segments: impl IntoIterator<Item = &'a Segment>,
    specs: &[ModalitySpec],
) -> Result<NormStats> {
    let mut builder = StatsBuilder::default();
    for segment in segments {
        for spectrogram in interval_stft(segment, specs)?.values() {
            builder.push(spectrogram);
        }
    }
    builder.finish()
}

/// Standardizes both planes with the training statistics.
pub fn normalize(spectrogram: &Spectrogram, stats: &NormStats) -> Result<Spectrogram> {
    if spectrogram.normalized {
        return Err(Error::AlreadyNormalized);
    }
    let s = stats.get(&spectrogram.modality)?;
    Ok(Spectrogram {
        modality: spectrogram.modality.clone(),
        re: spectrogram.re.mapv(|v| (v - s.mean_re) / s.std_re),
        im: spectrogram.im.mapv(|v| (v - s.mean_im) / s.std_im),
        normalized: true,
    })
}

/// Inverse of [`normalize`].
pub fn denormalize(spectrogram: &Spectrogram, stats: &NormStats) -> Result<Spectrogram> {
    if !spectrogram.normalized {
        return Err(Error::NotNormalized);
    }
    let s = stats.get(&spectrogram.modality)?;
    Ok(Spectrogram {
        modality: spectrogram.modality.clone(),
        re: spectrogram.re.mapv(|v| v * s.std_re + s.mean_re),
        im: spectrogram.im.mapv(|v| v * s.std_im + s.mean_im),
        normalized: false,
    })
}
