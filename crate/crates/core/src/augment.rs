//! Semantics-preserving transformations applied during training.
//!
//! Time-domain operations act on raw `[channels, samples]` signals before the
//! STFT; phase shift acts on the complex spectrogram afterwards. Mixup needs a
//! partner sample and is applied per batch by the training loops.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Signal, Signals, Spectrogram, Stage};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    Permutation,
    Negation,
    TimeWarp,
    HorizontalFlip,
    MagnitudeWarp,
    Scaling,
    PhaseShift,
    Mixup,
}

impl AugmentationKind {
    pub const PRETRAIN: [AugmentationKind; 7] = [
        AugmentationKind::Permutation,
        AugmentationKind::Negation,
        AugmentationKind::TimeWarp,
        AugmentationKind::HorizontalFlip,
        AugmentationKind::MagnitudeWarp,
        AugmentationKind::Scaling,
        AugmentationKind::PhaseShift,
    ];
    pub const LABELED: [AugmentationKind; 2] =
        [AugmentationKind::Mixup, AugmentationKind::PhaseShift];

    /// Operations a stage may draw from.
    pub fn allowed_for(stage: Stage) -> &'static [AugmentationKind] {
        match stage {
            Stage::Pretrain => &Self::PRETRAIN,
            Stage::Supervised | Stage::Finetune | Stage::SupervisedFinetune => &Self::LABELED,
        }
    }

    pub fn is_frequency_domain(&self) -> bool {
        matches!(self, AugmentationKind::PhaseShift)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AugmentationKind::Permutation => "permutation",
            AugmentationKind::Negation => "negation",
            AugmentationKind::TimeWarp => "time_warp",
            AugmentationKind::HorizontalFlip => "horizontal_flip",
            AugmentationKind::MagnitudeWarp => "magnitude_warp",
            AugmentationKind::Scaling => "scaling",
            AugmentationKind::PhaseShift => "phase_shift",
            AugmentationKind::Mixup => "mixup",
        }
    }
}

/// Parameter distributions of the augmentation operations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Chance that each enabled pre-training operation enters a view's plan.
    pub op_probability: f64,
    pub permutation_min_chunks: usize,
    pub permutation_max_chunks: usize,
    pub warp_knots: usize,
    pub warp_sigma: f64,
    pub magnitude_knots: usize,
    pub magnitude_sigma: f64,
    pub scaling_min: f64,
    pub scaling_max: f64,
    pub mixup_alpha: f64,
    /// Phase angles are drawn uniformly from `[-phase_max, phase_max]`.
    pub phase_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            op_probability: 0.5,
            permutation_min_chunks: 2,
            permutation_max_chunks: 8,
            warp_knots: 4,
            warp_sigma: 0.2,
            magnitude_knots: 4,
            magnitude_sigma: 0.2,
            scaling_min: 0.5,
            scaling_max: 2.0,
            mixup_alpha: 0.2,
            phase_max: PI,
        }
    }
}

impl AugmentConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("augment: {m}")));
        if !(0.0..=1.0).contains(&self.op_probability) {
            return bad("op_probability must lie in [0, 1]");
        }
        if self.permutation_min_chunks < 2 || self.permutation_max_chunks < self.permutation_min_chunks {
            return bad("permutation chunk range must satisfy 2 <= min <= max");
        }
        if self.warp_knots < 2 || self.magnitude_knots < 2 {
            return bad("warps need at least 2 knots");
        }
        if !(self.warp_sigma > 0.0 && self.magnitude_sigma > 0.0) {
            return bad("warp sigmas must be positive");
        }
        if !(self.scaling_min > 0.0 && self.scaling_max >= self.scaling_min) {
            return bad("scaling range must be positive and ordered");
        }
        if !(self.mixup_alpha > 0.0) {
            return bad("mixup_alpha must be positive");
        }
        if !(self.phase_max >= 0.0) {
            return bad("phase_max must be non-negative");
        }
        Ok(())
    }
}

pub fn negate(x: &Signal) -> Signal {
    x.mapv(|v| -v)
}

pub fn scaling(x: &Signal, factor: f64) -> Result<Signal> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::NonPositiveFactor(factor));
    }
    let f = factor as f32;
    Ok(x.mapv(|v| v * f))
}

/// Reverses the time axis of every channel.
pub fn horizontal_flip(x: &Signal) -> Signal {
    x.slice(s![.., ..;-1]).to_owned()
}

/// Splits each channel into `order.len()` equal chunks and lays them out in
/// the given order.
pub fn permute_chunks(x: &Signal, order: &[usize]) -> Result<Signal> {
    let k = order.len();
    let len = x.ncols();
    if k < 2 || k > len {
        return Err(Error::InvalidArgument(format!(
            "chunk count {k} outside [2, {len}]"
        )));
    }
    if len % k != 0 {
        return Err(Error::IndivisibleLength { len, k });
    }
    let mut seen = vec![false; k];
    for &o in order {
        if o >= k || std::mem::replace(&mut seen[o], true) {
            return Err(Error::InvalidArgument(format!("{order:?} is not a permutation")));
        }
    }
    let chunk = len / k;
    let mut out = Array2::zeros(x.raw_dim());
    for (dst, &src) in order.iter().enumerate() {
        out.slice_mut(s![.., dst * chunk..(dst + 1) * chunk])
            .assign(&x.slice(s![.., src * chunk..(src + 1) * chunk]));
    }
    Ok(out)
}

/// Shuffles `k` equal-length chunks of the time axis.
pub fn permutation(x: &Signal, k: usize, rng: &mut Rng) -> Result<Signal> {
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    permute_chunks(x, &order)
}

/// Catmull-Rom interpolation through equally spaced knots spanning `[0, 1]`.
fn cubic_interp(knots: &[f64], u: f64) -> f64 {
    let n = knots.len();
    debug_assert!(n >= 2);
    let t = u.clamp(0.0, 1.0) * (n - 1) as f64;
    let j = (t.floor() as usize).min(n - 2);
    let tau = t - j as f64;
    let p1 = knots[j];
    let p2 = knots[j + 1];
    let p0 = if j == 0 { 2.0 * p1 - p2 } else { knots[j - 1] };
    let p3 = if j + 2 < n { knots[j + 2] } else { 2.0 * p2 - p1 };
    0.5 * (2.0 * p1
        + (p2 - p0) * tau
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * tau * tau
        + (3.0 * p1 - p0 - 3.0 * p2 + p3) * tau * tau * tau)
}

fn check_knots(n_knots: usize, sigma: f64) -> Result<()> {
    if n_knots < 2 {
        return Err(Error::InvalidArgument(format!("n_knots {n_knots} < 2")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be positive")));
    }
    Ok(())
}

fn draw_knots(n_knots: usize, mean: f64, sigma: f64, rng: &mut Rng) -> Vec<f64> {
    let normal = Normal::new(mean, sigma).expect("sigma validated");
    (0..n_knots).map(|_| normal.sample(rng)).collect()
}

const MIN_WARP_SPEED: f64 = 1e-3;

/// Source positions, in samples, read by a time warp with the given speed
/// knots. First and last positions are pinned to the endpoints.
fn warp_positions(len: usize, speed_offsets: &[f64]) -> Vec<f64> {
    if len < 2 {
        return vec![0.0; len];
    }
    let last = (len - 1) as f64;
    let speed: Vec<f64> = (0..len)
        .map(|i| (1.0 + cubic_interp(speed_offsets, i as f64 / last)).max(MIN_WARP_SPEED))
        .collect();
    let mut cumulative = Vec::with_capacity(len);
    let mut acc = 0.0;
    cumulative.push(0.0);
    for w in speed.windows(2) {
        acc += 0.5 * (w[0] + w[1]);
        cumulative.push(acc);
    }
    cumulative.iter().map(|c| c / acc * last).collect()
}

/// Resamples the signal along a smooth monotone time remapping.
pub fn time_warp(x: &Signal, n_knots: usize, sigma: f64, rng: &mut Rng) -> Result<Signal> {
    check_knots(n_knots, sigma)?;
    let offsets = draw_knots(n_knots, 0.0, sigma, rng);
    let positions = warp_positions(x.ncols(), &offsets);
    let len = x.ncols();
    let mut out = Array2::zeros(x.raw_dim());
    for (src, mut dst) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        for (o, &p) in dst.iter_mut().zip(&positions) {
            let i = (p.floor() as usize).min(len.saturating_sub(2));
            let frac = (p - i as f64) as f32;
            let a = src[i];
            let b = if i + 1 < len { src[i + 1] } else { a };
            *o = a + frac * (b - a);
        }
    }
    Ok(out)
}

/// Multiplies the signal by a smooth random envelope centred on 1.
pub fn magnitude_warp(x: &Signal, n_knots: usize, sigma: f64, rng: &mut Rng) -> Result<Signal> {
    check_knots(n_knots, sigma)?;
    let knots = draw_knots(n_knots, 1.0, sigma, rng);
    let len = x.ncols();
    let last = (len.max(2) - 1) as f64;
    let envelope: Vec<f32> = (0..len)
        .map(|i| cubic_interp(&knots, i as f64 / last) as f32)
        .collect();
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        for (v, e) in row.iter_mut().zip(&envelope) {
            *v *= e;
        }
    }
    Ok(out)
}

/// Rotates every complex entry by `theta` radians.
pub fn phase_shift(spec: &Spectrogram, theta: f64) -> Spectrogram {
    let (sin, cos) = theta.sin_cos();
    let mut re = spec.re.clone();
    let mut im = spec.im.clone();
    ndarray::Zip::from(&mut re)
        .and(&mut im)
        .for_each(|r, i| {
            let (a, b) = (*r, *i);
            *r = a * cos - b * sin;
            *i = a * sin + b * cos;
        });
    Spectrogram {
        modality: spec.modality.clone(),
        re,
        im,
        normalized: spec.normalized,
    }
}

/// A training example with a (possibly soft) class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftExample {
    pub signals: Signals,
    pub target: Vec<f64>,
}

impl SoftExample {
    pub fn one_hot(signals: Signals, label: usize, num_classes: usize) -> Self {
        let mut target = vec![0.0; num_classes];
        target[label] = 1.0;
        Self { signals, target }
    }
}

/// Convex combination `lambda * a + (1 - lambda) * b` of inputs and targets.
pub fn mixup(a: &SoftExample, b: &SoftExample, lambda: f64) -> Result<SoftExample> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    if a.target.len() != b.target.len() {
        return Err(Error::ShapeMismatch(format!(
            "targets of {} and {} classes",
            a.target.len(),
            b.target.len()
        )));
    }
    let mut signals = Signals::new();
    for (name, xa) in &a.signals {
        let xb = b
            .signals
            .get(name)
            .filter(|xb| xb.shape() == xa.shape())
            .ok_or_else(|| Error::ShapeMismatch(format!("`{name}` signals differ in shape")))?;
        signals.insert(name.clone(), mix_signal(xa, xb, lambda));
    }
    if b.signals.len() != a.signals.len() {
        return Err(Error::ShapeMismatch("examples have different modalities".into()));
    }
    let target = a
        .target
        .iter()
        .zip(&b.target)
        .map(|(ta, tb)| lambda * ta + (1.0 - lambda) * tb)
        .collect();
    Ok(SoftExample { signals, target })
}

pub(crate) fn mix_signal(a: &Signal, b: &Signal, lambda: f64) -> Signal {
    let mut out = a.clone();
    out.zip_mut_with(b, |o, &v| *o = (lambda * *o as f64 + (1.0 - lambda) * v as f64) as f32);
    out
}

pub fn sample_mixup_lambda(alpha: f64, rng: &mut Rng) -> f64 {
    Beta::new(alpha, alpha)
        .expect("mixup_alpha validated")
        .sample(rng)
}

/// The operations applied to one view of one sample, with the seed of the
/// stream their parameters are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub stage: Stage,
    pub time_domain_ops: Vec<AugmentationKind>,
    pub freq_domain_ops: Vec<AugmentationKind>,
    pub params: AugmentConfig,
    pub rng_seed: u64,
}

/// Plan with default parameters and every operation of the stage enabled.
pub fn sample_plan(stage: Stage, rng_seed: u64) -> AugmentationPlan {
    sample_plan_with(
        stage,
        rng_seed,
        &AugmentConfig::default(),
        AugmentationKind::allowed_for(stage),
    )
}

/// Pre-training keeps each enabled operation with probability
/// `op_probability`; labeled stages always apply their enabled operations.
/// Operations outside the stage's allowed set are never planned.
pub fn sample_plan_with(
    stage: Stage,
    rng_seed: u64,
    params: &AugmentConfig,
    enabled: &[AugmentationKind],
) -> AugmentationPlan {
    let mut rng = rng::stream(rng_seed, "plan", &[]);
    let mut time_domain_ops = Vec::new();
    let mut freq_domain_ops = Vec::new();
    for &op in AugmentationKind::allowed_for(stage) {
        if !enabled.contains(&op) {
            continue;
        }
        let keep = match stage {
            Stage::Pretrain => rng.random_bool(params.op_probability),
            _ => true,
        };
        if keep {
            if op.is_frequency_domain() {
                freq_domain_ops.push(op);
            } else {
                time_domain_ops.push(op);
            }
        }
    }
    AugmentationPlan {
        stage,
        time_domain_ops,
        freq_domain_ops,
        params: params.clone(),
        rng_seed,
    }
}

impl AugmentationPlan {
    pub fn ops(&self) -> impl Iterator<Item = AugmentationKind> + '_ {
        self.time_domain_ops.iter().chain(&self.freq_domain_ops).copied()
    }

    pub fn has(&self, op: AugmentationKind) -> bool {
        self.ops().any(|o| o == op)
    }

    fn modality_rng(&self, domain: &str, modality: &str) -> Rng {
        let tag = modality.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
        rng::stream(self.rng_seed, domain, &[tag])
    }

    /// Applies the per-sample time-domain operations. Mixup is skipped here.
    pub fn apply_time(&self, signals: &Signals) -> Result<Signals> {
        let p = &self.params;
        let mut out = Signals::new();
        for (name, signal) in signals {
            let mut rng = self.modality_rng("time", name);
            let mut x = signal.clone();
            for op in &self.time_domain_ops {
                x = match op {
                    AugmentationKind::Permutation => {
                        let len = x.ncols();
                        let choices: Vec<usize> = (p.permutation_min_chunks..=p.permutation_max_chunks)
                            .filter(|k| *k <= len && len % k == 0)
                            .collect();
                        match choices.as_slice() {
                            [] => x,
                            ks => {
                                let k = ks[rng.random_range(0..ks.len())];
                                permutation(&x, k, &mut rng)?
                            }
                        }
                    }
                    AugmentationKind::Negation => negate(&x),
                    AugmentationKind::TimeWarp => time_warp(&x, p.warp_knots, p.warp_sigma, &mut rng)?,
                    AugmentationKind::HorizontalFlip => horizontal_flip(&x),
                    AugmentationKind::MagnitudeWarp => {
                        magnitude_warp(&x, p.magnitude_knots, p.magnitude_sigma, &mut rng)?
                    }
                    AugmentationKind::Scaling => {
                        let f = if p.scaling_max > p.scaling_min {
                            rng.random_range(p.scaling_min..p.scaling_max)
                        } else {
                            p.scaling_min
                        };
                        scaling(&x, f)?
                    }
                    AugmentationKind::Mixup | AugmentationKind::PhaseShift => x,
                };
            }
            out.insert(name.clone(), x);
        }
        Ok(out)
    }

    /// Phase angle per modality, or `None` when the plan has no phase shift.
    pub fn phase_angle(&self, modality: &str) -> Option<f64> {
        if !self.freq_domain_ops.contains(&AugmentationKind::PhaseShift) {
            return None;
        }
        let mut rng = self.modality_rng("freq", modality);
        let max = self.params.phase_max;
        Some(if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 })
    }

    pub fn apply_freq(&self, spectrograms: &BTreeMap<String, Spectrogram>) -> BTreeMap<String, Spectrogram> {
        spectrograms
            .iter()
            .map(|(name, spec)| {
                let out = match self.phase_angle(name) {
                    Some(theta) => phase_shift(spec, theta),
                    None => spec.clone(),
                };
                (name.clone(), out)
            })
            .collect()
    }
}

/// Counts of operations applied during a run, for auditing stage gating.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentAudit {
    pub applied: BTreeMap<AugmentationKind, usize>,
}

impl AugmentAudit {
    pub fn record(&mut self, plan: &AugmentationPlan) {
        for op in plan.ops() {
            *self.applied.entry(op).or_default() += 1;
        }
    }

    pub fn record_op(&mut self, op: AugmentationKind) {
        *self.applied.entry(op).or_default() += 1;
    }

    pub fn respects(&self, stage: Stage) -> bool {
        let allowed = AugmentationKind::allowed_for(stage);
        self.applied.keys().all(|op| allowed.contains(op))
    }
}
