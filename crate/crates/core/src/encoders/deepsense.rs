//! Convolutional-recurrent encoder: per-interval frequency convolutions
//! followed by a stacked GRU over the interval axis.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::datamodel::ModalitySpec;
use crate::error::{Error, Result};
use crate::nn::{conv_output_len, Gru, Linear, ParamStore, PatchConv};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepSenseConfig {
    pub conv_channels: usize,
    /// Kernel and stride used on modalities with at least `wide_min_bins` bins.
    pub wide_kernel: usize,
    pub wide_stride: usize,
    pub narrow_kernel: usize,
    pub narrow_stride: usize,
    pub wide_min_bins: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
}

impl Default for DeepSenseConfig {
    fn default() -> Self {
        Self {
            conv_channels: 16,
            wide_kernel: 8,
            wide_stride: 8,
            narrow_kernel: 3,
            narrow_stride: 1,
            wide_min_bins: 64,
            gru_hidden: 128,
            gru_layers: 2,
        }
    }
}

impl DeepSenseConfig {
    pub fn check(&self) -> Result<()> {
        let sizes = [
            self.conv_channels,
            self.wide_kernel,
            self.wide_stride,
            self.narrow_kernel,
            self.narrow_stride,
            self.gru_hidden,
            self.gru_layers,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config("DeepSense layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn kernel_for(&self, bins: usize) -> (usize, usize) {
        if bins >= self.wide_min_bins {
            (self.wide_kernel, self.wide_stride)
        } else {
            (self.narrow_kernel, self.narrow_stride)
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeepSenseEncoder {
    conv1: PatchConv,
    conv2: PatchConv,
    grus: Vec<Gru>,
    proj: Linear,
    intervals: usize,
    features: usize,
}

impl DeepSenseEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: &ModalitySpec,
        config: &DeepSenseConfig,
        embedding_dim: usize,
    ) -> Result<Self> {
        let planes = 2 * spec.channels;
        let bins = spec.bins();
        let (k, s) = config.kernel_for(bins);
        let p1 = conv_output_len(bins, k, s);
        let p2 = conv_output_len(p1, k, s);
        if p2 == 0 {
            return Err(Error::Config(format!(
                "`{}`: {bins} bins are too few for two convolutions with kernel {k}, stride {s}",
                spec.name
            )));
        }
        let c = config.conv_channels;
        let conv1 = PatchConv::new(store, &format!("{name}.conv1"), planes, c, k, s)?;
        let conv2 = PatchConv::new(store, &format!("{name}.conv2"), c, c, k, s)?;
        let features = p2 * c;
        let mut grus = Vec::with_capacity(config.gru_layers);
        for layer in 0..config.gru_layers {
            let input = if layer == 0 { features } else { config.gru_hidden };
            grus.push(Gru::new(store, &format!("{name}.gru{layer}"), input, config.gru_hidden)?);
        }
        let proj = Linear::new(store, &format!("{name}.proj"), config.gru_hidden, embedding_dim)?;
        Ok(Self {
            conv1,
            conv2,
            grus,
            proj,
            intervals: spec.num_intervals,
            features,
        })
    }

    /// `[B, planes, intervals, bins]` to `[B, D]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, planes, intervals, bins) = x.dims4()?;
        if intervals != self.intervals {
            return Err(Error::ShapeMismatch(format!(
                "expected {} intervals, got {intervals}",
                self.intervals
            )));
        }
        let x = x
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .reshape((b * intervals, bins, planes))?;
        let y = self.conv1.forward(&x)?.relu()?;
        let y = self.conv2.forward(&y)?.relu()?;
        let mut h = y.reshape((b, intervals, self.features))?;
        for gru in &self.grus {
            h = gru.forward(&h)?;
        }
        let last = h.narrow(1, intervals - 1, 1)?.squeeze(1)?;
        self.proj.forward(&last)
    }
}
