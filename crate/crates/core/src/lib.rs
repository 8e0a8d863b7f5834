//! Multimodal self-supervised pre-training for vibration sensing.
//!
//! The crate covers the whole desk-scale pipeline: segmentation and
//! per-interval STFT of acoustic/seismic streams, time- and frequency-domain
//! augmentation, DeepSense- and Swin-style encoders with shared/private
//! embedding subspaces, the contrastive pre-training objective, linear-probe
//! fine-tuning, supervised baselines, and an evaluation harness for label
//! efficiency, domain shift and convergence speed.

pub mod augment;
pub mod checkpoint;
pub mod datamodel;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod pipeline;
pub mod focal;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod store;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
