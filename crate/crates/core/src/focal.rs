//! Contrastive pre-training objective over shared and private embedding
//! subspaces.
//!
//! The tensor functions are differentiable and used by the training loop;
//! the slice-based wrappers evaluate the same code in 64-bit precision.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::datamodel::{EmbeddingBundle, LossWeights, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::log_softmax;

pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub shared_term: f64,
    pub private_term: f64,
    pub orth_term: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.shared_term, self.private_term, self.orth_term]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Differentiable loss terms.
#[derive(Debug, Clone)]
pub struct FocalTerms {
    pub total: Tensor,
    pub shared: Tensor,
    pub private: Tensor,
    pub orth: Tensor,
    pub weights: LossWeights,
}

impl FocalTerms {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossBreakdown {
            total: s(&self.total)?,
            shared_term: s(&self.shared)?,
            private_term: s(&self.private)?,
            orth_term: s(&self.orth)?,
            weights: self.weights,
        })
    }
}

/// Rows of `x` scaled to unit length. Fails on rows shorter than 1e-12.
pub fn l2_normalize(x: &Tensor, what: &str) -> Result<Tensor> {
    let norms = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let min = norms
        .flatten_all()?
        .min(0)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    if !(min >= ZERO_NORM) {
        return Err(Error::ZeroVector(what.to_string()));
    }
    Ok(x.broadcast_div(&norms)?)
}

/// Mean over anchors of the cross-entropy of picking the matching positive
/// among all positives under cosine similarity divided by `tau`.
pub fn info_nce_t(anchors: &Tensor, positives: &Tensor, tau: f64) -> Result<Tensor> {
    let (b, d) = anchors.dims2()?;
    if positives.dims2()? != (b, d) {
        return Err(Error::ShapeMismatch(format!(
            "anchors {:?} vs positives {:?}",
            anchors.dims(),
            positives.dims()
        )));
    }
    if b == 0 {
        return Err(Error::Empty);
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let a = l2_normalize(anchors, "info_nce anchor")?;
    let p = l2_normalize(positives, "info_nce positive")?;
    let logits = (a.matmul(&p.t()?)? / tau)?;
    let eye = Tensor::eye(b, logits.dtype(), logits.device())?;
    let picked = (log_softmax(&logits)? * eye)?.sum(D::Minus1)?;
    Ok(picked.mean_all()?.neg()?)
}

fn split(e: &Tensor, shared_dim: usize) -> Result<(Tensor, Tensor)> {
    let d = e.dim(1)?;
    if shared_dim == 0 || shared_dim >= d {
        return Err(Error::DimMismatch(format!("shared dim {shared_dim} of {d}")));
    }
    Ok((e.narrow(1, 0, shared_dim)?, e.narrow(1, shared_dim, d - shared_dim)?))
}

fn mean(terms: Vec<Tensor>) -> Result<Tensor> {
    let n = terms.len();
    if n == 0 {
        return Err(Error::Empty);
    }
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / n as f64)?)
}

type Views = BTreeMap<String, Tensor>;

fn check_views(view1: &Views, view2: &Views) -> Result<()> {
    if view1.is_empty() {
        return Err(Error::Empty);
    }
    if view1.keys().ne(view2.keys()) {
        return Err(Error::ShapeMismatch("views hold different modalities".into()));
    }
    Ok(())
}

/// Cross-modal contrast of shared sub-vectors within each view, both
/// directions for every ordered modality pair, averaged.
pub fn shared_space_loss_t(view1: &Views, view2: &Views, shared_dim: usize, tau: f64) -> Result<Tensor> {
    check_views(view1, view2)?;
    let mut terms = Vec::new();
    for view in [view1, view2] {
        let shared: Vec<Tensor> = view
            .values()
            .map(|e| Ok(split(e, shared_dim)?.0))
            .collect::<Result<_>>()?;
        for (i, a) in shared.iter().enumerate() {
            for (j, p) in shared.iter().enumerate() {
                if i != j {
                    terms.push(info_nce_t(a, p, tau)?);
                }
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::InvalidArgument("shared-space contrast needs two modalities".into()));
    }
    mean(terms)
}

/// Per-modality contrast of private sub-vectors across the two views.
pub fn private_space_loss_t(view1: &Views, view2: &Views, shared_dim: usize, tau: f64) -> Result<Tensor> {
    check_views(view1, view2)?;
    let mut terms = Vec::new();
    for (name, e1) in view1 {
        let p1 = split(e1, shared_dim)?.1;
        let p2 = split(&view2[name], shared_dim)?.1;
        terms.push(info_nce_t(&p1, &p2, tau)?);
        terms.push(info_nce_t(&p2, &p1, tau)?);
    }
    mean(terms)
}

/// Mean squared cosine over every private/private modality pair and every
/// private/shared pair of the same modality, over all samples.
pub fn orthogonality_penalty_t(view: &Views, shared_dim: usize) -> Result<Tensor> {
    if view.is_empty() {
        return Err(Error::Empty);
    }
    let mut shared = Vec::new();
    let mut private = Vec::new();
    for e in view.values() {
        let (s, p) = split(e, shared_dim)?;
        if s.dim(1)? != p.dim(1)? {
            return Err(Error::DimMismatch(format!(
                "orthogonality needs equal shared and private sizes, got {} and {}",
                s.dim(1)?,
                p.dim(1)?
            )));
        }
        shared.push(l2_normalize(&s, "orthogonality shared")?);
        private.push(l2_normalize(&p, "orthogonality private")?);
    }
    let cos2 = |a: &Tensor, b: &Tensor| -> Result<Tensor> { Ok((a * b)?.sum(D::Minus1)?.sqr()?) };
    let mut pairs = Vec::new();
    for i in 0..private.len() {
        for j in i + 1..private.len() {
            pairs.push(cos2(&private[i], &private[j])?);
        }
        pairs.push(cos2(&private[i], &shared[i])?);
    }
    Ok(Tensor::stack(&pairs, 0)?.mean_all()?)
}

/// Weighted objective over two augmented views. The orthogonality term is
/// averaged over both views.
pub fn focal_loss_t(view1: &Views, view2: &Views, shared_dim: usize, config: &TrainConfig) -> Result<FocalTerms> {
    let tau = config.temperature;
    let w = config.loss_weights;
    let shared = shared_space_loss_t(view1, view2, shared_dim, tau)?;
    let private = private_space_loss_t(view1, view2, shared_dim, tau)?;
    let orth = ((orthogonality_penalty_t(view1, shared_dim)? + orthogonality_penalty_t(view2, shared_dim)?)? * 0.5)?;
    let total = (((&shared * w.shared)? + (&private * w.private)?)? + (&orth * w.orth)?)?;
    Ok(FocalTerms {
        total,
        shared,
        private,
        orth,
        weights: w,
    })
}

fn matrix(rows: &[Vec<f64>]) -> Result<Tensor> {
    let b = rows.len();
    if b == 0 {
        return Err(Error::Empty);
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::ShapeMismatch("vectors of different lengths".into()));
    }
    Ok(Tensor::from_vec(rows.concat(), (b, d), &Device::Cpu)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Stacks a batch of bundles into `[B, D]` tensors per modality.
pub fn bundles_to_views(bundles: &[EmbeddingBundle]) -> Result<(Views, usize)> {
    let first = bundles.first().ok_or(Error::Empty)?;
    let mut views = Views::new();
    for name in first.embeddings.keys() {
        let rows = bundles
            .iter()
            .map(|b| {
                if b.shared_dim != first.shared_dim {
                    return Err(Error::DimMismatch("bundles with different shared dims".into()));
                }
                b.embeddings
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::UnknownModality(name.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        views.insert(name.clone(), matrix(&rows)?);
    }
    Ok((views, first.shared_dim))
}

pub fn info_nce(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> Result<f64> {
    if anchors.len() != positives.len() {
        return Err(Error::LengthMismatch(anchors.len(), positives.len()));
    }
    scalar(&info_nce_t(&matrix(anchors)?, &matrix(positives)?, tau)?)
}

pub fn shared_space_loss(view1: &[EmbeddingBundle], view2: &[EmbeddingBundle], tau: f64) -> Result<f64> {
    let (v1, ds) = bundles_to_views(view1)?;
    let (v2, _) = bundles_to_views(view2)?;
    scalar(&shared_space_loss_t(&v1, &v2, ds, tau)?)
}

pub fn private_space_loss(view1: &[EmbeddingBundle], view2: &[EmbeddingBundle], tau: f64) -> Result<f64> {
    let (v1, ds) = bundles_to_views(view1)?;
    let (v2, _) = bundles_to_views(view2)?;
    scalar(&private_space_loss_t(&v1, &v2, ds, tau)?)
}

pub fn orthogonality_penalty(bundles: &[EmbeddingBundle]) -> Result<f64> {
    let (v, ds) = bundles_to_views(bundles)?;
    scalar(&orthogonality_penalty_t(&v, ds)?)
}

pub fn focal_loss(view1: &[EmbeddingBundle], view2: &[EmbeddingBundle], config: &TrainConfig) -> Result<LossBreakdown> {
    if view1.len() != view2.len() {
        return Err(Error::LengthMismatch(view1.len(), view2.len()));
    }
    let (v1, ds) = bundles_to_views(view1)?;
    let (v2, _) = bundles_to_views(view2)?;
    focal_loss_t(&v1, &v2, ds, config)?.breakdown()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Stage;
    use crate::rng;
    use rand::Rng as _;

    // Scalar reference implementations.
    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn brute_info_nce(a: &[Vec<f64>], p: &[Vec<f64>], tau: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..a.len() {
            let num = (cos(&a[i], &p[i]) / tau).exp();
            let den: f64 = p.iter().map(|pj| (cos(&a[i], pj) / tau).exp()).sum();
            total += -(num / den).ln();
        }
        total / a.len() as f64
    }

    fn random_vecs(r: &mut rng::Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn random_bundles(r: &mut rng::Rng, n: usize, d: usize) -> Vec<EmbeddingBundle> {
        (0..n)
            .map(|_| {
                EmbeddingBundle::new(
                    [
                        ("acoustic".to_string(), random_vecs(r, 1, d).remove(0)),
                        ("seismic".to_string(), random_vecs(r, 1, d).remove(0)),
                    ]
                    .into(),
                    d / 2,
                )
                .unwrap()
            })
            .collect()
    }

    fn pretrain_config() -> TrainConfig {
        TrainConfig::table_defaults(Stage::Pretrain)
    }

    #[test]
    fn single_pair_has_zero_loss() {
        assert_eq!(info_nce(&[vec![1.0, 2.0]], &[vec![-3.0, 0.5]], 0.07).unwrap(), 0.0);
    }

    #[test]
    fn identical_vectors_give_log_batch_size() {
        let v = vec![vec![0.3, -0.2, 0.9]; 4];
        let got = info_nce(&v, &v, 0.07).unwrap();
        assert!((got - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn info_nce_matches_direct_formula() {
        let mut r = rng::stream(1, "focal-test", &[]);
        for _ in 0..20 {
            let a = random_vecs(&mut r, 3, 5);
            let p = random_vecs(&mut r, 3, 5);
            let got = info_nce(&a, &p, 0.07).unwrap();
            assert!((got - brute_info_nce(&a, &p, 0.07)).abs() < 1e-10);
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn zero_vector_is_rejected() {
        let err = info_nce(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]], 0.07).unwrap_err();
        assert_eq!(err.code(), "ZERO_VECTOR");
    }

    fn bundle(a: Vec<f64>, s: Vec<f64>, ds: usize) -> EmbeddingBundle {
        EmbeddingBundle::new([("acoustic".to_string(), a), ("seismic".to_string(), s)].into(), ds).unwrap()
    }

    #[test]
    fn shared_loss_closed_form_for_orthogonal_samples() {
        let b = 4;
        let tau = 0.07;
        let batch: Vec<EmbeddingBundle> = (0..b)
            .map(|i| {
                let mut shared = vec![0.0; 4];
                shared[i] = 1.0;
                let mut a = shared.clone();
                a.extend([1.0, 0.0, 0.0, 0.0]);
                let mut s = shared;
                s.extend([0.0, 1.0, 0.0, 0.0]);
                bundle(a, s, 4)
            })
            .collect();
        let got = shared_space_loss(&batch, &batch, tau).unwrap();
        let e = (1.0 / tau).exp();
        let want = -(e / (e + (b as f64 - 1.0))).ln();
        assert!((got - want).abs() < 1e-10);
        assert_eq!(shared_space_loss(&batch[..1], &batch[..1], tau).unwrap(), 0.0);
    }

    #[test]
    fn private_loss_cases() {
        let mut r = rng::stream(2, "focal-test", &[]);
        let v1 = random_bundles(&mut r, 3, 6);
        let v2 = random_bundles(&mut r, 3, 6);
        let got = private_space_loss(&v1, &v2, 0.1).unwrap();
        let mut want = 0.0;
        for m in ["acoustic", "seismic"] {
            let p1: Vec<Vec<f64>> = v1.iter().map(|b| b.embeddings[m][3..].to_vec()).collect();
            let p2: Vec<Vec<f64>> = v2.iter().map(|b| b.embeddings[m][3..].to_vec()).collect();
            want += brute_info_nce(&p1, &p2, 0.1) + brute_info_nce(&p2, &p1, 0.1);
        }
        assert!((got - want / 4.0).abs() < 1e-10);

        let same: Vec<_> = (0..4)
            .map(|i| bundle(vec![i as f64 + 1.0, 1.0, 0.5, -0.5], vec![1.0, i as f64 - 1.5, 0.5, -0.5], 2))
            .collect();
        let got = private_space_loss(&same, &same, 0.07).unwrap();
        assert!((got - 4f64.ln()).abs() < 1e-9);
        assert_eq!(private_space_loss(&same[..1], &same[..1], 0.07).unwrap(), 0.0);
    }

    #[test]
    fn orthogonality_cases() {
        let orth = bundle(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 1.0, 1.0, 0.0], 2);
        // private acoustic (0,1) vs private seismic (1,0) and each vs its shared.
        assert_eq!(orthogonality_penalty(&[orth]).unwrap(), 0.0);
        let single = EmbeddingBundle::new([("acoustic".to_string(), vec![0.6, 0.8, 0.6, 0.8])].into(), 2).unwrap();
        assert!((orthogonality_penalty(&[single]).unwrap() - 1.0).abs() < 1e-12);

        let mut r = rng::stream(3, "focal-test", &[]);
        let batch = random_bundles(&mut r, 5, 8);
        let mut total = 0.0;
        let mut count = 0.0;
        for b in &batch {
            let a = &b.embeddings["acoustic"];
            let s = &b.embeddings["seismic"];
            for pair in [(&a[4..], &s[4..]), (&a[4..], &a[..4]), (&s[4..], &s[..4])] {
                total += cos(pair.0, pair.1).powi(2);
                count += 1.0;
            }
        }
        let got = orthogonality_penalty(&batch).unwrap();
        assert!((got - total / count).abs() < 1e-10);
        assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn orthogonality_needs_equal_halves() {
        let b = bundle(vec![1.0, 2.0, 3.0], vec![1.0, 0.0, 1.0], 1);
        assert_eq!(orthogonality_penalty(&[b]).unwrap_err().code(), "DIM_MISMATCH");
    }

    #[test]
    fn total_is_the_weighted_sum() {
        let mut r = rng::stream(4, "focal-test", &[]);
        let v1 = random_bundles(&mut r, 4, 8);
        let v2 = random_bundles(&mut r, 4, 8);
        let mut cfg = pretrain_config();
        let out = focal_loss(&v1, &v2, &cfg).unwrap();
        assert!((out.total - (out.shared_term + out.private_term + out.orth_term)).abs() < 1e-12);
        cfg.loss_weights = LossWeights {
            shared: 0.5,
            private: 2.0,
            orth: 0.0,
        };
        let w = focal_loss(&v1, &v2, &cfg).unwrap();
        assert!((w.total - (0.5 * w.shared_term + 2.0 * w.private_term)).abs() < 1e-12);
        assert!(out.shared_term >= 0.0 && out.private_term >= 0.0);
    }

    #[test]
    fn loss_is_invariant_to_batch_permutation_and_rotation() {
        let mut r = rng::stream(5, "focal-test", &[]);
        let v1 = random_bundles(&mut r, 5, 4);
        let v2 = random_bundles(&mut r, 5, 4);
        let cfg = pretrain_config();
        let base = focal_loss(&v1, &v2, &cfg).unwrap();
        let order = [3, 0, 4, 1, 2];
        let p1: Vec<_> = order.iter().map(|&i| v1[i].clone()).collect();
        let p2: Vec<_> = order.iter().map(|&i| v2[i].clone()).collect();
        let perm = focal_loss(&p1, &p2, &cfg).unwrap();
        assert!((base.total - perm.total).abs() < 1e-12);

        // One plane rotation applied to every 2-d subspace vector.
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = |b: &EmbeddingBundle| {
            let mut out = b.clone();
            for e in out.embeddings.values_mut() {
                for half in e.chunks_mut(2) {
                    let (x, y) = (half[0], half[1]);
                    half[0] = c * x - s * y;
                    half[1] = s * x + c * y;
                }
            }
            out
        };
        let r1: Vec<_> = v1.iter().map(rot).collect();
        let r2: Vec<_> = v2.iter().map(rot).collect();
        let rotated = focal_loss(&r1, &r2, &cfg).unwrap();
        assert!((base.total - rotated.total).abs() < 1e-10);
    }

    #[test]
    fn orthogonality_ignores_positive_rescaling() {
        let mut r = rng::stream(6, "focal-test", &[]);
        let batch = random_bundles(&mut r, 3, 6);
        let scaled: Vec<_> = batch
            .iter()
            .map(|b| {
                let mut out = b.clone();
                for (k, e) in out.embeddings.values_mut().enumerate() {
                    e[..3].iter_mut().for_each(|v| *v *= 7.5 + k as f64);
                    e[3..].iter_mut().for_each(|v| *v *= 0.01);
                }
                out
            })
            .collect();
        let a = orthogonality_penalty(&batch).unwrap();
        let b = orthogonality_penalty(&scaled).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
