//! Losses for both training stages.
//!
//! Everything that takes a [`Tensor`] is differentiable through candle's
//! autograd; softmaxes are stabilized by subtracting the (detached) row max.

use std::collections::BTreeSet;
use std::fmt;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoders::FeatureVector;
use crate::error::{Error, Result};

/// Cosine similarity between two feature vectors.
pub fn cosine_sim(v: &FeatureVector, t: &FeatureVector) -> Result<f64> {
    if v.len() != t.len() {
        return Err(Error::Shape {
            expected: format!("length {}", v.len()),
            got: format!("length {}", t.len()),
        });
    }
    let (nv, nt) = (v.norm(), t.norm());
    if nv == 0.0 || nt == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero-norm vector"));
    }
    let dot: f64 = v.values.iter().zip(&t.values).map(|(a, b)| a * b).sum();
    Ok((dot / (nv * nt)).clamp(-1.0, 1.0))
}

/// Row-wise L2 normalization of a `B × D` tensor (or a single `D` vector).
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// `log softmax` along `dim` with max subtraction.
pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Softmax along `dim` with max subtraction.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let z = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&z)?)
}

/// Temperature-scaled cosine similarities between `B_img` image features and
/// `B_txt` text features.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    pub temperature: f64,
}

impl SimilarityMatrix {
    /// `scale` is the (possibly trainable) logit scale, a scalar tensor.
    pub fn new(images: &Tensor, texts: &Tensor, scale: &Tensor) -> Result<Self> {
        let cos = l2_normalize(images)?.matmul(&l2_normalize(texts)?.t()?)?;
        let values = cos.broadcast_mul(scale)?;
        let temperature = scale.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        Ok(Self {
            values,
            temperature,
        })
    }

    /// Wraps already-scaled logits.
    pub fn from_logits(values: Tensor) -> Self {
        Self {
            values,
            temperature: 1.0,
        }
    }
}

fn square_size(s: &Tensor) -> Result<usize> {
    let (r, c) = s.dims2()?;
    if r != c {
        return Err(Error::Shape {
            expected: "square similarity matrix".into(),
            got: format!("{r}x{c}"),
        });
    }
    Ok(r)
}

fn diagonal_mean(logp: &Tensor, n: usize) -> Result<Tensor> {
    let eye = Tensor::eye(n, logp.dtype(), logp.device())?;
    Ok((logp * eye)?.sum_all()?.neg()?.affine(1.0 / n as f64, 0.0)?)
}

/// Image-to-text contrastive loss: row `i` is image `i`, softmax over texts.
pub fn i2t_loss(s: &SimilarityMatrix) -> Result<Tensor> {
    let n = square_size(&s.values)?;
    diagonal_mean(&log_softmax(&s.values, 1)?, n)
}

/// Text-to-image contrastive loss: softmax over images for each text column.
pub fn t2i_loss(s: &SimilarityMatrix) -> Result<Tensor> {
    let n = square_size(&s.values)?;
    diagonal_mean(&log_softmax(&s.values, 0)?, n)
}

/// Stage-One objective: the two contrastive directions averaged,
/// `(i2t + t2i) / 2`, so a constant matrix scores `ln B` like each direction.
pub fn stage1_loss(s: &SimilarityMatrix) -> Result<Tensor> {
    Ok((i2t_loss(s)? + t2i_loss(s)?)?.affine(0.5, 0.0)?)
}

/// Label-smoothed target distribution with a uniform prior.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTargets {
    pub q: Vec<f64>,
    pub epsilon: f64,
    pub true_class: usize,
}

impl SmoothedTargets {
    /// `Σ −q log q`, with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        self.q
            .iter()
            .filter(|&&q| q > 0.0)
            .map(|&q| -q * q.ln())
            .sum()
    }
}

pub fn smoothed_targets(y: usize, n: usize, epsilon: f64) -> Result<SmoothedTargets> {
    if n == 0 || y >= n {
        return Err(Error::invalid(format!("class {y} out of range for N={n}")));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} not in [0, 1)")));
    }
    let other = epsilon / n as f64;
    let mut q = vec![other; n];
    q[y] = (1.0 - epsilon) + other;
    Ok(SmoothedTargets {
        q,
        epsilon,
        true_class: y,
    })
}

fn target_matrix(labels: &[usize], n: usize, epsilon: f64, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(labels.len() * n);
    for &y in labels {
        data.extend(smoothed_targets(y, n, epsilon)?.q);
    }
    Ok(Tensor::from_vec(data, (labels.len(), n), device)?)
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let all_finite = t
        .detach()
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .all(|v| v.is_finite());
    if all_finite {
        Ok(())
    } else {
        Err(Error::invalid(format!("non-finite {what}")))
    }
}

/// Label-smoothed cross-entropy `Σ_k −q_k log p_k`, averaged over the batch.
///
/// `logits` is `B × N` (or a single length-`N` vector with one label).
pub fn identity_loss(logits: &Tensor, labels: &[usize], epsilon: f64) -> Result<Tensor> {
    ensure_finite(logits, "logits")?;
    let logits = if logits.rank() == 1 {
        logits.unsqueeze(0)?
    } else {
        logits.clone()
    };
    let (b, n) = logits.dims2()?;
    if b != labels.len() {
        return Err(Error::Shape {
            expected: format!("{b} labels"),
            got: format!("{} labels", labels.len()),
        });
    }
    let q = target_matrix(labels, n, epsilon, logits.device())?.to_dtype(logits.dtype())?;
    let logp = log_softmax(&logits, 1)?;
    Ok((q * logp)?.sum_all()?.neg()?.affine(1.0 / b as f64, 0.0)?)
}

/// `max(0, d_p − d_n + τ)`.
pub fn triplet_hinge(d_p: f64, d_n: f64, tau: f64) -> f64 {
    (d_p - d_n + tau).max(0.0)
}

/// Hardest positive / hardest negative partner of every anchor, by
/// Euclidean distance. Ties go to the lowest index.
pub fn batch_hard_pairs(features: &[Vec<f64>], labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let b = features.len();
    let dist = |i: usize, j: usize| -> f64 {
        features[i]
            .iter()
            .zip(&features[j])
            .map(|(a, c)| (a - c) * (a - c))
            .sum::<f64>()
    };
    let mut pairs = Vec::with_capacity(b);
    for a in 0..b {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = dist(a, j);
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        match (pos, neg) {
            (Some((p, _)), Some((n, _))) => pairs.push((p, n)),
            _ => {
                return Err(Error::invalid(format!(
                    "triplet batch: anchor {a} (label {}) lacks a positive or a negative",
                    labels[a]
                )))
            }
        }
    }
    Ok(pairs)
}

fn pair_distance(features: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let diff = (features.index_select(a, 0)? - features.index_select(b, 0)?)?;
    // clamp keeps the sqrt gradient finite for coincident points
    Ok(diff
        .sqr()?
        .sum(D::Minus1)?
        .clamp(1e-12f64, f64::MAX)?
        .sqrt()?)
}

/// Batch-hard triplet loss with margin `tau` on unnormalized `B × D` features.
pub fn triplet_loss(features: &Tensor, labels: &[usize], tau: f64) -> Result<Tensor> {
    let (b, _) = features.dims2()?;
    if b != labels.len() {
        return Err(Error::Shape {
            expected: format!("{b} labels"),
            got: format!("{} labels", labels.len()),
        });
    }
    let host: Vec<Vec<f64>> = features.detach().to_dtype(DType::F64)?.to_vec2()?;
    let pairs = batch_hard_pairs(&host, labels)?;
    let device = features.device();
    let anchors = Tensor::from_vec((0..b as u32).collect::<Vec<_>>(), b, device)?;
    let pos = Tensor::from_vec(pairs.iter().map(|p| p.0 as u32).collect::<Vec<_>>(), b, device)?;
    let neg = Tensor::from_vec(pairs.iter().map(|p| p.1 as u32).collect::<Vec<_>>(), b, device)?;
    let d_p = pair_distance(features, &anchors, &pos)?;
    let d_n = pair_distance(features, &anchors, &neg)?;
    Ok((d_p - d_n)?.affine(1.0, tau)?.relu()?.mean_all()?)
}

/// Image-to-text cross-entropy against every identity's description.
///
/// `images` is `B × D`, `texts` is `N × D` (one row per train identity).
pub fn i2tce_loss(
    images: &Tensor,
    texts: &Tensor,
    labels: &[usize],
    epsilon: f64,
    scale: &Tensor,
    num_identities: usize,
) -> Result<Tensor> {
    let (n, _) = texts.dims2()?;
    if n != num_identities {
        return Err(Error::Shape {
            expected: format!("{num_identities} identity descriptions"),
            got: format!("{n}"),
        });
    }
    let s = SimilarityMatrix::new(images, texts, scale)?;
    identity_loss(&s.values, labels, epsilon)
}

/// A term of the Stage-Two objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Id,
    Tri,
    I2tce,
    I2t,
    T2i,
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossTerm::Id => "id",
            LossTerm::Tri => "tri",
            LossTerm::I2tce => "i2tce",
            LossTerm::I2t => "i2t",
            LossTerm::T2i => "t2i",
        })
    }
}

impl std::str::FromStr for LossTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "id" => Ok(LossTerm::Id),
            "tri" => Ok(LossTerm::Tri),
            "i2tce" => Ok(LossTerm::I2tce),
            "i2t" => Ok(LossTerm::I2t),
            "t2i" => Ok(LossTerm::T2i),
            other => Err(Error::invalid(format!("unknown loss term '{other}'"))),
        }
    }
}

pub type LossFlags = BTreeSet<LossTerm>;

pub fn default_loss_flags() -> LossFlags {
    [LossTerm::Id, LossTerm::Tri, LossTerm::I2tce].into()
}

/// Stage-Two inputs for one batch.
pub struct Stage2Batch<'a> {
    /// `B × D` image features (unnormalized).
    pub features: &'a Tensor,
    pub labels: &'a [usize],
    /// `B × N` classifier logits; required when `id` is enabled.
    pub id_logits: Option<&'a Tensor>,
    /// `N × D` merged identity descriptions.
    pub descriptions: &'a Tensor,
    pub scale: &'a Tensor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_id: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_tri: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_i2tce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_i2t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_t2i: Option<f64>,
    pub l_total: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Sum of the enabled Stage-Two terms, with a per-term breakdown.
pub fn stage2_loss(
    batch: &Stage2Batch<'_>,
    flags: &LossFlags,
    tau: f64,
    epsilon: f64,
) -> Result<(Tensor, LossBreakdown)> {
    if flags.is_empty() {
        return Err(Error::invalid("no stage-two loss terms enabled"));
    }
    let mut terms: Vec<Tensor> = Vec::new();
    let mut breakdown = LossBreakdown::default();
    let n = batch.descriptions.dims2()?.0;
    for term in flags {
        let value = match term {
            LossTerm::Id => {
                let logits = batch
                    .id_logits
                    .ok_or_else(|| Error::invalid("identity loss needs classifier logits"))?;
                let v = identity_loss(logits, batch.labels, epsilon)?;
                breakdown.l_id = Some(scalar(&v)?);
                v
            }
            LossTerm::Tri => {
                let v = triplet_loss(batch.features, batch.labels, tau)?;
                breakdown.l_tri = Some(scalar(&v)?);
                v
            }
            LossTerm::I2tce => {
                let v = i2tce_loss(
                    batch.features,
                    batch.descriptions,
                    batch.labels,
                    epsilon,
                    batch.scale,
                    n,
                )?;
                breakdown.l_i2tce = Some(scalar(&v)?);
                v
            }
            LossTerm::I2t | LossTerm::T2i => {
                // batch texts: the description of each image's own identity
                let idx: Vec<u32> = batch.labels.iter().map(|&y| y as u32).collect();
                let idx = Tensor::from_vec(idx, batch.labels.len(), batch.features.device())?;
                let texts = batch.descriptions.index_select(&idx, 0)?;
                let s = SimilarityMatrix::new(batch.features, &texts, batch.scale)?;
                if *term == LossTerm::I2t {
                    let v = i2t_loss(&s)?;
                    breakdown.l_i2t = Some(scalar(&v)?);
                    v
                } else {
                    let v = t2i_loss(&s)?;
                    breakdown.l_t2i = Some(scalar(&v)?);
                    v
                }
            }
        };
        terms.push(value);
    }
    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = (total + t)?;
    }
    breakdown.l_total = scalar(&total)?;
    Ok((total, breakdown))
}

/// Row `i` of a rank-2 tensor as a `Vec<f64>`.
pub fn row_values(t: &Tensor, i: usize) -> Result<Vec<f64>> {
    Ok(t.i(i)?.to_dtype(DType::F64)?.to_vec1()?)
}
