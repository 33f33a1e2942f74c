//! Attention merge of an identity's per-image descriptions into a single
//! identity description.
//!
//! `w_i = softmax_i((q + mean_j t_j) · (K t_i) / √D)`,
//! `out = normalize(Σ_i w_i V t_i)`, with `q = 0`, `K = V = I` at init so the
//! first merges are close to a plain average. Inputs are put in a canonical
//! order before reduction, which makes the result bit-identical under any
//! permutation of the input list.

use std::cmp::Ordering;

use candle_core::{DType, Device, Tensor, Var};

use crate::encoders::{Encoders, FeatureVector};
use crate::error::{Error, Result};
use crate::losses::{l2_normalize, softmax};
use crate::params::ParamGroup;
use crate::prompt_gen::PromptState;

/// An identity's merged description; always unit-norm.
pub type MergedDescription = FeatureVector;

fn canonical_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

/// Cached, L2-normalized per-image description features for every train identity.
#[derive(Debug, Clone)]
pub struct DescriptionBank {
    per_identity: Vec<Vec<FeatureVector>>,
    tensors: Vec<Tensor>,
}

impl DescriptionBank {
    /// Groups `features` (one per train image) by identity, normalizes them
    /// and fixes a canonical order within each identity.
    pub fn from_features(
        features: Vec<FeatureVector>,
        identities: &[usize],
        num_identities: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if features.len() != identities.len() {
            return Err(Error::Shape {
                expected: format!("{} identities", features.len()),
                got: identities.len().to_string(),
            });
        }
        let mut per_identity: Vec<Vec<FeatureVector>> = vec![Vec::new(); num_identities];
        for (f, &y) in features.into_iter().zip(identities) {
            if y >= num_identities {
                return Err(Error::invalid(format!("identity {y} out of range")));
            }
            per_identity[y].push(f.normalize()?);
        }
        if let Some(missing) = per_identity.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!(
                "description bank: identity {missing} has no images"
            )));
        }
        for list in &mut per_identity {
            list.sort_by(|a, b| canonical_cmp(&a.values, &b.values));
        }
        let tensors = per_identity
            .iter()
            .map(|list| stack(list, dtype, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            per_identity,
            tensors,
        })
    }

    /// Describes every train image once with the frozen generator.
    ///
    /// `image_features` is `n × embed_dim`, one row per train record.
    pub fn build(
        image_features: &Tensor,
        identities: &[usize],
        prompt: &PromptState,
        encoders: &Encoders,
        batch_size: usize,
    ) -> Result<Self> {
        let n = image_features.dims2()?.0;
        let mut features = Vec::with_capacity(n);
        let step = batch_size.max(1);
        for start in (0..n).step_by(step) {
            let len = step.min(n - start);
            let chunk = image_features.narrow(0, start, len)?.detach();
            let desc = prompt
                .describe_batch(&chunk, &identities[start..start + len], encoders)?
                .detach();
            for row in desc.to_dtype(DType::F64)?.to_vec2::<f64>()? {
                features.push(FeatureVector::new(row));
            }
        }
        Self::from_features(
            features,
            identities,
            prompt.num_identities(),
            encoders.dtype(),
            encoders.device(),
        )
    }

    pub fn num_identities(&self) -> usize {
        self.per_identity.len()
    }

    pub fn features(&self, identity: usize) -> Option<&[FeatureVector]> {
        self.per_identity.get(identity).map(Vec::as_slice)
    }

    pub fn count(&self, identity: usize) -> usize {
        self.per_identity.get(identity).map_or(0, Vec::len)
    }

    pub fn total(&self) -> usize {
        self.per_identity.iter().map(Vec::len).sum()
    }

    /// `count × D` tensor of an identity's cached features, canonical order.
    pub fn tensor(&self, identity: usize) -> &Tensor {
        &self.tensors[identity]
    }
}

fn stack(list: &[FeatureVector], dtype: DType, device: &Device) -> Result<Tensor> {
    let d = list[0].len();
    let flat: Vec<f64> = list.iter().flat_map(|f| f.values.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (list.len(), d), device)?.to_dtype(dtype)?)
}

/// Learnable query, key map and value map.
pub struct AttentionParams {
    group: ParamGroup,
    query: Var,
    key_map: Var,
    value_map: Var,
    dim: usize,
}

impl AttentionParams {
    pub fn new(dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        let mut group = ParamGroup::new("attention");
        let query = group.add("query", Tensor::zeros((1, dim), dtype, device)?)?;
        let key_map = group.add("key_map", Tensor::eye(dim, dtype, device)?)?;
        let value_map = group.add("value_map", Tensor::eye(dim, dtype, device)?)?;
        Ok(Self {
            group,
            query,
            key_map,
            value_map,
            dim,
        })
    }

    pub fn params(&self) -> &ParamGroup {
        &self.group
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Differentiable merge of an `n × D` block (rows already in canonical order).
    pub fn merge_tensor(&self, features: &Tensor) -> Result<Tensor> {
        let (n, d) = features.dims2()?;
        if n == 0 {
            return Err(Error::invalid("cannot merge an empty description list"));
        }
        if d != self.dim {
            return Err(Error::Shape {
                expected: format!("descriptions of length {}", self.dim),
                got: d.to_string(),
            });
        }
        let probe = self
            .query
            .as_tensor()
            .broadcast_add(&features.mean_keepdim(0)?)?;
        let keys = features.matmul(&self.key_map.as_tensor().t()?)?;
        let logits = (keys.matmul(&probe.t()?)? / (d as f64).sqrt())?;
        let weights = softmax(&logits, 0)?;
        let values = features.matmul(&self.value_map.as_tensor().t()?)?;
        let pooled = weights.t()?.matmul(&values)?;
        Ok(l2_normalize(&pooled)?.squeeze(0)?)
    }

    /// Merges an arbitrary list of description features.
    pub fn merge(&self, features: &[FeatureVector]) -> Result<MergedDescription> {
        if features.is_empty() {
            return Err(Error::invalid("cannot merge an empty description list"));
        }
        let mut sorted: Vec<&FeatureVector> = features.iter().collect();
        sorted.sort_by(|a, b| canonical_cmp(&a.values, &b.values));
        let owned: Vec<FeatureVector> = sorted.into_iter().cloned().collect();
        let block = stack(&owned, self.query.dtype(), self.query.device())?;
        let mut out = FeatureVector::from_tensor(&self.merge_tensor(&block)?)?;
        out.normalized = true;
        Ok(out)
    }

    /// `N × D` merged descriptions, one row per identity.
    pub fn merged_descriptions(&self, bank: &DescriptionBank) -> Result<Tensor> {
        let rows = (0..bank.num_identities())
            .map(|y| self.merge_tensor(bank.tensor(y)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    }

    pub fn merged_map(&self, bank: &DescriptionBank) -> Result<Vec<MergedDescription>> {
        let t = self.merged_descriptions(bank)?.detach();
        let mut out = Vec::with_capacity(bank.num_identities());
        for row in t.to_dtype(DType::F64)?.to_vec2::<f64>()? {
            out.push(FeatureVector {
                values: row,
                normalized: true,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec())
    }

    #[test]
    fn singleton_returns_normalized_input() {
        let p = AttentionParams::new(3, DType::F64, &Device::Cpu).unwrap();
        let out = p.merge(&[fv(&[3.0, 0.0, 4.0])]).unwrap();
        let expect = [0.6, 0.0, 0.8];
        for (a, b) in out.values.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(out.normalized);
    }

    #[test]
    fn duplicates_match_singleton() {
        let p = AttentionParams::new(3, DType::F64, &Device::Cpu).unwrap();
        let t = fv(&[0.2, -0.5, 0.9]);
        let one = p.merge(std::slice::from_ref(&t)).unwrap();
        let two = p.merge(&[t.clone(), t]).unwrap();
        for (a, b) in one.values.iter().zip(&two.values) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn permutation_invariant_bitwise() {
        let p = AttentionParams::new(4, DType::F64, &Device::Cpu).unwrap();
        let list = vec![
            fv(&[0.1, 0.2, 0.3, 0.4]),
            fv(&[-0.5, 0.2, 0.1, 0.0]),
            fv(&[0.9, -0.1, 0.3, 0.2]),
        ];
        let a = p.merge(&list).unwrap();
        let rev: Vec<_> = list.iter().rev().cloned().collect();
        assert_eq!(a, p.merge(&rev).unwrap());
    }

    #[test]
    fn empty_list_errors() {
        let p = AttentionParams::new(2, DType::F64, &Device::Cpu).unwrap();
        assert!(p.merge(&[]).is_err());
    }

    #[test]
    fn bank_counts_and_merges() {
        let feats = vec![
            fv(&[1.0, 0.0]),
            fv(&[0.0, 2.0]),
            fv(&[1.0, 1.0]),
            fv(&[3.0, 1.0]),
        ];
        let bank =
            DescriptionBank::from_features(feats, &[0, 1, 0, 0], 2, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(bank.count(0), 3);
        assert_eq!(bank.count(1), 1);
        assert_eq!(bank.total(), 4);
        for y in 0..2 {
            for f in bank.features(y).unwrap() {
                assert!((f.norm() - 1.0).abs() < 1e-12);
            }
        }
        let p = AttentionParams::new(2, DType::F64, &Device::Cpu).unwrap();
        let merged = p.merged_map(&bank).unwrap();
        assert_eq!(merged.len(), 2);
        for m in &merged {
            assert!((m.norm() - 1.0).abs() < 1e-12);
        }
        assert_eq!(merged[0], p.merge(bank.features(0).unwrap()).unwrap());
    }

    #[test]
    fn bank_requires_every_identity() {
        let err = DescriptionBank::from_features(
            vec![fv(&[1.0, 0.0])],
            &[0],
            2,
            DType::F64,
            &Device::Cpu,
        )
        .unwrap_err();
        assert!(err.to_string().contains("identity 1"));
    }
}
