#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use indivaid::datasets::{scan_dataset, Dataset, DecodedImage};
use indivaid::encoders::{Backend, EncoderConfig};
use indivaid::synthetic::{generate, FixtureSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smallest encoder the prompt layout fits into.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        backend: Backend::Toy,
        image_size: 32,
        patch_size: 16,
        image_width: 8,
        embed_dim: 8,
        word_dim: 8,
        context_length: 8,
        vocab_size: 64,
        toy_seed: 0,
    }
}

pub fn fixture(dir: &Path, spec: &FixtureSpec) -> Dataset {
    generate(dir, spec).expect("fixture");
    scan_dataset(dir).expect("scan")
}

pub fn random_images(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<DecodedImage> {
    (0..n)
        .map(|_| {
            let data = (0..DecodedImage::CHANNELS * size * size)
                .map(|_| rng.random_range(-2.0f32..2.0))
                .collect();
            DecodedImage::from_chw(size, size, data).unwrap()
        })
        .collect()
}

pub fn random_tensor(shape: (usize, usize), std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let v: Vec<f64> = (0..shape.0 * shape.1).map(|_| rng.random_range(-std..std)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

fn set_flat(var: &Var, values: Vec<f64>) {
    let t = Tensor::from_vec(values, var.dims(), var.device()).unwrap();
    var.set(&t.to_dtype(var.dtype()).unwrap()).unwrap();
}

/// Gradient of one parameter group: autodiff next to central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub group: String,
    pub analytic_norm: f64,
    pub rel_err: f64,
}

/// Compares `loss.backward()` against central differences for every element
/// of every var, grouped by the given labels.
pub fn grad_check<F>(loss: F, groups: &[(String, Vec<Var>)], h: f64) -> Vec<GradCheck>
where
    F: Fn() -> Tensor,
{
    let grads = loss().backward().unwrap();
    let mut out = Vec::new();
    for (name, vars) in groups {
        let (mut diff, mut an, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for var in vars {
            let analytic = grads
                .get(var.as_tensor())
                .map(flat)
                .unwrap_or_else(|| vec![0.0; var.elem_count()]);
            let base = flat(var.as_tensor());
            for i in 0..base.len() {
                let mut v = base.clone();
                v[i] = base[i] + h;
                set_flat(var, v.clone());
                let lp = scalar(&loss());
                v[i] = base[i] - h;
                set_flat(var, v);
                let lm = scalar(&loss());
                set_flat(var, base.clone());
                let numeric = (lp - lm) / (2.0 * h);
                diff += (analytic[i] - numeric).powi(2);
                an += analytic[i].powi(2);
                nn += numeric.powi(2);
            }
        }
        let (an, nn) = (an.sqrt(), nn.sqrt());
        out.push(GradCheck {
            group: name.clone(),
            analytic_norm: an,
            rel_err: diff.sqrt() / an.max(nn).max(1e-12),
        });
    }
    out
}

/// Retrieval metrics computed the slow way: every gallery item's rank is
/// counted directly, ties broken by gallery index.
pub struct OracleMetrics {
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
    pub excluded: usize,
}

pub fn oracle_metrics(q: &[Vec<f64>], ql: &[usize], g: &[Vec<f64>], gl: &[usize], ks: &[usize]) -> OracleMetrics {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut aps = Vec::new();
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut excluded = 0;
    for (qi, qv) in q.iter().enumerate() {
        let s: Vec<f64> = g.iter().map(|gv| cos(qv, gv)).collect();
        let pos: Vec<usize> = (0..g.len())
            .map(|j| (0..g.len()).filter(|&k| s[k] > s[j] || (s[k] == s[j] && k < j)).count())
            .collect();
        let relevant: Vec<usize> = (0..g.len()).filter(|&j| gl[j] == ql[qi]).collect();
        if relevant.is_empty() {
            excluded += 1;
            continue;
        }
        let ap: f64 = relevant
            .iter()
            .map(|&j| {
                let above = relevant.iter().filter(|&&i| pos[i] <= pos[j]).count();
                above as f64 / (pos[j] + 1) as f64
            })
            .sum::<f64>()
            / relevant.len() as f64;
        aps.push(ap);
        let first = relevant.iter().map(|&j| pos[j]).min().unwrap();
        for (&k, h) in hits.iter_mut() {
            if first < k {
                *h += 1;
            }
        }
    }
    let n = aps.len() as f64;
    OracleMetrics {
        map: aps.iter().sum::<f64>() / n,
        cmc: hits.into_iter().map(|(k, h)| (k, h as f64 / n)).collect(),
        excluded,
    }
}

/// Queries, query labels, gallery, gallery labels.
pub type Instance = (Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>, Vec<usize>);

/// Random retrieval instance with occasional duplicate gallery rows.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let dim = rng.random_range(2..6);
    let ids = rng.random_range(2..6);
    let nq = rng.random_range(1..=10);
    let ng = rng.random_range(1..=20);
    let vec = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            if v.iter().any(|x| x.abs() > 1e-3) {
                return v;
            }
        }
    };
    let mut g: Vec<Vec<f64>> = Vec::new();
    for _ in 0..ng {
        if !g.is_empty() && rng.random_bool(0.2) {
            let j = rng.random_range(0..g.len());
            g.push(g[j].clone());
        } else {
            g.push(vec(rng));
        }
    }
    let gl = (0..ng).map(|_| rng.random_range(0..ids)).collect();
    let q = (0..nq).map(|_| vec(rng)).collect();
    let ql = (0..nq).map(|_| rng.random_range(0..ids)).collect();
    (q, ql, g, gl)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
