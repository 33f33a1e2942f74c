use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tokenizer::ToyTokenizer;
use super::EncoderConfig;
use crate::datasets::DecodedImage;
use crate::error::Result;
use crate::losses::softmax;
use crate::params::ParamGroup;

/// Descriptor length per patch: 4 sub-cell means and 1 std per channel.
const PATCH_FEATURES: usize = DecodedImage::CHANNELS * 5;

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64, device: &Device) -> Result<Tensor> {
    let normal = Normal::new(0.0, std).expect("finite std");
    let data: Vec<f64> = (0..shape.0 * shape.1).map(|_| normal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, device)?)
}

/// Seeded random-feature encoders.
///
/// Image side: a shared `tanh` layer over per-patch descriptors (2×2 sub-cell
/// means and the standard deviation of each channel), mean-pooled over
/// patches and linearly projected.
/// Text side: token + position embeddings, one causal self-attention block
/// with a `tanh` MLP, read out at the eos position and projected.
pub(super) struct ToyEncoders {
    pub image_group: ParamGroup,
    pub text_group: ParamGroup,
    pub tokenizer: ToyTokenizer,
    patch: usize,
    backbone_w: Var,
    backbone_b: Var,
    proj: Var,
    token_table: Var,
    pos: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    mlp_in: Var,
    mlp_out: Var,
    text_proj: Var,
    causal_mask: Tensor,
    device: Device,
}

impl ToyEncoders {
    pub fn new(config: &EncoderConfig, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.toy_seed);
        let pooled = PATCH_FEATURES;
        let (iw, e, w, l) = (
            config.image_width,
            config.embed_dim,
            config.word_dim,
            config.context_length,
        );

        let mut image_group = ParamGroup::new("image_encoder");
        let backbone_w = image_group.add(
            "backbone.weight",
            gaussian(&mut rng, (pooled, iw), 1.0 / (pooled as f64).sqrt(), device)?,
        )?;
        let backbone_b = image_group.add("backbone.bias", gaussian(&mut rng, (1, iw), 0.1, device)?)?;
        let proj = image_group.add(
            "proj.weight",
            gaussian(&mut rng, (iw, e), 3.0 / (iw as f64).sqrt(), device)?,
        )?;

        let inv_w = 1.0 / (w as f64).sqrt();
        let mut text_group = ParamGroup::new("text_encoder");
        let token_table = text_group.add(
            "token_embedding",
            gaussian(&mut rng, (config.vocab_size, w), inv_w, device)?,
        )?;
        let pos = text_group.add("positional_embedding", gaussian(&mut rng, (l, w), 0.1, device)?)?;
        let wq = text_group.add("attn.q", gaussian(&mut rng, (w, w), inv_w, device)?)?;
        let wk = text_group.add("attn.k", gaussian(&mut rng, (w, w), inv_w, device)?)?;
        let wv = text_group.add("attn.v", gaussian(&mut rng, (w, w), inv_w, device)?)?;
        let wo = text_group.add("attn.out", gaussian(&mut rng, (w, w), inv_w, device)?)?;
        let mlp_in = text_group.add("mlp.in", gaussian(&mut rng, (w, 2 * w), inv_w, device)?)?;
        let mlp_out = text_group.add(
            "mlp.out",
            gaussian(&mut rng, (2 * w, w), 1.0 / ((2 * w) as f64).sqrt(), device)?,
        )?;
        let text_proj = text_group.add("text_projection", gaussian(&mut rng, (w, e), inv_w, device)?)?;

        let mask: Vec<f64> = (0..l)
            .flat_map(|i| (0..l).map(move |j| if j > i { f64::NEG_INFINITY } else { 0.0 }))
            .collect();
        let causal_mask = Tensor::from_vec(mask, (l, l), device)?;

        Ok(Self {
            image_group,
            text_group,
            tokenizer: ToyTokenizer::new(config.vocab_size),
            patch: config.patch_size,
            backbone_w,
            backbone_b,
            proj,
            token_table,
            pos,
            wq,
            wk,
            wv,
            wo,
            mlp_in,
            mlp_out,
            text_proj,
            causal_mask,
            device: device.clone(),
        })
    }

    /// `(B · patches) × PATCH_FEATURES` descriptors and the patch count.
    fn patch_descriptors(&self, images: &[DecodedImage]) -> Result<(Tensor, usize)> {
        let p = self.patch;
        let half = p / 2;
        let (gh, gw) = (images[0].height / p, images[0].width / p);
        let mut data = Vec::with_capacity(images.len() * gh * gw * PATCH_FEATURES);
        for img in images {
            for py in 0..gh {
                for px in 0..gw {
                    for c in 0..DecodedImage::CHANNELS {
                        let mut cells = [0.0f64; 4];
                        let (mut sum, mut sq) = (0.0f64, 0.0f64);
                        for y in 0..p {
                            for x in 0..p {
                                let v = f64::from(img.get(c, py * p + y, px * p + x));
                                cells[usize::from(y >= half) * 2 + usize::from(x >= half)] += v;
                                sum += v;
                                sq += v * v;
                            }
                        }
                        let n = (p * p) as f64;
                        let sizes = [half * half, half * (p - half), (p - half) * half, (p - half) * (p - half)];
                        for (cell, size) in cells.iter().zip(sizes) {
                            data.push(if size == 0 { 0.0 } else { cell / size as f64 });
                        }
                        let mean = sum / n;
                        data.push((sq / n - mean * mean).max(0.0).sqrt());
                    }
                }
            }
        }
        let rows = images.len() * gh * gw;
        Ok((Tensor::from_vec(data, (rows, PATCH_FEATURES), &self.device)?, gh * gw))
    }

    pub fn encode_images(&self, images: &[DecodedImage], trainable: bool) -> Result<Tensor> {
        let get = |v: &Var| {
            if trainable {
                v.as_tensor().clone()
            } else {
                v.as_detached_tensor()
            }
        };
        let (desc, patches) = self.patch_descriptors(images)?;
        let hidden = desc
            .matmul(&get(&self.backbone_w))?
            .broadcast_add(&get(&self.backbone_b))?
            .tanh()?;
        let width = hidden.dim(1)?;
        let pooled = hidden.reshape((images.len(), patches, width))?.mean(1)?;
        Ok(pooled.matmul(&get(&self.proj))?)
    }

    pub fn token_table(&self) -> Tensor {
        self.token_table.as_detached_tensor()
    }

    pub fn encode_text(&self, embeddings: &Tensor, eos: &[usize]) -> Result<Tensor> {
        let (b, l, w) = embeddings.dims3()?;
        let frozen = |v: &Var| v.as_detached_tensor();
        let x = embeddings.broadcast_add(&frozen(&self.pos))?;
        let flat = x.reshape((b * l, w))?;
        let q = flat.matmul(&frozen(&self.wq))?.reshape((b, l, w))?;
        let k = flat.matmul(&frozen(&self.wk))?.reshape((b, l, w))?;
        let v = flat.matmul(&frozen(&self.wv))?.reshape((b, l, w))?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (w as f64).sqrt())?
            .broadcast_add(&self.causal_mask)?;
        let attn = softmax(&scores, 2)?.matmul(&v)?;
        let attn = attn.reshape((b * l, w))?.matmul(&frozen(&self.wo))?;
        let h = (flat + attn)?;
        let mlp = h
            .matmul(&frozen(&self.mlp_in))?
            .tanh()?
            .matmul(&frozen(&self.mlp_out))?;
        let h = (h + mlp)?;
        let rows: Vec<u32> = eos
            .iter()
            .enumerate()
            .map(|(i, &e)| (i * l + e) as u32)
            .collect();
        let rows = Tensor::from_vec(rows, b, &self.device)?;
        let picked = h.index_select(&rows, 0)?;
        let out = picked.matmul(&frozen(&self.text_proj))?;
        debug_assert_eq!(out.dims(), &[b, self.text_proj.dim(D::Minus1)?]);
        debug_assert_eq!(out.dtype(), DType::F64);
        Ok(out)
    }
}
