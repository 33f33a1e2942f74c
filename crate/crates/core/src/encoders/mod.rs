//! Image and text encoders behind a single interface, with two backends:
//! a pretrained ViT-B/16 vision-language model and a small deterministic
//! toy model that runs the whole pipeline on a CPU in seconds.

#[cfg(feature = "pretrained")]
mod pretrained;
mod tokenizer;
mod toy;

pub use self::tokenizer::{SpecialTokens, ToyTokenizer};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::datasets::DecodedImage;
use crate::error::{Error, Result};
use crate::params::ParamGroup;

/// Cache directory override for pretrained weights.
pub const CACHE_ENV: &str = "INDIVAID_CACHE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Pretrained,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backend: Backend,
    /// Input resolution (square).
    pub image_size: usize,
    /// Patch side length of the toy backbone's pooling stage.
    pub patch_size: usize,
    /// Image feature width before the projection.
    pub image_width: usize,
    /// Shared image/text embedding width.
    pub embed_dim: usize,
    /// Width of the text transformer's token embeddings.
    pub word_dim: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub toy_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy(32)
    }
}

impl EncoderConfig {
    /// ViT-B/16 vision-language backbone dimensions.
    pub fn pretrained() -> Self {
        Self {
            backend: Backend::Pretrained,
            image_size: 224,
            patch_size: 16,
            image_width: 768,
            embed_dim: 512,
            word_dim: 512,
            context_length: 77,
            vocab_size: 49408,
            toy_seed: 0,
        }
    }

    pub fn toy(embed_dim: usize) -> Self {
        Self {
            backend: Backend::Toy,
            image_size: 224,
            patch_size: 16,
            image_width: 64,
            embed_dim,
            word_dim: embed_dim,
            context_length: 16,
            vocab_size: 512,
            toy_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.word_dim == 0 || self.image_width == 0 {
            return Err(Error::Config("embed_dim, word_dim and image_width must be > 0".into()));
        }
        if self.context_length < 8 {
            return Err(Error::Config(format!(
                "context_length {} < 8 leaves no room for the prompt",
                self.context_length
            )));
        }
        if self.vocab_size < 8 {
            return Err(Error::Config("vocab_size must be >= 8".into()));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        match self.backend {
            Backend::Toy => DType::F64,
            Backend::Pretrained => DType::F32,
        }
    }
}

/// A feature vector tagged with whether it has been L2-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalize(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::invalid("cannot normalize a zero or non-finite vector"));
        }
        Ok(Self {
            values: self.values.iter().map(|v| v / n).collect(),
            normalized: true,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self::new(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?))
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, self.values.len(), device)?.to_dtype(dtype)?)
    }
}

enum Backbone {
    Toy(toy::ToyEncoders),
    #[cfg(feature = "pretrained")]
    Pretrained(Box<pretrained::PretrainedEncoders>),
}

/// The image encoder, the text encoder and the word-embedding table.
pub struct Encoders {
    config: EncoderConfig,
    device: Device,
    backbone: Backbone,
}

impl Encoders {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let backbone = match config.backend {
            Backend::Toy => Backbone::Toy(toy::ToyEncoders::new(&config, &device)?),
            #[cfg(feature = "pretrained")]
            Backend::Pretrained => Backbone::Pretrained(Box::new(
                pretrained::PretrainedEncoders::load(&config, &device)?,
            )),
            #[cfg(not(feature = "pretrained"))]
            Backend::Pretrained => {
                return Err(Error::Config(
                    "pretrained backend not compiled in (enable the `pretrained` feature)".into(),
                ))
            }
        };
        Ok(Self {
            config,
            device,
            backbone,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.config.dtype()
    }

    fn check_image(&self, image: &DecodedImage) -> Result<()> {
        let s = self.config.image_size;
        if image.height != s || image.width != s {
            return Err(Error::Shape {
                expected: format!("{s}x{s} image"),
                got: format!("{}x{}", image.height, image.width),
            });
        }
        Ok(())
    }

    /// `B × embed_dim` projected image features. With `trainable == false`
    /// the result is detached from the image-encoder parameters.
    pub fn encode_images(&self, images: &[DecodedImage], trainable: bool) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::invalid("no images to encode"));
        }
        for img in images {
            self.check_image(img)?;
        }
        let out = match &self.backbone {
            Backbone::Toy(t) => t.encode_images(images, trainable)?,
            #[cfg(feature = "pretrained")]
            Backbone::Pretrained(p) => p.encode_images(images, trainable)?,
        };
        Ok(if trainable { out } else { out.detach() })
    }

    pub fn encode_image(&self, image: &DecodedImage, trainable: bool) -> Result<FeatureVector> {
        FeatureVector::from_tensor(&self.encode_images(std::slice::from_ref(image), trainable)?)
    }

    /// Text features for a `B × context_length × word_dim` batch of token
    /// embeddings, read out at each sequence's `eos` position.
    pub fn encode_text_batch(&self, embeddings: &Tensor, eos: &[usize]) -> Result<Tensor> {
        let (b, l, w) = embeddings.dims3()?;
        if l != self.config.context_length || w != self.config.word_dim {
            return Err(Error::Shape {
                expected: format!("_ x {} x {}", self.config.context_length, self.config.word_dim),
                got: format!("{b} x {l} x {w}"),
            });
        }
        if eos.len() != b {
            return Err(Error::Shape {
                expected: format!("{b} eos positions"),
                got: eos.len().to_string(),
            });
        }
        if let Some(&bad) = eos.iter().find(|&&e| e == 0 || e >= l) {
            return Err(Error::invalid(format!(
                "eos position {bad} outside (0, {l})"
            )));
        }
        match &self.backbone {
            Backbone::Toy(t) => t.encode_text(embeddings, eos),
            #[cfg(feature = "pretrained")]
            Backbone::Pretrained(p) => p.encode_text(embeddings, eos),
        }
    }

    /// Single-sequence variant of [`encode_text_batch`](Self::encode_text_batch).
    pub fn encode_text(&self, embeddings: &Tensor, eos_position: usize) -> Result<FeatureVector> {
        let batched = self.encode_text_batch(&embeddings.unsqueeze(0)?, &[eos_position])?;
        FeatureVector::from_tensor(&batched)
    }

    /// Embedding-table rows for `ids` (`len × word_dim`).
    pub fn word_embed(&self, ids: &[u32]) -> Result<Tensor> {
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} >= vocab_size {}",
                self.config.vocab_size
            )));
        }
        let idx = Tensor::from_slice(ids, ids.len(), &self.device)?;
        let table = match &self.backbone {
            Backbone::Toy(t) => t.token_table(),
            #[cfg(feature = "pretrained")]
            Backbone::Pretrained(p) => p.token_table(),
        };
        Ok(table.index_select(&idx, 0)?)
    }

    /// Token ids of `text`, without start/end markers.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        match &self.backbone {
            Backbone::Toy(t) => Ok(t.tokenizer.encode(text)),
            #[cfg(feature = "pretrained")]
            Backbone::Pretrained(p) => p.tokenize(text),
        }
    }

    pub fn special_tokens(&self) -> SpecialTokens {
        match &self.backbone {
            Backbone::Toy(t) => t.tokenizer.special(),
            #[cfg(feature = "pretrained")]
            Backbone::Pretrained(p) => p.special_tokens(),
        }
    }

    /// Backbone plus projection parameters of the image side.
    pub fn image_params(&self) -> &ParamGroup {
        match &self.backbone {
            Backbone::Toy(t) => &t.image_group,
            #[cfg(feature = "pretrained")]
            Backbone::Pretrained(p) => p.image_params(),
        }
    }

    /// Text transformer, token table and text projection.
    pub fn text_params(&self) -> &ParamGroup {
        match &self.backbone {
            Backbone::Toy(t) => &t.text_group,
            #[cfg(feature = "pretrained")]
            Backbone::Pretrained(p) => p.text_params(),
        }
    }

    /// Whether checkpoints must carry the text-side parameters.
    pub fn stores_text_params(&self) -> bool {
        matches!(self.backbone, Backbone::Toy(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            image_size: 32,
            embed_dim: 16,
            word_dim: 12,
            context_length: 10,
            ..EncoderConfig::toy(16)
        }
    }

    fn image(seed: u64, size: usize) -> DecodedImage {
        let data = (0..3 * size * size)
            .map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f32 / 500.0) - 1.0)
            .collect();
        DecodedImage::from_chw(size, size, data).unwrap()
    }

    #[test]
    fn image_encoding_is_deterministic_with_right_shape() {
        for dim in [16, 512] {
            let cfg = EncoderConfig {
                image_size: 32,
                ..EncoderConfig::toy(dim)
            };
            let enc = Encoders::new(cfg).unwrap();
            let img = image(3, 32);
            let a = enc.encode_image(&img, false).unwrap();
            let b = enc.encode_image(&img, false).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), dim);
            assert!(!a.normalized);
        }
    }

    #[test]
    fn rejects_wrong_resolution() {
        let enc = Encoders::new(small()).unwrap();
        assert!(matches!(
            enc.encode_image(&image(0, 16), false),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn text_encoding_is_causal_and_deterministic() {
        let enc = Encoders::new(small()).unwrap();
        let ids: Vec<u32> = (0..10).map(|i| (i * 7 + 3) as u32).collect();
        let emb = enc.word_embed(&ids).unwrap();
        let a = enc.encode_text(&emb, 5).unwrap();
        assert_eq!(a, enc.encode_text(&emb, 5).unwrap());
        assert_eq!(a.len(), 16);

        // perturb every position after eos
        let mut rows: Vec<Vec<f64>> = emb.to_vec2().unwrap();
        for row in rows.iter_mut().skip(6) {
            for v in row.iter_mut() {
                *v += 0.75;
            }
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let perturbed = Tensor::from_vec(flat, (10, 12), &Device::Cpu).unwrap();
        assert_eq!(a, enc.encode_text(&perturbed, 5).unwrap());

        // ... while a change at or before eos does move the output
        let mut rows2: Vec<Vec<f64>> = emb.to_vec2().unwrap();
        rows2[5][0] += 0.75;
        let flat: Vec<f64> = rows2.iter().flatten().copied().collect();
        let moved = Tensor::from_vec(flat, (10, 12), &Device::Cpu).unwrap();
        assert_ne!(a, enc.encode_text(&moved, 5).unwrap());
    }

    #[test]
    fn eos_out_of_range() {
        let enc = Encoders::new(small()).unwrap();
        let emb = enc.word_embed(&[1; 10]).unwrap();
        assert!(enc.encode_text(&emb, 0).is_err());
        assert!(enc.encode_text(&emb, 10).is_err());
    }

    #[test]
    fn word_embedding_rows() {
        let enc = Encoders::new(small()).unwrap();
        let rows: Vec<Vec<f64>> = enc.word_embed(&[9, 9, 4]).unwrap().to_vec2().unwrap();
        assert_eq!(rows[0], rows[1]);
        for r in &rows {
            let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n.is_finite() && n > 0.0);
        }
        assert!(enc.word_embed(&[512]).is_err());
        let phrase = enc.tokenize("A photo of a").unwrap();
        assert_eq!(phrase.len(), 4);
        assert_eq!(enc.word_embed(&phrase).unwrap().dims(), &[4, 12]);
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.context_length = 7;
        assert!(Encoders::new(c).is_err());
        let mut c = small();
        c.embed_dim = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn feature_vector_normalization() {
        let f = FeatureVector::new(vec![3.0, 4.0]).normalize().unwrap();
        assert!(f.normalized);
        assert!((f.norm() - 1.0).abs() < 1e-12);
        assert!(FeatureVector::new(vec![0.0, 0.0]).normalize().is_err());
    }
}
