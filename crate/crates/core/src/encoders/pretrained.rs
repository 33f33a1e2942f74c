//! ViT-B/16 vision-language backbone read from a local weight cache.
//!
//! Expects `<cache>/clip-vit-base-patch16/{model.safetensors,tokenizer.json}`
//! in the Hugging Face layout, where `<cache>` is `$INDIVAID_CACHE` or
//! `~/.cache/indivaid`.

use std::path::PathBuf;

use candle_core::{DType, Device, IndexOp, Module, Tensor, D};
use candle_nn::{VarBuilder, VarMap};
use candle_transformers::models::clip::text_model::{Activation, ClipEncoder, ClipTextConfig};
use candle_transformers::models::clip::vision_model::{ClipVisionConfig, ClipVisionTransformer};
use candle_transformers::models::clip::EncoderConfig as ClipEncoderConfig;
use tokenizers::Tokenizer;

use super::tokenizer::SpecialTokens;
use super::{EncoderConfig, CACHE_ENV};
use crate::datasets::DecodedImage;
use crate::error::{Error, Result};
use crate::params::ParamGroup;

const MODEL_DIR: &str = "clip-vit-base-patch16";

pub fn cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_ENV) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_default();
    home.join(".cache").join("indivaid")
}

pub(super) struct PretrainedEncoders {
    vision: ClipVisionTransformer,
    visual_projection: candle_nn::Linear,
    text_encoder: ClipEncoder,
    final_layer_norm: candle_nn::LayerNorm,
    text_projection: candle_nn::Linear,
    token_table: Tensor,
    positions: Tensor,
    tokenizer: Tokenizer,
    special: SpecialTokens,
    image_group: ParamGroup,
    text_group: ParamGroup,
}

fn vision_config(c: &EncoderConfig) -> ClipVisionConfig {
    ClipVisionConfig {
        embed_dim: c.image_width,
        activation: Activation::QuickGelu,
        intermediate_size: 4 * c.image_width,
        num_hidden_layers: 12,
        num_attention_heads: 12,
        projection_dim: c.embed_dim,
        num_channels: 3,
        image_size: c.image_size,
        patch_size: c.patch_size,
    }
}

fn text_config(c: &EncoderConfig) -> ClipTextConfig {
    ClipTextConfig {
        vocab_size: c.vocab_size,
        embed_dim: c.word_dim,
        activation: Activation::QuickGelu,
        intermediate_size: 4 * c.word_dim,
        max_position_embeddings: c.context_length,
        pad_with: None,
        num_hidden_layers: 12,
        num_attention_heads: 8,
        projection_dim: c.embed_dim,
    }
}

fn token_id(tok: &Tokenizer, token: &str) -> Result<u32> {
    tok.token_to_id(token)
        .ok_or_else(|| Error::Config(format!("tokenizer has no '{token}' token")))
}

impl PretrainedEncoders {
    pub fn load(config: &EncoderConfig, device: &Device) -> Result<Self> {
        let dir = cache_dir().join(MODEL_DIR);
        let weights = dir.join("model.safetensors");
        let tok_path = dir.join("tokenizer.json");
        for p in [&weights, &tok_path] {
            if !p.is_file() {
                return Err(Error::MissingArtifact(p.clone()));
            }
        }
        let tokenizer = Tokenizer::from_file(&tok_path)
            .map_err(|e| Error::Config(format!("{}: {e}", tok_path.display())))?;

        let dtype = config.dtype();
        let mut varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, device);
        let vision = ClipVisionTransformer::new(vb.pp("vision_model"), &vision_config(config))?;
        let visual_projection =
            candle_nn::linear_no_bias(config.image_width, config.embed_dim, vb.pp("visual_projection"))?;
        let tcfg = text_config(config);
        let text_vb = vb.pp("text_model");
        let text_encoder = ClipEncoder::new(text_vb.pp("encoder"), &ClipEncoderConfig::Text(tcfg.clone()))?;
        let final_layer_norm = candle_nn::layer_norm(config.word_dim, 1e-5, text_vb.pp("final_layer_norm"))?;
        let text_projection =
            candle_nn::linear_no_bias(config.word_dim, config.embed_dim, vb.pp("text_projection"))?;
        let emb = text_vb.pp("embeddings");
        let token_table = emb
            .pp("token_embedding")
            .get((config.vocab_size, config.word_dim), "weight")?;
        let positions = emb
            .pp("position_embedding")
            .get((config.context_length, config.word_dim), "weight")?;
        varmap.load(&weights)?;

        let mut image_group = ParamGroup::new("image_encoder");
        let mut text_group = ParamGroup::new("text_encoder");
        let data = varmap.data().lock().expect("varmap lock");
        let mut names: Vec<&String> = data.keys().collect();
        names.sort();
        for name in names {
            let var = data[name].clone();
            if name.starts_with("vision_model.") || name.starts_with("visual_projection.") {
                image_group.push_var(name.clone(), var);
            } else if name.starts_with("text_model.") || name.starts_with("text_projection.") {
                text_group.push_var(name.clone(), var);
            }
        }
        drop(data);

        let special = SpecialTokens {
            start: token_id(&tokenizer, "<|startoftext|>")?,
            end: token_id(&tokenizer, "<|endoftext|>")?,
            pad: 0,
            period: *tokenizer
                .encode(".", false)
                .map_err(|e| Error::Config(e.to_string()))?
                .get_ids()
                .first()
                .ok_or_else(|| Error::Config("tokenizer cannot encode '.'".into()))?,
        };
        Ok(Self {
            vision,
            visual_projection,
            text_encoder,
            final_layer_norm,
            text_projection,
            token_table,
            positions,
            tokenizer,
            special,
            image_group,
            text_group,
        })
    }

    pub fn encode_images(&self, images: &[DecodedImage], trainable: bool) -> Result<Tensor> {
        let s = images[0].height;
        let flat: Vec<f32> = images.iter().flat_map(|i| i.data.iter().copied()).collect();
        let pixels = Tensor::from_vec(flat, (images.len(), DecodedImage::CHANNELS, s, s), &Device::Cpu)?
            .to_dtype(self.token_table.dtype())?;
        let out = self.visual_projection.forward(&self.vision.forward(&pixels)?)?;
        Ok(if trainable { out } else { out.detach() })
    }

    pub fn token_table(&self) -> Tensor {
        self.token_table.detach()
    }

    pub fn encode_text(&self, embeddings: &Tensor, eos: &[usize]) -> Result<Tensor> {
        let (b, l, _) = embeddings.dims3()?;
        let x = embeddings
            .to_dtype(self.positions.dtype())?
            .broadcast_add(&self.positions.detach())?;
        let mask: Vec<f32> = (0..l)
            .flat_map(|i| (0..l).map(move |j| if j > i { f32::MIN } else { 0.0 }))
            .collect();
        let mask = Tensor::from_vec(mask, (l, l), x.device())?
            .to_dtype(x.dtype())?
            .broadcast_as((b, 1, l, l))?;
        let h = self.final_layer_norm.forward(&self.text_encoder.forward(&x, Some(&mask))?)?;
        let rows = eos
            .iter()
            .enumerate()
            .map(|(i, &e)| h.i((i, e)))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let picked = Tensor::stack(&rows, 0)?;
        let out = self.text_projection.forward(&picked)?;
        debug_assert_eq!(out.dim(D::Minus1)?, self.text_projection.weight().dim(0)?);
        Ok(out.to_dtype(DType::F32)?)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let enc = self
            .tokenizer
            .encode(text, false)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(enc.get_ids().to_vec())
    }

    pub fn special_tokens(&self) -> SpecialTokens {
        self.special
    }

    pub fn image_params(&self) -> &ParamGroup {
        &self.image_group
    }

    pub fn text_params(&self) -> &ParamGroup {
        &self.text_group
    }
}
