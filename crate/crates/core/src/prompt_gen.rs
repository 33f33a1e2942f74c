//! Image-conditioned text description generator.
//!
//! A description is the token-embedding sequence
//! `[SOT] (v_1+π) … (v_m+π) s_id [.] [EOT] [PAD]…`, where `v_j` are learnable
//! context tokens, `s_id` is a learnable per-identity token and `π` is the
//! meta-token a small Linear-ReLU-Linear network derives from the image
//! feature. The sequence goes through the frozen text encoder.

use candle_core::{DType, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoders::{Encoders, FeatureVector};
use crate::error::{Error, Result};
use crate::params::ParamGroup;

/// Phrase whose word embeddings initialize the context tokens.
pub const INIT_PHRASE: &str = "A photo of a";

/// Hidden width of the meta-net: the image feature compressed 16×.
pub fn meta_hidden_width(embed_dim: usize) -> usize {
    (embed_dim / 16).max(1)
}

/// Everything the generator learns, plus the frozen marker embeddings it
/// needs to lay out a prompt.
pub struct PromptState {
    group: ParamGroup,
    context: Var,
    identity_tokens: Var,
    meta_w1: Var,
    meta_b1: Var,
    meta_w2: Var,
    meta_b2: Var,
    m: usize,
    num_identities: usize,
    per_identity_context: bool,
    start: Tensor,
    suffix: Tensor,
    pad: Tensor,
    context_length: usize,
}

impl PromptState {
    /// Context tokens from the word embeddings of [`INIT_PHRASE`]; every
    /// identity token from the first token of `species_word`; meta-net
    /// weights `N(0, 0.02²)` with zero biases.
    ///
    /// `per_identity_context` (experimental) gives each identity its own copy
    /// of the context tokens instead of sharing one set.
    pub fn init(
        num_identities: usize,
        species_word: &str,
        encoders: &Encoders,
        seed: u64,
        per_identity_context: bool,
    ) -> Result<Self> {
        if num_identities == 0 {
            return Err(Error::invalid("prompt state needs at least one identity"));
        }
        let species = encoders.tokenize(species_word)?;
        let species_id = *species
            .first()
            .ok_or_else(|| Error::invalid(format!("species word '{species_word}' has no tokens")))?;
        let phrase = encoders.tokenize(INIT_PHRASE)?;
        let cfg = encoders.config();
        let (e, w) = (cfg.embed_dim, cfg.word_dim);
        let m = phrase.len();
        if m + 4 > cfg.context_length {
            return Err(Error::Config(format!(
                "context_length {} cannot hold {m} context tokens",
                cfg.context_length
            )));
        }
        let device = encoders.device();
        let dtype = encoders.dtype();

        let phrase_emb = encoders.word_embed(&phrase)?;
        let context = if per_identity_context {
            phrase_emb
                .unsqueeze(0)?
                .repeat((num_identities, 1, 1))?
        } else {
            phrase_emb
        };
        let identity_tokens = encoders
            .word_embed(&[species_id])?
            .repeat((num_identities, 1))?;

        let hidden = meta_hidden_width(e);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d65_7461);
        let normal = Normal::new(0.0, 0.02).expect("finite std");
        let mut sample = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
        let w1 = Tensor::from_vec(sample(e * hidden), (e, hidden), device)?.to_dtype(dtype)?;
        let w2 = Tensor::from_vec(sample(hidden * w), (hidden, w), device)?.to_dtype(dtype)?;

        let mut group = ParamGroup::new("prompt");
        let context = group.add("context_tokens", context.copy()?)?;
        let identity_tokens = group.add("identity_tokens", identity_tokens.copy()?)?;
        let meta_w1 = group.add("meta_net.0.weight", w1)?;
        let meta_b1 = group.add("meta_net.0.bias", Tensor::zeros((1, hidden), dtype, device)?)?;
        let meta_w2 = group.add("meta_net.2.weight", w2)?;
        let meta_b2 = group.add("meta_net.2.bias", Tensor::zeros((1, w), dtype, device)?)?;

        let special = encoders.special_tokens();
        let start = encoders.word_embed(&[special.start])?;
        let suffix = encoders.word_embed(&[special.period, special.end])?;
        let pad = encoders.word_embed(&[special.pad])?;

        Ok(Self {
            group,
            context,
            identity_tokens,
            meta_w1,
            meta_b1,
            meta_w2,
            meta_b2,
            m,
            num_identities,
            per_identity_context,
            start,
            suffix,
            pad,
            context_length: cfg.context_length,
        })
    }

    pub fn params(&self) -> &ParamGroup {
        &self.group
    }

    pub fn num_context_tokens(&self) -> usize {
        self.m
    }

    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    pub fn per_identity_context(&self) -> bool {
        self.per_identity_context
    }

    /// Index of the end-of-text marker in every assembled prompt.
    pub fn eos_position(&self) -> usize {
        self.m + 3
    }

    pub fn context_tokens(&self) -> Tensor {
        self.context.as_tensor().clone()
    }

    pub fn identity_tokens(&self) -> Tensor {
        self.identity_tokens.as_tensor().clone()
    }

    /// Meta-tokens `π = W2·relu(W1·v + b1) + b2` for a `B × embed_dim` batch.
    pub fn meta_tokens(&self, image_features: &Tensor) -> Result<Tensor> {
        let (_, e) = image_features.dims2()?;
        let expected = self.meta_w1.dims()[0];
        if e != expected {
            return Err(Error::Shape {
                expected: format!("image feature of length {expected}"),
                got: e.to_string(),
            });
        }
        let h = image_features
            .matmul(self.meta_w1.as_tensor())?
            .broadcast_add(self.meta_b1.as_tensor())?
            .relu()?;
        Ok(h
            .matmul(self.meta_w2.as_tensor())?
            .broadcast_add(self.meta_b2.as_tensor())?)
    }

    pub fn meta_net_forward(&self, image_feature: &FeatureVector) -> Result<Tensor> {
        let v = image_feature
            .to_tensor(self.meta_w1.dtype(), self.meta_w1.device())?
            .unsqueeze(0)?;
        Ok(self.meta_tokens(&v)?.squeeze(0)?)
    }

    /// `B × context_length × word_dim` prompts for `identities`, shifting each
    /// context token by that row's meta-token (`B × word_dim`).
    pub fn assemble_batch(&self, identities: &[usize], meta_tokens: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let (b, w) = meta_tokens.dims2()?;
        if b != identities.len() {
            return Err(Error::Shape {
                expected: format!("{} meta-tokens", identities.len()),
                got: b.to_string(),
            });
        }
        if let Some(&bad) = identities.iter().find(|&&y| y >= self.num_identities) {
            return Err(Error::invalid(format!(
                "identity {bad} out of range for N={}",
                self.num_identities
            )));
        }
        let device = meta_tokens.device();
        let ids = Tensor::from_vec(
            identities.iter().map(|&y| y as u32).collect::<Vec<_>>(),
            b,
            device,
        )?;
        let context = if self.per_identity_context {
            self.context.as_tensor().index_select(&ids, 0)?
        } else {
            self.context.as_tensor().unsqueeze(0)?.repeat((b, 1, 1))?
        };
        let shifted = context.broadcast_add(&meta_tokens.unsqueeze(1)?)?;
        let id_tok = self.identity_tokens.as_tensor().index_select(&ids, 0)?.unsqueeze(1)?;
        let start = self.start.unsqueeze(0)?.repeat((b, 1, 1))?;
        let suffix = self.suffix.unsqueeze(0)?.repeat((b, 1, 1))?;
        let used = self.m + 4;
        let mut parts = vec![start, shifted, id_tok, suffix];
        if self.context_length > used {
            parts.push(self.pad.unsqueeze(0)?.repeat((b, self.context_length - used, 1))?);
        }
        let seq = Tensor::cat(&parts, 1)?;
        debug_assert_eq!(seq.dims(), &[b, self.context_length, w]);
        Ok((seq, vec![self.eos_position(); b]))
    }

    /// Single-prompt form of [`assemble_batch`](Self::assemble_batch).
    pub fn assemble_prompt(&self, identity: usize, meta_token: &Tensor) -> Result<(Tensor, usize)> {
        let (seq, eos) = self.assemble_batch(&[identity], &meta_token.unsqueeze(0)?)?;
        Ok((seq.squeeze(0)?, eos[0]))
    }

    /// Per-image description features (`B × embed_dim`, unnormalized).
    pub fn describe_batch(
        &self,
        image_features: &Tensor,
        identities: &[usize],
        encoders: &Encoders,
    ) -> Result<Tensor> {
        let meta = self.meta_tokens(image_features)?;
        let (seq, eos) = self.assemble_batch(identities, &meta)?;
        encoders.encode_text_batch(&seq, &eos)
    }

    pub fn describe_image(
        &self,
        image_feature: &FeatureVector,
        identity: usize,
        encoders: &Encoders,
    ) -> Result<FeatureVector> {
        let v = image_feature
            .to_tensor(encoders.dtype(), encoders.device())?
            .unsqueeze(0)?;
        FeatureVector::from_tensor(&self.describe_batch(&v, &[identity], encoders)?)
    }

    pub fn dtype(&self) -> DType {
        self.context.dtype()
    }
}
