use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Mode, TrainConfig};
use crate::desc_merge::AttentionParams;
use crate::encoders::{Backend, EncoderConfig, Encoders};
use crate::error::{Error, Result};
use crate::params::ParamGroup;
use crate::prompt_gen::PromptState;

/// Upper bound on the logit scale.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// Initial logit scale, `1 / 0.07`.
pub const INIT_LOGIT_SCALE: f64 = 1.0 / 0.07;

/// Learnable logit scale, stored as its logarithm.
pub struct Temperature {
    group: ParamGroup,
    log_scale: Var,
}

impl Temperature {
    pub fn new(dtype: DType, device: &Device) -> Result<Self> {
        let mut group = ParamGroup::new("temperature");
        let t = Tensor::new(INIT_LOGIT_SCALE.ln(), device)?.to_dtype(dtype)?;
        let log_scale = group.add("log_scale", t)?;
        Ok(Self { group, log_scale })
    }

    /// `exp(log_scale)` clamped to [`MAX_LOGIT_SCALE`], as a scalar tensor.
    pub fn scale(&self, trainable: bool) -> Result<Tensor> {
        let t = if trainable {
            self.log_scale.as_tensor().clone()
        } else {
            self.log_scale.as_detached_tensor()
        };
        Ok(t.minimum(MAX_LOGIT_SCALE.ln())?.exp()?)
    }

    pub fn value(&self) -> Result<f64> {
        Ok(self.scale(false)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    pub fn params(&self) -> &ParamGroup {
        &self.group
    }
}

/// Bias-free linear identity classifier used only by the identity loss.
pub struct Classifier {
    group: ParamGroup,
    weight: Var,
}

impl Classifier {
    pub fn new(num_identities: usize, dim: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636c_7366);
        let normal = Normal::new(0.0, 0.001).expect("finite std");
        let data: Vec<f64> = (0..num_identities * dim).map(|_| normal.sample(&mut rng)).collect();
        let w = Tensor::from_vec(data, (num_identities, dim), device)?.to_dtype(dtype)?;
        let mut group = ParamGroup::new("classifier");
        let weight = group.add("weight", w)?;
        Ok(Self { group, weight })
    }

    /// `B × N` logits.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(features.matmul(&self.weight.as_tensor().t()?)?)
    }

    pub fn params(&self) -> &ParamGroup {
        &self.group
    }
}

/// Contents of `meta.json` in a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backend: Backend,
    pub encoder: EncoderConfig,
    pub seed: u64,
    /// 0 for an untrained model.
    pub stage: u8,
    pub mode: Mode,
    pub config_hash: String,
    pub species: String,
    pub per_identity_context: bool,
    /// Train identity labels; index = class id.
    pub identities: Vec<String>,
    pub epochs_completed: usize,
    /// Per-group SHA-256 of the stored parameters.
    pub checksums: BTreeMap<String, String>,
    /// Checksum the rebuilt text encoder must match.
    pub text_encoder_checksum: String,
}

/// Every parameter a run may touch, grouped for freezing and checkpointing.
pub struct Model {
    pub encoders: Encoders,
    pub prompt: Option<PromptState>,
    pub attention: Option<AttentionParams>,
    pub classifier: Option<Classifier>,
    pub temperature: Temperature,
    pub identities: Vec<String>,
    pub species: String,
    pub per_identity_context: bool,
    pub seed: u64,
    pub stage: u8,
    pub mode: Mode,
    pub config_hash: String,
    pub epochs_completed: usize,
}

impl Model {
    /// Fresh encoders and temperature; a prompt learner when `mode` is
    /// `indivaid`.
    pub fn init(config: &TrainConfig, identities: Vec<String>) -> Result<Self> {
        config.validate()?;
        if identities.is_empty() {
            return Err(Error::invalid("model needs at least one train identity"));
        }
        let encoders = Encoders::new(config.encoder.clone())?;
        let prompt = if config.mode == Mode::Indivaid {
            Some(PromptState::init(
                identities.len(),
                &config.species,
                &encoders,
                config.seed,
                config.per_identity_context,
            )?)
        } else {
            None
        };
        let temperature = Temperature::new(encoders.dtype(), encoders.device())?;
        Ok(Self {
            encoders,
            prompt,
            attention: None,
            classifier: None,
            temperature,
            identities,
            species: config.species.clone(),
            per_identity_context: config.per_identity_context,
            seed: config.seed,
            stage: 0,
            mode: config.mode,
            config_hash: config.hash()?,
            epochs_completed: 0,
        })
    }

    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    /// Adds the Stage-Two heads that are not there yet.
    pub fn ensure_stage2_heads(&mut self, seed: u64) -> Result<()> {
        let (dtype, device) = (self.encoders.dtype(), self.encoders.device().clone());
        let dim = self.encoders.config().embed_dim;
        if self.classifier.is_none() {
            self.classifier = Some(Classifier::new(self.num_identities(), dim, seed, dtype, &device)?);
        }
        if self.mode == Mode::Indivaid && self.attention.is_none() {
            self.attention = Some(AttentionParams::new(dim, dtype, &device)?);
        }
        Ok(())
    }

    /// Parameter groups stored in a checkpoint, in a fixed order.
    pub fn groups(&self) -> Vec<&ParamGroup> {
        let mut out = vec![self.encoders.image_params()];
        if let Some(p) = &self.prompt {
            out.push(p.params());
        }
        if let Some(a) = &self.attention {
            out.push(a.params());
        }
        if let Some(c) = &self.classifier {
            out.push(c.params());
        }
        out.push(self.temperature.params());
        out
    }

    pub fn checksums(&self) -> Result<BTreeMap<String, String>> {
        let mut map = BTreeMap::new();
        for g in self.groups() {
            map.insert(g.name.clone(), g.checksum()?);
        }
        map.insert(
            self.encoders.text_params().name.clone(),
            self.encoders.text_params().checksum()?,
        );
        Ok(map)
    }

    pub fn meta(&self) -> Result<CheckpointMeta> {
        let mut checksums = BTreeMap::new();
        for g in self.groups() {
            checksums.insert(g.name.clone(), g.checksum()?);
        }
        Ok(CheckpointMeta {
            backend: self.encoders.config().backend,
            encoder: self.encoders.config().clone(),
            seed: self.seed,
            stage: self.stage,
            mode: self.mode,
            config_hash: self.config_hash.clone(),
            species: self.species.clone(),
            per_identity_context: self.per_identity_context,
            identities: self.identities.clone(),
            epochs_completed: self.epochs_completed,
            checksums,
            text_encoder_checksum: self.encoders.text_params().checksum()?,
        })
    }

    /// Writes `params/<group>.bin` and `meta.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let params = dir.join("params");
        std::fs::create_dir_all(&params).map_err(|e| Error::io(&params, e))?;
        for g in self.groups() {
            g.save(&params.join(format!("{}.bin", g.name)))?;
        }
        let meta = serde_json::to_string_pretty(&self.meta()?)?;
        let path = dir.join("meta.json");
        std::fs::write(&path, meta).map_err(|e| Error::io(&path, e))?;
        Ok(dir.to_path_buf())
    }

    pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
        let path = dir.join("meta.json");
        if !path.is_file() {
            return Err(Error::MissingArtifact(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = Self::read_meta(dir)?;
        let encoders = Encoders::new(meta.encoder.clone())?;
        let text_sum = encoders.text_params().checksum()?;
        if text_sum != meta.text_encoder_checksum {
            return Err(Error::invalid(format!(
                "{}: text encoder differs from the one the checkpoint was trained with",
                dir.display()
            )));
        }
        let (dtype, device) = (encoders.dtype(), encoders.device().clone());
        let dim = meta.encoder.embed_dim;
        let n = meta.identities.len();
        let has = |g: &str| meta.checksums.contains_key(g);
        let prompt = if has("prompt") {
            Some(PromptState::init(n, &meta.species, &encoders, meta.seed, meta.per_identity_context)?)
        } else {
            None
        };
        let attention = if has("attention") {
            Some(AttentionParams::new(dim, dtype, &device)?)
        } else {
            None
        };
        let classifier = if has("classifier") {
            Some(Classifier::new(n, dim, meta.seed, dtype, &device)?)
        } else {
            None
        };
        let model = Self {
            temperature: Temperature::new(dtype, &device)?,
            encoders,
            prompt,
            attention,
            classifier,
            identities: meta.identities.clone(),
            species: meta.species.clone(),
            per_identity_context: meta.per_identity_context,
            seed: meta.seed,
            stage: meta.stage,
            mode: meta.mode,
            config_hash: meta.config_hash.clone(),
            epochs_completed: meta.epochs_completed,
        };
        let params = dir.join("params");
        for g in model.groups() {
            g.load_into(&params.join(format!("{}.bin", g.name)), &device)?;
            let expect = meta.checksums.get(&g.name).ok_or_else(|| {
                Error::invalid(format!("{}: meta.json lacks group '{}'", dir.display(), g.name))
            })?;
            if &g.checksum()? != expect {
                return Err(Error::invalid(format!(
                    "{}: checksum mismatch for group '{}'",
                    dir.display(),
                    g.name
                )));
            }
        }
        Ok(model)
    }
}
