use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::AugmentConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{default_loss_flags, LossFlags, LossTerm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Indivaid,
    ClipFt,
    ClipZs,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Indivaid => "indivaid",
            Mode::ClipFt => "clip_ft",
            Mode::ClipZs => "clip_zs",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indivaid" => Ok(Mode::Indivaid),
            "clip_ft" => Ok(Mode::ClipFt),
            "clip_zs" => Ok(Mode::ClipZs),
            other => Err(Error::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

/// Everything a training run needs besides data.
///
/// The TOML form uses these field names verbatim, with `encoder` and
/// `augment` as sub-tables.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    pub stage1_lr: f64,
    pub stage2_lr_start: f64,
    pub stage2_lr_peak: f64,
    pub warmup_epochs: usize,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub tau: f64,
    pub epsilon: f64,
    pub I: usize,
    pub K: usize,
    pub seed: u64,
    pub loss_flags: LossFlags,
    pub mode: Mode,
    /// Stage-One batch size.
    pub stage1_batch_size: usize,
    /// Word the identity tokens start from.
    pub species: String,
    /// Experimental: one set of context tokens per identity.
    pub per_identity_context: bool,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            epochs: 60,
            stage1_lr: 3.5e-4,
            stage2_lr_start: 5e-7,
            stage2_lr_peak: 5e-6,
            warmup_epochs: 10,
            decay_factor: 0.1,
            decay_epochs: vec![40, 70],
            tau: 0.3,
            epsilon: 0.1,
            I: 16,
            K: 4,
            seed: 0,
            loss_flags: default_loss_flags(),
            mode: Mode::Indivaid,
            stage1_batch_size: 32,
            species: "animal".into(),
            per_identity_context: false,
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings for the toy backend and small fixtures. Learning rates are
    /// larger than the full-scale defaults since the toy encoder starts from
    /// random weights.
    pub fn toy(stage: u8) -> Self {
        Self {
            stage,
            epochs: if stage == 1 { 20 } else { 25 },
            stage1_lr: 2e-3,
            stage2_lr_start: 8e-3,
            stage2_lr_peak: 8e-2,
            warmup_epochs: 5,
            decay_epochs: vec![15],
            I: 4,
            K: 4,
            encoder: EncoderConfig::toy(32),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage != 1 && self.stage != 2 {
            return bad(format!("stage must be 1 or 2, got {}", self.stage));
        }
        for (name, v) in [
            ("stage1_lr", self.stage1_lr),
            ("stage2_lr_start", self.stage2_lr_start),
            ("stage2_lr_peak", self.stage2_lr_peak),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(self.tau >= 0.0) {
            return bad(format!("tau must be >= 0, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must lie in [0, 1), got {}", self.epsilon));
        }
        if !(self.decay_factor > 0.0) {
            return bad(format!("decay_factor must be > 0, got {}", self.decay_factor));
        }
        if self.I < 2 || self.K < 2 {
            return bad(format!(
                "I={}, K={}: triplet loss needs I >= 2 and K >= 2",
                self.I, self.K
            ));
        }
        if self.stage1_batch_size < 2 {
            return bad(format!(
                "stage1_batch_size {} makes the contrastive loss identically zero",
                self.stage1_batch_size
            ));
        }
        if self.loss_flags.is_empty() {
            return bad("loss_flags is empty".into());
        }
        if self.species.trim().is_empty() {
            return bad("species must not be empty".into());
        }
        self.encoder.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }

    pub fn has_term(&self, term: LossTerm) -> bool {
        self.loss_flags.contains(&term)
    }
}

/// Parses `"id,tri,i2tce"`.
pub fn parse_loss_flags(text: &str) -> Result<LossFlags> {
    let flags: BTreeSet<LossTerm> = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if flags.is_empty() {
        return Err(Error::invalid("no loss terms given"));
    }
    Ok(flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_uses_field_names() {
        let cfg = TrainConfig::toy(2);
        let text = cfg.to_toml_string().unwrap();
        for key in ["stage =", "stage2_lr_peak", "decay_epochs", "I =", "K =", "loss_flags", "[encoder]"] {
            assert!(text.contains(key), "{key} missing from\n{text}");
        }
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(cfg.hash().unwrap(), TrainConfig::toy(2).hash().unwrap());
        assert_ne!(cfg.hash().unwrap(), TrainConfig::toy(1).hash().unwrap());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = TrainConfig::from_toml_str("stage = 2\nI = 3\nloss_flags = [\"tri\", \"i2t\"]\n").unwrap();
        assert_eq!(cfg.stage, 2);
        assert_eq!(cfg.I, 3);
        assert_eq!(cfg.K, 4);
        assert_eq!(cfg.loss_flags, parse_loss_flags("i2t,tri").unwrap());
    }

    #[test]
    fn validation_errors() {
        for text in [
            "stage = 3",
            "stage1_lr = 0.0",
            "tau = -0.1",
            "K = 1",
            "loss_flags = []",
            "unknown_key = 1",
            "mode = \"finetune\"",
        ] {
            assert!(TrainConfig::from_toml_str(text).is_err(), "{text}");
        }
        assert!(parse_loss_flags("id,center").is_err());
    }
}
