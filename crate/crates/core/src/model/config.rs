use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::UNK_TOKEN;
use crate::error::{CladError, Result};

/// Depth of the visual encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Three strided conv stages.
    #[default]
    Deep,
    /// A single conv stage followed directly by global pooling.
    Shallow,
}

/// Hyperparameters and architecture sizes. Field names double as the config
/// file keys; missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub embed_dim: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Token vocabulary; index 0 is always the unknown token.
    pub vocab: Vec<String>,
    pub token_dim: usize,
    /// Positive-pair margin of the contrastive hinge.
    pub alpha: f64,
    /// Negative-pair margin of the contrastive hinge.
    pub beta: f64,
    /// Scale of the exponential anomaly score.
    pub sigma: f64,
    /// Weight of the reconstruction term in the total loss.
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub seed: u64,
    pub encoder: EncoderKind,
    /// When false the contrastive term is dropped from the training objective.
    pub contrastive: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            embed_dim: 32,
            image_size: 64,
            channels: 1,
            vocab: vec![UNK_TOKEN.to_string()],
            token_dim: 16,
            alpha: 0.2,
            beta: 1.0,
            sigma: 1.0,
            lambda: 0.1,
            lr: 1e-3,
            batch_size: 8,
            epochs_pretrain: 20,
            epochs_finetune: 30,
            seed: 42,
            encoder: EncoderKind::Deep,
            contrastive: true,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(CladError::usage(format!("invalid config: {msg}")));
        if self.embed_dim == 0 || self.token_dim == 0 {
            return fail("embed_dim and token_dim must be positive");
        }
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return fail("image_size must be a positive multiple of 8");
        }
        if self.channels != 1 && self.channels != 3 {
            return fail("channels must be 1 or 3");
        }
        if !(self.alpha >= 0.0 && self.beta > self.alpha) {
            return fail("margins must satisfy beta > alpha >= 0");
        }
        if !(self.sigma > 0.0) {
            return fail("sigma must be positive");
        }
        if !(self.lambda >= 0.0) {
            return fail("lambda must be non-negative");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return fail("lr must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.vocab.first().map(String::as_str) != Some(UNK_TOKEN) {
            return fail("vocab must start with the unknown token");
        }
        let mut seen = HashSet::new();
        if !self.vocab.iter().all(|t| seen.insert(t)) {
            return fail("vocab contains duplicates");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Config = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Short stable digest of the serialized config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Appends tokens of `text` missing from the vocabulary, in first-occurrence order.
    pub fn extend_vocab(&mut self, text: &str) {
        for token in text.split_whitespace().map(str::to_lowercase) {
            if !self.vocab.contains(&token) {
                self.vocab.push(token);
            }
        }
    }
}
