//! Hyperparameters, ablation switches and the flat `key=value` config format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which variant of the interaction block to build.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Full,
    /// Intent stream skips label attention (H_I = H).
    NoIntentLabelAttention,
    /// Slot stream skips label attention (H_S = H).
    NoSlotLabelAttention,
    /// Self-attention over the feature-concatenated streams instead of cross-attention.
    SelfAttention,
    /// Only slot queries attend to intent keys/values.
    IntentToSlotOnly,
    /// Only intent queries attend to slot keys/values.
    SlotToIntentOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::Full,
        AblationMode::NoIntentLabelAttention,
        AblationMode::NoSlotLabelAttention,
        AblationMode::SelfAttention,
        AblationMode::IntentToSlotOnly,
        AblationMode::SlotToIntentOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoIntentLabelAttention => "no_intent_label_attention",
            AblationMode::NoSlotLabelAttention => "no_slot_label_attention",
            AblationMode::SelfAttention => "self_attention",
            AblationMode::IntentToSlotOnly => "intent_to_slot_only",
            AblationMode::SlotToIntentOnly => "slot_to_intent_only",
        }
    }

    pub fn intent_label_attention(self) -> bool {
        self != AblationMode::NoIntentLabelAttention
    }

    pub fn slot_label_attention(self) -> bool {
        self != AblationMode::NoSlotLabelAttention
    }

    /// Slot queries attend to the intent stream.
    pub fn intent_to_slot(self) -> bool {
        !matches!(self, AblationMode::SlotToIntentOnly | AblationMode::SelfAttention)
    }

    /// Intent queries attend to the slot stream.
    pub fn slot_to_intent(self) -> bool {
        !matches!(self, AblationMode::IntentToSlotOnly | AblationMode::SelfAttention)
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden width d of the encoder output and the interaction block.
    pub hidden_dim: usize,
    /// Word embedding width e.
    pub embedding_dim: usize,
    /// Number of stacked interaction layers L.
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Dropout inside the interaction block (attention weights, FFN output).
    pub dropout: f64,
    /// Dropout on word embeddings.
    pub embedding_dropout: f64,
    pub layer_norm_eps: f64,
    pub l2: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub ablation: AblationMode,
    pub lowercase: bool,
    pub min_freq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            embedding_dim: 300,
            layers: 2,
            heads: 8,
            ffn_dim: 512,
            dropout: 0.1,
            embedding_dropout: 0.0,
            layer_norm_eps: 1e-5,
            l2: 1e-6,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 15,
            grad_clip: 5.0,
            seed: 0,
            ablation: AblationMode::Full,
            lowercase: true,
            min_freq: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl ModelConfig {
    /// Small dimensions for tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            hidden_dim: 8,
            embedding_dim: 6,
            layers: 2,
            heads: 2,
            ffn_dim: 12,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(2) {
            return fail(format!("hidden_dim must be a positive even number, got {}", self.hidden_dim));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return fail(format!("hidden_dim {} is not divisible by heads {}", self.hidden_dim, self.heads));
        }
        if self.layers < 1 {
            return fail("layers must be at least 1".into());
        }
        for (name, p) in [("dropout", self.dropout), ("embedding_dropout", self.embedding_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        if self.embedding_dim == 0 || self.ffn_dim == 0 {
            return fail("embedding_dim and ffn_dim must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "embedding_dim" => self.embedding_dim = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "ffn_dim" => self.ffn_dim = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "embedding_dropout" => self.embedding_dropout = parse(key, v)?,
            "layer_norm_eps" => self.layer_norm_eps = parse(key, v)?,
            "l2" => self.l2 = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "ablation" => self.ablation = v.parse()?,
            "lowercase" => self.lowercase = parse(key, v)?,
            "min_freq" => self.min_freq = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` text: one assignment per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("hidden_dim", self.hidden_dim.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("dropout", self.dropout.to_string()),
            ("embedding_dropout", self.embedding_dropout.to_string()),
            ("layer_norm_eps", self.layer_norm_eps.to_string()),
            ("l2", self.l2.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("seed", self.seed.to_string()),
            ("ablation", self.ablation.to_string()),
            ("lowercase", self.lowercase.to_string()),
            ("min_freq", self.min_freq.to_string()),
        ]
    }

    /// First 16 hex digits of the SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(&digest[..8])
    }
}
