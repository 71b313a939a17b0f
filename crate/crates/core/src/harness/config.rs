use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, DEFAULT_LAMBDA};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "STSN_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    Standard,
    ReconPretrain,
    DualTrain,
}

/// One component switched off for an ablation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoSlotAttention,
    NoTcn,
    SmallTransformerL4,
    NoAugmentations,
    NoDropout,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::NoSlotAttention,
        Ablation::NoTcn,
        Ablation::SmallTransformerL4,
        Ablation::NoAugmentations,
        Ablation::NoDropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoSlotAttention => "no_slot_attention",
            Ablation::NoTcn => "no_tcn",
            Ablation::SmallTransformerL4 => "small_transformer_l4",
            Ablation::NoAugmentations => "no_augmentations",
            Ablation::NoDropout => "no_dropout",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|a| a.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

/// Everything a run needs. Defaults follow the 80×80 grayscale setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub epochs: usize,
    pub lambda: f64,
    pub image_size: usize,
    pub image_channels: usize,
    pub encoder_channels: usize,
    pub decoder_channels: usize,
    pub decoder_layers: usize,
    pub slots: usize,
    pub slot_dim: usize,
    pub iterations: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub dropout: f64,
    pub seed: u64,
    pub no_slot_attention: bool,
    pub no_tcn: bool,
    pub small_transformer_l4: bool,
    pub no_augmentations: bool,
    pub no_dropout: bool,
    pub regime: Regime,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::from_model(&ModelConfig::grayscale_80())
    }
}

impl TrainConfig {
    /// Training defaults around an explicit architecture.
    pub fn from_model(m: &ModelConfig) -> Self {
        Self {
            batch_size: 16,
            lr: 4e-4,
            warmup_steps: 75_000,
            epochs: 500,
            lambda: DEFAULT_LAMBDA,
            image_size: m.image_size,
            image_channels: m.image_channels,
            encoder_channels: m.encoder_channels,
            decoder_channels: m.decoder_channels,
            decoder_layers: m.decoder_layers,
            slots: m.slots,
            slot_dim: m.slot_dim,
            iterations: m.iterations,
            layers: m.layers,
            heads: m.heads,
            head_dim: m.head_dim,
            mlp_dim: m.mlp_dim,
            dropout: m.dropout,
            seed: 0,
            no_slot_attention: m.no_slot_attention,
            no_tcn: m.no_tcn,
            small_transformer_l4: false,
            no_augmentations: false,
            no_dropout: false,
            regime: Regime::Standard,
        }
    }

    /// Architecture after ablation flags are applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            image_channels: self.image_channels,
            encoder_channels: self.encoder_channels,
            decoder_channels: self.decoder_channels,
            decoder_layers: self.decoder_layers,
            slots: self.slots,
            slot_dim: self.slot_dim,
            iterations: self.iterations,
            layers: if self.small_transformer_l4 { 4 } else { self.layers },
            heads: self.heads,
            head_dim: self.head_dim,
            mlp_dim: self.mlp_dim,
            dropout: if self.no_dropout { 0.0 } else { self.dropout },
            no_slot_attention: self.no_slot_attention,
            no_tcn: self.no_tcn,
        }
    }

    pub fn augment(&self) -> bool {
        !self.no_augmentations
    }

    pub fn ablations(&self) -> Vec<Ablation> {
        Ablation::ALL.into_iter().filter(|&a| self.has(a)).collect()
    }

    pub fn has(&self, a: Ablation) -> bool {
        match a {
            Ablation::NoSlotAttention => self.no_slot_attention,
            Ablation::NoTcn => self.no_tcn,
            Ablation::SmallTransformerL4 => self.small_transformer_l4,
            Ablation::NoAugmentations => self.no_augmentations,
            Ablation::NoDropout => self.no_dropout,
        }
    }

    pub fn with(mut self, a: Ablation) -> Self {
        match a {
            Ablation::NoSlotAttention => self.no_slot_attention = true,
            Ablation::NoTcn => self.no_tcn = true,
            Ablation::SmallTransformerL4 => self.small_transformer_l4 = true,
            Ablation::NoAugmentations => self.no_augmentations = true,
            Ablation::NoDropout => self.no_dropout = true,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr {} must be finite and non-negative", self.lr)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be finite and non-negative", self.lambda)));
        }
        self.model_config().validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 over the fields that shape the parameter set and the
    /// function it computes. Dropout and optimisation settings are left out
    /// so checkpoints stay loadable across them.
    pub fn architecture_hash(&self) -> [u8; 32] {
        let mut m = self.model_config();
        m.dropout = 0.0;
        let json = serde_json::to_vec(&m).expect("config serialises");
        Sha256::digest(&json).into()
    }

    /// Sets one field from its textual value. Values parse as JSON first
    /// and fall back to a bare string, so `regime=dual_train` works.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let mut map = match serde_json::to_value(&*self)? {
            Value::Object(m) => m,
            _ => unreachable!("config serialises to an object"),
        };
        if !map.contains_key(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        let v = value.trim();
        let parsed = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        map.insert(key.to_string(), parsed);
        *self = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::Config(format!("bad value {v:?} for {key}: {e}")))?;
        Ok(())
    }

    /// Parses a JSON object or `key = value` lines (`#` starts a comment).
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            return serde_json::from_str(text).map_err(|e| Error::Config(format!("bad JSON config: {e}")));
        }
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Defaults, then the file, then the seed variable, then explicit
    /// overrides; the result is validated.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = env_seed {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
