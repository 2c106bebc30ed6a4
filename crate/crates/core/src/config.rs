//! Run configuration.
//!
//! The on-disk format is a flat `section.key = value` document, one setting
//! per line, `#` starting a comment. Keys are resolved against the nested
//! [`Config`] structure; unknown keys are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneMode {
    /// Transformer encoder pre-trained with masked-token prediction, then frozen.
    Mlm,
    /// Token + position embeddings only, trained jointly with the VAE.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub max_len: usize,
    pub min_count: usize,
    pub held_out_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub mode: BackboneMode,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub trainable: bool,
    pub mask_rate: f64,
    pub steps: usize,
    pub lr: f32,
    pub token_budget: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub d_model: usize,
    pub d_latent: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleConfig {
    /// Expected L2 norm of each freshly initialized style embedding.
    pub init_scale: f32,
    /// Adds the `(1 - d_i) log(1 - σ(cos))` terms for non-target styles.
    pub full_bce: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_vae: f32,
    pub lambda_style: f32,
    pub beta: f32,
    pub lr: f32,
    pub token_budget: usize,
    pub stage1_steps: usize,
    /// Fraction of stage-I steps over which β ramps linearly from 0.
    pub kl_warmup_fraction: f32,
    /// Minimum KL charged per latent dimension and sentence, in nats.
    pub free_bits: f32,
    pub clip_norm: f32,
    pub stage2_epochs: usize,
    pub stage2_lr_factor: f32,
    pub stage2_mask_fraction: f64,
    /// Stage-II early stop after this many epochs without held-out improvement.
    pub patience: usize,
    /// Steps between checkpoints during training (0 disables).
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerConfig {
    pub gamma: f32,
    pub heads: usize,
    pub ffn_dim: usize,
    pub steps: usize,
    pub lr: f32,
    pub token_budget: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub classifier_epochs: usize,
    pub classifier_lr: f32,
    pub hash_bits: u32,
    pub char_hidden: usize,
    pub char_embed: usize,
    pub char_steps: usize,
    pub char_lr: f32,
    pub char_batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub weights: Vec<f32>,
    pub max_len: usize,
    pub sample: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub run: RunConfig,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub vae: VaeConfig,
    pub style: StyleConfig,
    pub train: TrainConfig,
    pub scorer: ScorerConfig,
    pub eval: EvalConfig,
    pub transfer: TransferConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::synthetic()
    }
}

impl Config {
    /// Desk-scale settings for the synthetic two-style corpus.
    pub fn synthetic() -> Self {
        Self {
            run: RunConfig { seed: 7 },
            data: DataConfig {
                max_len: crate::corpus::DEFAULT_MAX_LEN,
                min_count: 1,
                held_out_fraction: 0.1,
            },
            backbone: BackboneConfig {
                mode: BackboneMode::Mlm,
                layers: 2,
                d_model: 64,
                heads: 2,
                ffn_dim: 128,
                trainable: false,
                mask_rate: 0.15,
                steps: 400,
                lr: 1e-3,
                token_budget: 512,
            },
            vae: VaeConfig {
                d_model: 64,
                d_latent: 64,
                layers: 2,
                heads: 2,
                ffn_dim: 256,
            },
            style: StyleConfig {
                init_scale: 0.4,
                full_bce: false,
            },
            train: TrainConfig {
                lambda_vae: 1.0,
                lambda_style: 1.0,
                beta: 1.0,
                lr: 1e-3,
                token_budget: 512,
                stage1_steps: 1500,
                kl_warmup_fraction: 0.1,
                free_bits: 0.5,
                clip_norm: 1.0,
                stage2_epochs: 8,
                stage2_lr_factor: 0.5,
                stage2_mask_fraction: 0.5,
                patience: 3,
                checkpoint_every: 0,
            },
            scorer: ScorerConfig {
                gamma: 0.05,
                heads: 2,
                ffn_dim: 128,
                steps: 300,
                lr: 1e-3,
                token_budget: 512,
            },
            eval: EvalConfig {
                classifier_epochs: 5,
                classifier_lr: 0.1,
                hash_bits: 18,
                char_hidden: 64,
                char_embed: 16,
                char_steps: 400,
                char_lr: 5e-3,
                char_batch: 32,
            },
            transfer: TransferConfig {
                weights: vec![0.5, 1.0, 1.5, 2.0, 2.5],
                max_len: 20,
                sample: false,
            },
        }
    }

    /// Full-scale dimensions and hyperparameters (sentiment/formality task).
    pub fn full_scale() -> Self {
        let mut c = Self::synthetic();
        c.backbone.d_model = 768;
        c.backbone.heads = 12;
        c.backbone.ffn_dim = 3072;
        c.backbone.token_budget = 8092;
        c.vae = VaeConfig {
            d_model: 768,
            d_latent: 768,
            layers: 2,
            heads: 4,
            ffn_dim: 1024,
        };
        c.train.lr = 0.0005;
        c.train.token_budget = 8092;
        c.train.free_bits = 0.0;
        c.scorer.gamma = 0.01;
        c.scorer.token_budget = 8092;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let t = &self.train;
        for (name, v) in [
            ("train.lambda_vae", t.lambda_vae),
            ("train.lambda_style", t.lambda_style),
            ("train.beta", t.beta),
            ("train.free_bits", t.free_bits),
        ] {
            if !(v >= 0.0) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&t.stage2_mask_fraction) {
            return bad(format!(
                "train.stage2_mask_fraction must be in [0,1], got {}",
                t.stage2_mask_fraction
            ));
        }
        if !(self.scorer.gamma > 0.0) {
            return bad(format!("scorer.gamma must be > 0, got {}", self.scorer.gamma));
        }
        if self.scorer.gamma >= 1.0 {
            log::warn!("scorer.gamma = {} is outside (0,1)", self.scorer.gamma);
        }
        if self.vae.d_model % self.vae.heads != 0 || self.backbone.d_model % self.backbone.heads != 0 {
            return bad("model widths must be divisible by their head counts".into());
        }
        if self.backbone.d_model % self.scorer.heads != 0 {
            return bad("scorer.heads must divide backbone.d_model".into());
        }
        if self.transfer.weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("transfer.weights must be >= 0".into());
        }
        Ok(())
    }

    /// Applies one `section.key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key '{key}' is not of the form section.key")))?;
        let slot = root
            .get_mut(section)
            .and_then(|s| s.get_mut(field))
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
        *slot = parse_like(slot, value)
            .ok_or_else(|| Error::Config(format!("bad value '{value}' for '{key}'")))?;
        *self = serde_json::from_value(root)
            .map_err(|e| Error::Config(format!("bad value '{value}' for '{key}': {e}")))?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::synthetic();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Renders every key, suitable for [`Config::parse`] and run logs.
    pub fn to_text(&self) -> String {
        let root = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for (section, fields) in root.as_object().unwrap() {
            for (k, v) in fields.as_object().unwrap() {
                let rendered = match v {
                    Value::String(s) => s.clone(),
                    Value::Array(items) => items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
                    other => other.to_string(),
                };
                let _ = writeln!(out, "{section}.{k} = {rendered}");
            }
        }
        out
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn parse_like(current: &Value, raw: &str) -> Option<Value> {
    match current {
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().ok().map(Value::from),
        Value::Number(_) => raw.parse::<f64>().ok().map(Value::from),
        Value::String(_) => Some(Value::String(raw.to_string())),
        Value::Array(_) => raw
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<f64>().ok().map(Value::from))
            .collect::<Option<Vec<_>>>()
            .map(Value::Array),
        _ => None,
    }
}
