use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Divisor applied to attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `sqrt(head_dim)`.
    #[default]
    HeadDim,
    /// `sqrt(hidden)`.
    Hidden,
}

fn default_init_std() -> f64 {
    0.02
}

/// Architecture of the backbone, its classifier and the exit heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub classes: usize,
    pub vocab: usize,
    pub max_len: usize,
    /// Width of each exit head's block; `0` means `hidden / 2`.
    #[serde(default)]
    pub sub_hidden: usize,
    /// Inner FFN size of each exit head's block; `0` means `ffn / 2`.
    #[serde(default)]
    pub sub_ffn: usize,
    #[serde(default)]
    pub attention_scale: AttentionScale,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Weight std of the exit heads; `0` means `init_std`.
    #[serde(default)]
    pub sub_init_std: f64,
}

impl ModelConfig {
    pub fn new(layers: usize, hidden: usize, heads: usize, ffn: usize, classes: usize, vocab: usize, max_len: usize) -> Self {
        Self {
            layers,
            hidden,
            heads,
            ffn,
            classes,
            vocab,
            max_len,
            sub_hidden: 0,
            sub_ffn: 0,
            attention_scale: AttentionScale::HeadDim,
            init_std: default_init_std(),
            sub_init_std: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn sub_width(&self) -> usize {
        if self.sub_hidden == 0 { (self.hidden / 2).max(1) } else { self.sub_hidden }
    }

    pub fn sub_ffn_width(&self) -> usize {
        if self.sub_ffn == 0 { (self.ffn / 2).max(1) } else { self.sub_ffn }
    }

    pub fn sub_init(&self) -> f64 {
        if self.sub_init_std == 0.0 { self.init_std } else { self.sub_init_std }
    }

    /// Divisor for backbone attention logits.
    pub fn logit_scale(&self) -> f64 {
        match self.attention_scale {
            AttentionScale::HeadDim => (self.head_dim() as f64).sqrt(),
            AttentionScale::Hidden => (self.hidden as f64).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers < 2 {
            return fail(format!("need at least 2 layers, got {}", self.layers));
        }
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return fail(format!("hidden {} not divisible into {} heads", self.hidden, self.heads));
        }
        if self.ffn == 0 {
            return fail("ffn size must be positive".into());
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.vocab < 2 {
            return fail("vocabulary must hold [CLS] and at least one token".into());
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        if self.sub_width() > self.hidden {
            return fail(format!("exit head width {} exceeds hidden {}", self.sub_width(), self.hidden));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return fail(format!("init_std {} must be positive", self.init_std));
        }
        if !(self.sub_init_std.is_finite() && self.sub_init_std >= 0.0) {
            return fail(format!("sub_init_std {} must be non-negative", self.sub_init_std));
        }
        Ok(())
    }
}
