use serde::{Deserialize, Serialize};

use silo_core::isa::token::{Vocab, MAX_LEN};

/// Shape and regularization of the encoder-decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// CPU-sized default: 2 layers, width 128, 4 heads.
    pub fn desk() -> Self {
        ModelConfig::with_shape(2, 128, 4)
    }

    /// The published 3x512x8 shape.
    pub fn paper() -> Self {
        ModelConfig::with_shape(3, 512, 8)
    }

    /// For gradient checks and smoke tests.
    pub fn tiny() -> Self {
        ModelConfig {
            dropout: 0.0,
            ..ModelConfig::with_shape(1, 16, 2)
        }
    }

    pub fn with_shape(layers: usize, model_dim: usize, heads: usize) -> Self {
        ModelConfig {
            layers,
            model_dim,
            heads,
            ff_dim: 4 * model_dim,
            vocab: Vocab::get().len(),
            max_len: MAX_LEN,
            dropout: 0.1,
        }
    }

    pub fn named(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 || self.ff_dim == 0 {
            return Err("all dimensions must be positive".into());
        }
        if self.model_dim % self.heads != 0 {
            return Err(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads));
        }
        if self.vocab < 3 || self.max_len < 2 {
            return Err("vocabulary or max_len too small".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must be in [0, 1)".into());
        }
        Ok(())
    }
}

/// Inverse square root learning-rate schedule with linear warmup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup: u64,
    pub factor: f64,
    pub model_dim: usize,
}

impl ScheduleConfig {
    pub const SILO_FACTOR: f64 = 0.5;
    pub const REINFORCE_FACTOR: f64 = 0.01;
    pub const REINFORCE_SMALL_FACTOR: f64 = 0.0025;

    pub fn new(factor: f64, model_dim: usize) -> Self {
        ScheduleConfig { warmup: 2000, factor, model_dim }
    }

    /// Learning rate for 1-based step `step`.
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.factor * (self.model_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}
