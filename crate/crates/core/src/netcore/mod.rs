//! The neural model: context encoder, strategy predictor, pattern extractor, memory
//! fusion and decoder, plus every loss term.

mod batch;
mod generate;
pub mod layers;
pub mod loss;
mod model;
pub mod params;
pub mod pretrained;

use std::path::PathBuf;

use candle_core::DType;
use serde::{Deserialize, Serialize};

pub use batch::{memory_tensor, Batch, EncoderInputs, SpecialIds};
pub use generate::{DecodeConfig, DecodeMode};
pub use layers::{masked_max_pool, Dropout, MultiHeadAttention};
pub use loss::{argmax, total_loss, LossBreakdown};
pub use model::{fuse_memory, ForwardOutput, MemorySelection, PreparedContext, StrategyMemoryModel};
pub use params::ParamStore;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Maximum encoder input length L.
    pub max_positions: usize,
    /// Number of strategy categories G.
    pub strategies: usize,
    /// Cross-attention heads for memory fusion; defaults to `heads`.
    #[serde(default)]
    pub fusion_heads: Option<usize>,
    /// Reuse the context encoder as the pattern extractor.
    #[serde(default)]
    pub share_pattern_encoder: bool,
    #[serde(default)]
    pub dropout: f64,
    pub init_std: f64,
    #[serde(default)]
    pub precision: Precision,
    pub seed: u64,
    /// Directory holding a BART-style `model.safetensors`, `config.json` and `tokenizer.json`.
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
}

impl Default for ModelConfig {
    /// The test profile; `vocab_size` is filled in from the tokenizer.
    fn default() -> Self {
        ModelConfig::test_profile(0)
    }
}

impl ModelConfig {
    /// Small randomly initialized configuration used for tests and offline runs.
    pub fn test_profile(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            max_positions: 512,
            strategies: 8,
            fusion_heads: None,
            share_pattern_encoder: false,
            dropout: 0.0,
            init_std: 0.02,
            precision: Precision::F32,
            seed: 42,
            pretrained: None,
        }
    }

    /// Geometry of bart-base.
    pub fn bart_base() -> Self {
        ModelConfig {
            vocab_size: 50265,
            d_model: 768,
            heads: 12,
            ffn_dim: 3072,
            encoder_layers: 6,
            decoder_layers: 6,
            max_positions: 512,
            strategies: 8,
            fusion_heads: None,
            share_pattern_encoder: false,
            dropout: 0.1,
            init_std: 0.02,
            precision: Precision::F32,
            seed: 42,
            pretrained: None,
        }
    }

    pub fn fusion_head_count(&self) -> usize {
        self.fusion_heads.unwrap_or(self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("max_positions", self.max_positions),
            ("strategies", self.strategies),
            ("fusion_heads", self.fusion_head_count()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 || self.d_model % self.fusion_head_count() != 0 {
            return Err(Error::Config("model.d_model must divide evenly into heads".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("model.dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}
