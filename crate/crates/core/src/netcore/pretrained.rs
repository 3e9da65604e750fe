//! Initialization from a BART-style encoder-decoder checkpoint.
//!
//! The checkpoint's single encoder is copied into the context, strategy and
//! pattern encoders; the decoder, shared embedding and logits bias map directly.
//! Task heads and the memory-fusion attention keep their random initialization.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::Deserialize;

use super::model::StrategyMemoryModel;
use super::ModelConfig;
use crate::error::{Error, Result};

const ENCODER_COPIES: [&str; 3] = ["context_encoder.", "strategy_encoder.", "pattern_encoder."];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PretrainedReport {
    pub loaded: Vec<String>,
    pub kept_random: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct BartJson {
    vocab_size: usize,
    d_model: usize,
    encoder_attention_heads: usize,
    encoder_ffn_dim: usize,
    encoder_layers: usize,
    decoder_layers: usize,
    #[serde(default)]
    dropout: Option<f64>,
    #[serde(default)]
    init_std: Option<f64>,
}

/// Builds a model configuration from a checkpoint's `config.json`, keeping
/// `base`'s task-specific settings (strategy count, input limit, seed).
pub fn config_from_json(path: &Path, base: &ModelConfig) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let j: BartJson = serde_json::from_str(&text)?;
    Ok(ModelConfig {
        vocab_size: j.vocab_size,
        d_model: j.d_model,
        heads: j.encoder_attention_heads,
        ffn_dim: j.encoder_ffn_dim,
        encoder_layers: j.encoder_layers,
        decoder_layers: j.decoder_layers,
        dropout: j.dropout.unwrap_or(base.dropout),
        init_std: j.init_std.unwrap_or(base.init_std),
        ..base.clone()
    })
}

/// Candidate checkpoint names for one of our parameters, most specific first.
fn source_names(name: &str) -> Vec<String> {
    if name == "shared.weight" {
        return vec![
            "model.shared.weight".into(),
            "shared.weight".into(),
            "model.encoder.embed_tokens.weight".into(),
        ];
    }
    if name == "final_logits_bias" {
        return vec!["final_logits_bias".into(), "model.final_logits_bias".into()];
    }
    for prefix in ENCODER_COPIES {
        if let Some(rest) = name.strip_prefix(prefix) {
            return vec![format!("model.encoder.{rest}"), format!("encoder.{rest}")];
        }
    }
    if let Some(rest) = name.strip_prefix("decoder.") {
        return vec![format!("model.decoder.{rest}"), format!("decoder.{rest}")];
    }
    Vec::new()
}

/// Position tables in the checkpoint may be longer than ours; only leading rows are used.
fn fit(name: &str, src: &Tensor, target: &[usize]) -> Result<Tensor> {
    if src.dims() == target {
        return Ok(src.clone());
    }
    if name.ends_with("embed_positions.weight") && src.rank() == 2 && target.len() == 2 {
        let (rows, cols) = src.dims2()?;
        if cols == target[1] && rows >= target[0] {
            return Ok(src.narrow(0, 0, target[0])?);
        }
    }
    Err(Error::Checkpoint(format!(
        "shape mismatch for {name}: checkpoint {:?}, model {:?}",
        src.dims(),
        target
    )))
}

pub fn load_tensors(path: &Path, device: &Device) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("no pretrained weights at {}", path.display())));
    }
    Ok(candle_core::safetensors::load(path, device)?)
}

/// Overwrites every backbone parameter with its checkpoint counterpart.
/// Backbone parameters missing from the checkpoint are an error.
pub fn apply_bart_weights(model: &StrategyMemoryModel, tensors: &HashMap<String, Tensor>) -> Result<PretrainedReport> {
    let mut report = PretrainedReport::default();
    let names: Vec<(String, Vec<usize>)> = model
        .params
        .iter()
        .map(|(n, v)| (n.clone(), v.dims().to_vec()))
        .collect();
    for (name, dims) in names {
        let candidates = source_names(&name);
        if candidates.is_empty() {
            report.kept_random.push(name);
            continue;
        }
        let src = candidates
            .iter()
            .find_map(|c| tensors.get(c))
            .ok_or_else(|| Error::Checkpoint(format!("pretrained checkpoint lacks {}", candidates[0])))?;
        model.params.assign(&name, &fit(&name, src, &dims)?)?;
        report.loaded.push(name);
    }
    Ok(report)
}

pub fn load_bart_weights(model: &StrategyMemoryModel, path: &Path) -> Result<PretrainedReport> {
    let tensors = load_tensors(path, model.device())?;
    apply_bart_weights(model, &tensors)
}
