//! One configuration file with a section per module. Command-line overrides use
//! dotted keys (`trainer.no_mem=true`) and are checked against the schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::concepts::ConceptConfig;
use crate::corpus::{LoadOptions, SplitRatio};
use crate::emotion::EmotionConfig;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::netcore::{DecodeConfig, ModelConfig};
use crate::trainer::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// ESConv-format JSON file.
    pub corpus: Option<PathBuf>,
    /// Explicit `{train, valid, test}` conversation ids; overrides the seeded split.
    pub split_file: Option<PathBuf>,
    pub split_seed: u64,
    pub split_ratio: SplitRatio,
    pub merge_consecutive: bool,
    /// Where `prepare` writes samples, vocabulary and caches.
    pub prepared_dir: Option<PathBuf>,
    /// Words seen fewer times in training map to `<unk>` (word vocabulary only).
    pub min_word_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: None,
            split_file: None,
            split_seed: 13,
            split_ratio: SplitRatio::default(),
            merge_consecutive: false,
            prepared_dir: None,
            min_word_count: 1,
        }
    }
}

impl DataConfig {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            merge_consecutive: self.merge_consecutive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewayConfig {
    pub host: String,
    pub port: u16,
    /// Checkpoint directory holding `model.safetensors`, `bank.json` and `meta.json`.
    pub checkpoint: Option<PathBuf>,
    /// Prepared-data directory with the vocabulary and concept frequency table.
    pub prepared_dir: Option<PathBuf>,
    /// Directory for file-backed sessions; in-memory only when unset.
    pub session_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            checkpoint: None,
            prepared_dir: None,
            session_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub data: DataConfig,
    pub emotion: EmotionConfig,
    pub concepts: ConceptConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub trainer: TrainingConfig,
    pub decode: DecodeConfig,
    pub gateway: GatewayConfig,
}

impl SystemConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Loads `path` (or defaults) and applies `key=value` overrides in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => Self::from_path(p)?,
            None => Self::default(),
        };
        let mut value = serde_json::to_value(&base)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: SystemConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid override: {e}")))?;
        cfg.trainer.validate()?;
        Ok(cfg)
    }

    /// Feature settings with the trainer's emotion and concept ablations applied.
    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            no_emo: self.trainer.no_emo,
            no_kg: self.trainer.no_kg,
            ..self.features.clone()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Every dotted key accepted by `--set`.
    pub fn keys() -> Vec<String> {
        let mut out = Vec::new();
        collect_keys(&serde_json::to_value(Self::default()).expect("defaults serialize"), "", &mut out);
        out
    }
}

fn collect_keys(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) if !prefix.is_empty() && map.is_empty() => out.push(prefix.to_string()),
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                collect_keys(child, &key, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// Sets a dotted key. The value is read as JSON when it parses, else as a string.
/// Unknown keys are rejected; type errors surface when the result is deserialized.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let value: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
        let child = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
        if i + 1 == parts.len() {
            *child = value;
            return Ok(());
        }
        if child.is_null() {
            *child = Value::Object(Default::default());
        }
        node = child;
    }
    Err(Error::Config("empty override key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = SystemConfig::default();
        let back: SystemConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn override_sets_ablation_flag() {
        let c = SystemConfig::resolve(None, &["trainer.no_mem=true".into(), "decode.mode=greedy".into()]).unwrap();
        assert!(c.trainer.no_mem);
        assert_eq!(c.decode.mode, crate::netcore::DecodeMode::Greedy);
        let c = SystemConfig::resolve(None, &["trainer.no_kg=true".into()]).unwrap();
        assert!(c.feature_config().no_kg);
    }

    #[test]
    fn bad_overrides_rejected() {
        assert!(SystemConfig::resolve(None, &["trainer.no_such=1".into()]).is_err());
        assert!(SystemConfig::resolve(None, &["trainer.batch_size=many".into()]).is_err());
        assert!(SystemConfig::resolve(None, &["trainer.lambda_strategy=-1".into()]).is_err());
        assert!(SystemConfig::resolve(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn every_listed_key_accepts_its_own_default() {
        let defaults = serde_json::to_value(SystemConfig::default()).unwrap();
        for key in SystemConfig::keys() {
            let mut v = &defaults;
            for part in key.split('.') {
                v = &v[part];
            }
            let o = format!("{key}={v}");
            SystemConfig::resolve(None, &[o.clone()]).unwrap_or_else(|e| panic!("{o}: {e}"));
        }
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c: SystemConfig = serde_json::from_str(r#"{"trainer": {"epochs": 3}, "model": {"d_model": 32}}"#).unwrap();
        assert_eq!(c.trainer.epochs, 3);
        assert_eq!(c.trainer.batch_size, 16);
        assert_eq!(c.model.d_model, 32);
    }
}
