//! Checkpoint directory: `model.safetensors`, `bank.json`, `optimizer.safetensors`
//! and `meta.json` (format version, config fingerprint, training counters).

use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::TrainState;
use crate::error::{Error, Result};
use crate::membank::{BankSnapshot, MemoryBank};
use crate::netcore::{ModelConfig, StrategyMemoryModel};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MODEL_FILE: &str = "model.safetensors";
pub const BANK_FILE: &str = "bank.json";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub fingerprint: String,
    pub model: ModelConfig,
    pub state: TrainState,
}

/// FNV-1a over the canonical JSON of the model configuration, ignoring where
/// pretrained weights came from and initialization-only fields.
pub fn config_fingerprint(cfg: &ModelConfig) -> String {
    let canonical = ModelConfig {
        pretrained: None,
        seed: 0,
        init_std: 0.0,
        ..cfg.clone()
    };
    let bytes = serde_json::to_vec(&canonical).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn save(
    dir: &Path,
    model: &StrategyMemoryModel,
    bank: &MemoryBank,
    optimizer: Option<&AdamW>,
    state: &TrainState,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.params.save(dir.join(MODEL_FILE))?;
    write_json(&dir.join(BANK_FILE), &bank.snapshot())?;
    if let Some(opt) = optimizer {
        opt.save(&dir.join(OPTIMIZER_FILE))?;
    }
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        fingerprint: config_fingerprint(&model.config),
        model: model.config.clone(),
        state: state.clone(),
    };
    write_json(&dir.join(META_FILE), &meta)
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let meta: CheckpointMeta = read_json(&dir.join(META_FILE))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            meta.version
        )));
    }
    Ok(meta)
}

pub fn check_fingerprint(meta: &CheckpointMeta, cfg: &ModelConfig) -> Result<()> {
    let expected = config_fingerprint(cfg);
    if meta.fingerprint != expected {
        return Err(Error::Checkpoint(format!(
            "config fingerprint {} does not match the model's {expected}",
            meta.fingerprint
        )));
    }
    Ok(())
}

pub fn load_bank(dir: &Path) -> Result<MemoryBank> {
    let snap: BankSnapshot = read_json(&dir.join(BANK_FILE))?;
    MemoryBank::restore(&snap)
}

/// Rebuilds the model from the stored configuration and loads weights and bank.
pub fn load_for_inference(dir: &Path, device: &Device) -> Result<(StrategyMemoryModel, MemoryBank, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    if meta.fingerprint != config_fingerprint(&meta.model) {
        return Err(Error::Checkpoint("meta.json fingerprint does not match its config".into()));
    }
    let model = StrategyMemoryModel::new(meta.model.clone(), device)?;
    model.params.load(dir.join(MODEL_FILE))?;
    let bank = load_bank(dir)?;
    if bank.dim() != model.config.d_model {
        return Err(Error::DimensionMismatch {
            expected: model.config.d_model,
            actual: bank.dim(),
        });
    }
    Ok((model, bank, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_tracks_architecture_only() {
        let a = ModelConfig::test_profile(50);
        let mut b = a.clone();
        b.pretrained = Some("/elsewhere".into());
        b.seed += 1;
        b.init_std = 0.5;
        assert_eq!(config_fingerprint(&a), config_fingerprint(&b));
        b.d_model = 32;
        assert_ne!(config_fingerprint(&a), config_fingerprint(&b));
    }

    #[test]
    fn round_trip_restores_weights_and_bank() {
        let dev = Device::Cpu;
        let cfg = ModelConfig {
            d_model: 16,
            heads: 2,
            ffn_dim: 32,
            encoder_layers: 1,
            decoder_layers: 1,
            ..ModelConfig::test_profile(30)
        };
        let model = StrategyMemoryModel::new(cfg.clone(), &dev).unwrap();
        let mut bank = MemoryBank::new(8, 4, 16).unwrap();
        bank.store(3, &[0.5; 16]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let state = TrainState {
            step: 12,
            ..Default::default()
        };
        save(dir.path(), &model, &bank, None, &state).unwrap();
        let (loaded, lbank, meta) = load_for_inference(dir.path(), &dev).unwrap();
        assert_eq!(meta.state.step, 12);
        assert_eq!(lbank, bank);
        let w = |m: &StrategyMemoryModel| {
            m.params
                .get("decoder.layers.0.fc1.weight")
                .unwrap()
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
        };
        assert_eq!(w(&loaded), w(&model));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let meta = CheckpointMeta {
            version: 99,
            fingerprint: String::new(),
            model: ModelConfig::test_profile(10),
            state: TrainState::default(),
        };
        write_json(&dir.path().join(META_FILE), &meta).unwrap();
        assert!(read_meta(dir.path()).is_err());
    }
}
