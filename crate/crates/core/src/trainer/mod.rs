//! Multi-task training loop: per batch, forward against the bank as it stood
//! before the batch, optimize the weighted loss, then store the batch's pattern
//! vectors under their gold strategies.

pub mod checkpoint;
pub mod optim;

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::DType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::EncodedSample;
use crate::membank::MemoryBank;
use crate::netcore::loss::token_nll_sum;
use crate::netcore::{
    Batch, DecodeConfig, Dropout, EncoderInputs, LossBreakdown, MemorySelection, SpecialIds, StrategyMemoryModel,
};

pub use checkpoint::{config_fingerprint, CheckpointMeta, CHECKPOINT_VERSION};
pub use optim::{AdamW, AdamWSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    /// Stops early after this many optimizer steps; the schedule ends here too.
    pub max_steps: Option<usize>,
    pub lambda_strategy: f64,
    pub lambda_pattern: f64,
    /// Memory capacity N_m per strategy.
    pub memory_capacity: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub no_mem: bool,
    pub no_emo: bool,
    pub no_kg: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 16,
            learning_rate: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 100,
            epochs: 15,
            max_steps: None,
            lambda_strategy: 0.3,
            lambda_pattern: 0.1,
            memory_capacity: 64,
            grad_clip: 1.0,
            seed: 42,
            no_mem: false,
            no_emo: false,
            no_kg: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.memory_capacity == 0 {
            return Err(Error::Config(
                "trainer.batch_size, trainer.epochs and trainer.memory_capacity must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("trainer.learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("trainer.beta1 and trainer.beta2 must be in [0, 1)".into()));
        }
        if self.lambda_strategy < 0.0 || self.lambda_pattern < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWSettings {
        AdamWSettings {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn total_steps(&self, steps_per_epoch: usize) -> usize {
        let full = self.epochs * steps_per_epoch;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoStrategyLoss,
    NoPatternLoss,
    NoMem,
    NoEmo,
    NoKg,
}

impl Ablation {
    pub const GRID: [Ablation; 5] = [
        Ablation::NoStrategyLoss,
        Ablation::NoPatternLoss,
        Ablation::NoMem,
        Ablation::NoEmo,
        Ablation::NoKg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoStrategyLoss => "no_strategy_loss",
            Ablation::NoPatternLoss => "no_pattern_loss",
            Ablation::NoMem => "no_mem",
            Ablation::NoEmo => "no_emo",
            Ablation::NoKg => "no_kg",
        }
    }

    /// Alters exactly the component this ablation removes.
    pub fn apply(self, cfg: &mut TrainingConfig) {
        match self {
            Ablation::NoStrategyLoss => cfg.lambda_strategy = 0.0,
            Ablation::NoPatternLoss => cfg.lambda_pattern = 0.0,
            Ablation::NoMem => cfg.no_mem = true,
            Ablation::NoEmo => cfg.no_emo = true,
            Ablation::NoKg => cfg.no_kg = true,
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
        let key = s.trim().to_lowercase().replace(['-', ' '], "_");
        Ok(match key.as_str() {
            "no_strategy_loss" | "w/o_ls" | "lambda1=0" => Ablation::NoStrategyLoss,
            "no_pattern_loss" | "w/o_lr" | "lambda2=0" => Ablation::NoPatternLoss,
            "no_mem" | "w/o_mem" => Ablation::NoMem,
            "no_emo" | "w/o_emo" => Ablation::NoEmo,
            "no_kg" | "w/o_kg" => Ablation::NoKg,
            _ => return Err(Error::Config(format!("unknown ablation {s:?}"))),
        })
    }
}

/// One configuration per ablation row, each differing from `base` in one component.
pub fn ablation_grid(base: &TrainingConfig) -> Vec<(Ablation, TrainingConfig)> {
    Ablation::GRID
        .iter()
        .map(|&a| {
            let mut c = base.clone();
            a.apply(&mut c);
            (a, c)
        })
        .collect()
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        if step >= self.total {
            return 0.0;
        }
        let span = (self.total - self.warmup).max(1) as f64;
        self.peak * (self.total - step) as f64 / span
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub best_valid_ppl: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Dropout stream position, as a decimal string.
    pub dropout_word_pos: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub generation: f64,
    pub strategy: f64,
    pub pattern: f64,
    pub valid_ppl: Option<f64>,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
    pub best_valid_ppl: Option<f64>,
    pub best_epoch: Option<usize>,
    pub steps: u64,
}

pub struct Trainer<'m> {
    pub model: &'m StrategyMemoryModel,
    pub bank: MemoryBank,
    pub optimizer: AdamW,
    pub config: TrainingConfig,
    pub state: TrainState,
    pub specials: SpecialIds,
    schedule: LrSchedule,
    dropout_rng: ChaCha8Rng,
}

impl<'m> Trainer<'m> {
    pub fn new(
        model: &'m StrategyMemoryModel,
        config: TrainingConfig,
        specials: SpecialIds,
        steps_per_epoch: usize,
    ) -> Result<Self> {
        config.validate()?;
        let bank = MemoryBank::new(model.config.strategies, config.memory_capacity, model.config.d_model)?;
        let optimizer = AdamW::new(&model.params, config.adamw())?;
        let schedule = LrSchedule {
            peak: config.learning_rate,
            warmup: config.warmup_steps,
            total: config.total_steps(steps_per_epoch),
        };
        let dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d20b);
        Ok(Trainer {
            model,
            bank,
            optimizer,
            config,
            state: TrainState::default(),
            specials,
            schedule,
            dropout_rng,
        })
    }

    /// Restores bank, optimizer moments, counters and dropout stream from a checkpoint.
    pub fn resume(&mut self, dir: &Path) -> Result<()> {
        let meta = checkpoint::read_meta(dir)?;
        checkpoint::check_fingerprint(&meta, &self.model.config)?;
        self.model.params.load(dir.join(checkpoint::MODEL_FILE))?;
        self.bank = checkpoint::load_bank(dir)?;
        self.optimizer.load(&dir.join(checkpoint::OPTIMIZER_FILE), meta.state.step)?;
        let pos: u128 = meta
            .state
            .dropout_word_pos
            .parse()
            .map_err(|_| Error::Checkpoint("bad dropout stream position".into()))?;
        self.dropout_rng.set_word_pos(pos);
        self.state = meta.state;
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        self.schedule
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.total
    }

    fn training_selection(&self) -> MemorySelection {
        if self.config.no_mem {
            MemorySelection::Disabled
        } else {
            MemorySelection::Gold
        }
    }

    pub fn train_step(&mut self, samples: &[&EncodedSample]) -> Result<StepReport> {
        let model = self.model;
        let batch = Batch::collate(samples, self.specials, model.dtype(), model.device())?;
        let selection = self.training_selection();
        let bank = (!self.config.no_mem).then_some(&self.bank);
        let out = {
            let mut drop = Dropout {
                p: model.config.dropout,
                rng: Some(&mut self.dropout_rng),
            };
            model.forward(
                &batch,
                bank,
                selection,
                self.config.lambda_strategy,
                self.config.lambda_pattern,
                &mut drop,
            )?
        };
        let loss = out.breakdown()?;
        if ![loss.generation, loss.strategy, loss.pattern, loss.total]
            .iter()
            .all(|x| x.is_finite())
        {
            return Err(Error::NonFiniteLoss {
                batch: self.state.step as usize,
                generation: loss.generation,
                strategy: loss.strategy,
                pattern: loss.pattern,
            });
        }
        let mut grads = out.total.backward()?;
        let grad_norm = AdamW::clip_grad_norm(&model.params, &mut grads, self.config.grad_clip)?;
        let lr = self.schedule.at(self.state.step as usize);
        self.optimizer.step(&model.params, &grads, lr)?;

        if !self.config.no_mem {
            let rows = out.patterns.detach().to_dtype(DType::F32)?.to_vec2::<f32>()?;
            for (row, &g) in rows.iter().zip(&batch.gold_strategies) {
                self.bank.store(g, row)?;
            }
        }
        self.state.step += 1;
        Ok(StepReport {
            step: self.state.step,
            lr,
            loss,
            grad_norm,
        })
    }

    /// Sample order for an epoch; a pure function of seed and epoch so resumed runs match.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(1_000_003 * (epoch as u64 + 1)));
        idx.shuffle(&mut rng);
        idx
    }

    fn finished(&self) -> bool {
        self.state.step as usize >= self.schedule.total
    }

    /// One pass over `train`, stopping early at the step limit. Returns mean losses.
    pub fn run_epoch(&mut self, train: &[EncodedSample]) -> Result<LossBreakdown> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let order = self.epoch_order(train.len(), self.state.epoch);
        let mut sum = LossBreakdown {
            generation: 0.0,
            strategy: 0.0,
            pattern: 0.0,
            total: 0.0,
        };
        let mut n = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            if self.finished() {
                break;
            }
            let batch: Vec<&EncodedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let r = self.train_step(&batch)?;
            sum.generation += r.loss.generation;
            sum.strategy += r.loss.strategy;
            sum.pattern += r.loss.pattern;
            sum.total += r.loss.total;
            n += 1.0;
            tracing::debug!(step = r.step, lr = r.lr, loss = r.loss.total, "train step");
        }
        self.state.epoch += 1;
        let n: f64 = if n > 0.0 { n } else { 1.0 };
        Ok(LossBreakdown {
            generation: sum.generation / n,
            strategy: sum.strategy / n,
            pattern: sum.pattern / n,
            total: sum.total / n,
        })
    }

    pub fn validation_perplexity(&self, valid: &[EncodedSample]) -> Result<f64> {
        let bank = (!self.config.no_mem).then_some(&self.bank);
        perplexity(self.model, bank, valid, self.specials, self.config.batch_size)
    }

    pub fn save_checkpoint(&mut self, dir: &Path) -> Result<()> {
        self.state.dropout_word_pos = self.dropout_rng.get_word_pos().to_string();
        checkpoint::save(dir, self.model, &self.bank, Some(&self.optimizer), &self.state)
    }

    /// Trains until the epoch or step limit, validating after every epoch. With a
    /// run directory, writes `metrics.jsonl` and `checkpoints/{last,best}`.
    pub fn fit(&mut self, train: &[EncodedSample], valid: &[EncodedSample], run_dir: Option<&Path>) -> Result<FitReport> {
        let mut epochs = Vec::new();
        while self.state.epoch < self.config.epochs && !self.finished() {
            let mean = self.run_epoch(train)?;
            let valid_ppl = if valid.is_empty() {
                None
            } else {
                Some(self.validation_perplexity(valid)?)
            };
            let best = match (valid_ppl, self.state.best_valid_ppl) {
                (Some(p), Some(b)) => p < b,
                (Some(_), None) => true,
                _ => false,
            };
            if best {
                self.state.best_valid_ppl = valid_ppl;
                self.state.best_epoch = Some(self.state.epoch);
            }
            let record = EpochRecord {
                epoch: self.state.epoch,
                step: self.state.step,
                train_loss: mean.total,
                generation: mean.generation,
                strategy: mean.strategy,
                pattern: mean.pattern,
                valid_ppl,
                best,
            };
            tracing::info!(epoch = record.epoch, loss = record.train_loss, ppl = ?record.valid_ppl, "epoch done");
            if let Some(dir) = run_dir {
                append_jsonl(&dir.join("metrics.jsonl"), &record)?;
                let ckpt = dir.join("checkpoints");
                self.save_checkpoint(&ckpt.join("last"))?;
                if best {
                    self.save_checkpoint(&ckpt.join("best"))?;
                }
            }
            epochs.push(record);
        }
        Ok(FitReport {
            epochs,
            best_valid_ppl: self.state.best_valid_ppl,
            best_epoch: self.state.best_epoch,
            steps: self.state.step,
        })
    }
}

pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(value)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Teacher-forced perplexity over every non-pad target token (responses plus `[eos]`),
/// reading memory by predicted strategy; `bank = None` disables memory.
pub fn perplexity(
    model: &StrategyMemoryModel,
    bank: Option<&MemoryBank>,
    samples: &[EncodedSample],
    specials: SpecialIds,
    batch_size: usize,
) -> Result<f64> {
    let (nll, tokens) = nll_totals(model, bank, samples, specials, batch_size)?;
    crate::evalsuite::perplexity_from_nll(nll, tokens)
}

pub fn nll_totals(
    model: &StrategyMemoryModel,
    bank: Option<&MemoryBank>,
    samples: &[EncodedSample],
    specials: SpecialIds,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("perplexity over an empty dataset".into()));
    }
    let selection = if bank.is_some() {
        MemorySelection::Predicted
    } else {
        MemorySelection::Disabled
    };
    let mut nll = 0.0;
    let mut tokens = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&EncodedSample> = chunk.iter().collect();
        let batch = Batch::collate(&refs, specials, model.dtype(), model.device())?;
        let out = model.forward(&batch, bank, selection, 0.0, 0.0, &mut Dropout::off())?;
        let (s, n) = token_nll_sum(&out.logits, &batch.decoder_target, &batch.decoder_mask)?;
        nll += s;
        tokens += n;
    }
    Ok((nll, tokens))
}

/// One decoded sample: generated ids (without bos/eos) and the predicted strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub ids: Vec<u32>,
    pub predicted: usize,
}

/// Generates a response for every sample, reading memory by predicted strategy;
/// `bank = None` disables memory.
pub fn decode_all(
    model: &StrategyMemoryModel,
    bank: Option<&MemoryBank>,
    samples: &[EncodedSample],
    decode: &DecodeConfig,
    specials: SpecialIds,
    batch_size: usize,
) -> Result<Vec<Decoded>> {
    let selection = if bank.is_some() {
        MemorySelection::Predicted
    } else {
        MemorySelection::Disabled
    };
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&EncodedSample> = chunk.iter().collect();
        let inputs = EncoderInputs::collate(&refs, specials, model.dtype(), model.device())?;
        let ctx = model.prepare(&inputs, bank, selection)?;
        let ids = model.generate(&ctx, decode, specials)?;
        out.extend(ids.into_iter().zip(&ctx.predicted).map(|(ids, &p)| Decoded { ids, predicted: p }));
    }
    Ok(out)
}

/// Standard run-directory layout.
pub fn checkpoint_dir(run_dir: &Path, which: &str) -> PathBuf {
    run_dir.join("checkpoints").join(which)
}
