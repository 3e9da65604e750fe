use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::{memory_tensor, Batch, EncoderInputs};
use super::layers::{additive_key_mask, masked_max_pool, Decoder, Dropout, Encoder, Init, Linear, MultiHeadAttention};
use super::loss::{argmax, cross_entropy, masked_token_nll, scalar, LossBreakdown};
use super::params::ParamStore;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::membank::MemoryBank;

/// Which memory matrix each sample reads during fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemorySelection {
    /// Gold strategy (training).
    Gold,
    /// Predicted strategy (inference and validation).
    Predicted,
    /// No memory: `m = 0` and its slot is masked out of decoder attention.
    Disabled,
}

#[derive(Debug, Clone)]
struct StrategyHead {
    dense: Linear,
    out_proj: Linear,
}

impl StrategyHead {
    fn forward(&self, s: &Tensor) -> Result<Tensor> {
        self.out_proj.forward(&self.dense.forward(s)?.tanh()?)
    }
}

pub struct StrategyMemoryModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    shared: Tensor,
    final_logits_bias: Tensor,
    context_encoder: Encoder,
    strategy_encoder: Encoder,
    pattern_encoder: Option<Encoder>,
    strategy_head: StrategyHead,
    pattern_head: Linear,
    memory_fusion: MultiHeadAttention,
    decoder: Decoder,
}

pub struct ForwardOutput {
    pub total: Tensor,
    pub generation: Tensor,
    pub strategy: Tensor,
    pub pattern: Tensor,
    /// Pooled pattern representations `r`, `(B, d)`.
    pub patterns: Tensor,
    /// Strategy scores, `(B, G)`.
    pub scores: Tensor,
    /// Fused memory feature `m`, `(B, d)`.
    pub fused: Tensor,
    pub logits: Tensor,
    pub selected: Vec<usize>,
}

impl ForwardOutput {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            generation: scalar(&self.generation)?,
            strategy: scalar(&self.strategy)?,
            pattern: scalar(&self.pattern)?,
            total: scalar(&self.total)?,
        })
    }

    pub fn predicted(&self) -> Result<Vec<usize>> {
        predictions(&self.scores)
    }
}

fn predictions(scores: &Tensor) -> Result<Vec<usize>> {
    Ok(scores
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()?
        .iter()
        .map(|row| argmax(row))
        .collect())
}

/// Encoder-side state ready for decoding: `E = [m; H]` and its mask.
#[derive(Debug, Clone)]
pub struct PreparedContext {
    pub encoder_states: Tensor,
    pub encoder_mask: Tensor,
    pub predicted: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
    pub fused: Tensor,
}

impl PreparedContext {
    /// Repeats sample `index` `n` times along the batch axis.
    pub fn repeat(&self, index: usize, n: usize) -> Result<PreparedContext> {
        let idx = Tensor::from_vec(vec![index as u32; n], n, self.encoder_states.device())?;
        Ok(PreparedContext {
            encoder_states: self.encoder_states.index_select(&idx, 0)?,
            encoder_mask: self.encoder_mask.index_select(&idx, 0)?,
            predicted: vec![self.predicted[index]; n],
            scores: vec![self.scores[index].clone(); n],
            fused: self.fused.index_select(&idx, 0)?,
        })
    }
}

/// Cross-attention from `h` (queries) to memory rows (keys/values), max-pooled over the
/// unmasked query positions. Samples with no memory rows get the zero vector.
/// Returns `m (B, d)` and the per-sample availability flag `(B, 1)`.
pub fn fuse_memory(
    attention: &MultiHeadAttention,
    h: &Tensor,
    h_mask: &Tensor,
    memory: &Tensor,
    memory_mask: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (b, _, d) = h.dims3()?;
    let (mb, n, md) = memory.dims3()?;
    if md != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: md,
        });
    }
    if mb != b {
        return Err(Error::LengthMismatch { left: b, right: mb });
    }
    if n == 0 {
        let zeros = Tensor::zeros((b, d), h.dtype(), h.device())?;
        return Ok((zeros, Tensor::zeros((b, 1), h.dtype(), h.device())?));
    }
    let attended = attention.forward(h, memory, Some(&additive_key_mask(memory_mask)?), false)?;
    let pooled = masked_max_pool(&attended, h_mask)?;
    let available = memory_mask.max_keepdim(1)?;
    Ok((pooled.broadcast_mul(&available)?, available))
}

impl StrategyMemoryModel {
    pub fn new(config: ModelConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(device.clone(), config.precision.dtype());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
            std: config.init_std,
        };
        let d = config.d_model;
        let g = config.strategies;
        let shared = init.embedding("shared", config.vocab_size, d)?;
        let final_logits_bias = init
            .store
            .constant("final_logits_bias".into(), &[1, config.vocab_size], 0.0)?;
        let context_encoder = Encoder::build(&mut init, "context_encoder", &config, config.encoder_layers)?;
        let strategy_encoder = Encoder::build(&mut init, "strategy_encoder", &config, config.encoder_layers)?;
        let pattern_encoder = if config.share_pattern_encoder {
            None
        } else {
            Some(Encoder::build(&mut init, "pattern_encoder", &config, config.encoder_layers)?)
        };
        let strategy_head = StrategyHead {
            dense: init.linear("strategy_head.dense", d, d)?,
            out_proj: init.linear("strategy_head.out_proj", d, g)?,
        };
        let pattern_head = init.linear("pattern_head", d, g)?;
        let memory_fusion = init.attention("memory_fusion", d, config.fusion_head_count())?;
        let decoder = Decoder::build(&mut init, "decoder", &config)?;
        Ok(StrategyMemoryModel {
            config,
            params,
            shared,
            final_logits_bias,
            context_encoder,
            strategy_encoder,
            pattern_encoder,
            strategy_head,
            pattern_head,
            memory_fusion,
            decoder,
        })
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Names of the parameters owned by the strategy predictor (encoder and head).
    pub fn strategy_parameter_names(&self) -> Vec<String> {
        self.params
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| n.starts_with("strategy_encoder.") || n.starts_with("strategy_head."))
            .collect()
    }

    fn check_len(&self, ids: &Tensor) -> Result<()> {
        let t = ids.dim(1)?;
        if t == 0 {
            return Err(Error::InvalidArgument("empty encoder input".into()));
        }
        if t > self.config.max_positions {
            return Err(Error::InvalidArgument(format!(
                "input of {t} tokens exceeds the {} position limit",
                self.config.max_positions
            )));
        }
        Ok(())
    }

    /// `H = Enc_c([t; I; C])`, `(B, L, d)`.
    pub fn encode_context(&self, ids: &Tensor, mask: &Tensor, drop: &mut Dropout) -> Result<Tensor> {
        self.check_len(ids)?;
        self.context_encoder.forward(&self.shared, ids, mask, drop)
    }

    /// `r = MaxPool(Enc_r(R))`, `(B, d)`.
    pub fn extract_pattern(&self, ids: &Tensor, mask: &Tensor, drop: &mut Dropout) -> Result<Tensor> {
        self.check_len(ids)?;
        let enc = self.pattern_encoder.as_ref().unwrap_or(&self.context_encoder);
        let hidden = enc.forward(&self.shared, ids, mask, drop)?;
        masked_max_pool(&hidden, mask)
    }

    pub fn pattern_scores(&self, r: &Tensor) -> Result<Tensor> {
        self.pattern_head.forward(r)
    }

    /// `s = MaxPool(Enc_s(I))` and the class scores `MLP(s)`.
    pub fn predict_strategy(&self, ids: &Tensor, mask: &Tensor, drop: &mut Dropout) -> Result<(Tensor, Tensor)> {
        self.check_len(ids)?;
        let hidden = self.strategy_encoder.forward(&self.shared, ids, mask, drop)?;
        let s = masked_max_pool(&hidden, mask)?;
        let scores = self.strategy_head.forward(&s)?;
        Ok((s, scores))
    }

    pub fn fusion_attention(&self) -> &MultiHeadAttention {
        &self.memory_fusion
    }

    fn empty_memory(&self, b: usize) -> Result<(Tensor, Tensor)> {
        let d = self.config.d_model;
        Ok((
            Tensor::zeros((b, 0, d), self.dtype(), self.device())?,
            Tensor::zeros((b, 0), self.dtype(), self.device())?,
        ))
    }

    fn gather_memory(
        &self,
        bank: Option<&MemoryBank>,
        selection: MemorySelection,
        strategies: &[usize],
    ) -> Result<(Tensor, Tensor)> {
        match (bank, selection) {
            (Some(bank), MemorySelection::Gold | MemorySelection::Predicted) => {
                if bank.dim() != self.config.d_model {
                    return Err(Error::DimensionMismatch {
                        expected: self.config.d_model,
                        actual: bank.dim(),
                    });
                }
                memory_tensor(bank, strategies, self.dtype(), self.device())
            }
            _ => self.empty_memory(strategies.len()),
        }
    }

    /// Decoder logits `(B, T, V)` over `E` for teacher-forced `ids`.
    pub fn decode_logits(
        &self,
        encoder_states: &Tensor,
        encoder_mask: &Tensor,
        ids: &Tensor,
        mask: &Tensor,
        drop: &mut Dropout,
    ) -> Result<Tensor> {
        let hidden = self
            .decoder
            .forward(&self.shared, ids, mask, encoder_states, encoder_mask, drop)?;
        Ok(hidden
            .broadcast_matmul(&self.shared.t()?)?
            .broadcast_add(&self.final_logits_bias)?)
    }

    fn join_memory(h: &Tensor, h_mask: &Tensor, m: &Tensor, available: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((
            Tensor::cat(&[&m.unsqueeze(1)?, h], 1)?,
            Tensor::cat(&[available, h_mask], 1)?,
        ))
    }

    /// Full training-time pass: all three losses and their weighted total.
    pub fn forward(
        &self,
        batch: &Batch,
        bank: Option<&MemoryBank>,
        selection: MemorySelection,
        lambda_strategy: f64,
        lambda_pattern: f64,
        drop: &mut Dropout,
    ) -> Result<ForwardOutput> {
        let inputs = &batch.inputs;
        let h = self.encode_context(&inputs.context_ids, &inputs.context_mask, drop)?;
        let (_, scores) = self.predict_strategy(&inputs.strategy_ids, &inputs.strategy_mask, drop)?;
        let strategy = cross_entropy(&scores, &batch.gold)?;
        let patterns = self.extract_pattern(&batch.response_ids, &batch.response_mask, drop)?;
        let pattern = cross_entropy(&self.pattern_scores(&patterns)?, &batch.gold)?;

        let selected = match selection {
            MemorySelection::Gold => batch.gold_strategies.clone(),
            _ => predictions(&scores)?,
        };
        let (memory, memory_mask) = self.gather_memory(bank, selection, &selected)?;
        let (fused, available) = fuse_memory(&self.memory_fusion, &h, &inputs.context_mask, &memory, &memory_mask)?;
        let (e, e_mask) = Self::join_memory(&h, &inputs.context_mask, &fused, &available)?;
        let logits = self.decode_logits(&e, &e_mask, &batch.decoder_input, &batch.decoder_mask, drop)?;
        let generation = masked_token_nll(&logits, &batch.decoder_target, &batch.decoder_mask)?;
        let total = ((&generation + (&strategy * lambda_strategy)?)? + (&pattern * lambda_pattern)?)?;
        Ok(ForwardOutput {
            total,
            generation,
            strategy,
            pattern,
            patterns,
            scores,
            fused,
            logits,
            selected,
        })
    }

    /// Encoder side for inference: predict `ĝ`, read `M^ĝ`, fuse, and build `E`.
    pub fn prepare(
        &self,
        inputs: &EncoderInputs,
        bank: Option<&MemoryBank>,
        selection: MemorySelection,
    ) -> Result<PreparedContext> {
        let mut off = Dropout::off();
        let h = self.encode_context(&inputs.context_ids, &inputs.context_mask, &mut off)?;
        let (_, scores) = self.predict_strategy(&inputs.strategy_ids, &inputs.strategy_mask, &mut off)?;
        let predicted = predictions(&scores)?;
        let (memory, memory_mask) = self.gather_memory(bank, selection, &predicted)?;
        let (fused, available) = fuse_memory(&self.memory_fusion, &h, &inputs.context_mask, &memory, &memory_mask)?;
        let (encoder_states, encoder_mask) = Self::join_memory(&h, &inputs.context_mask, &fused, &available)?;
        Ok(PreparedContext {
            encoder_states,
            encoder_mask,
            predicted,
            scores: scores.to_dtype(DType::F64)?.to_vec2::<f64>()?,
            fused,
        })
    }

    /// Next-token probabilities after each prefix; prefixes must share one length.
    pub fn next_token_distribution(&self, ctx: &PreparedContext, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let logits = self.last_logits(ctx, prefixes)?;
        let probs = candle_nn::ops::softmax(&logits, candle_core::D::Minus1)?;
        Ok(probs.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    pub(crate) fn last_logits(&self, ctx: &PreparedContext, prefixes: &[Vec<u32>]) -> Result<Tensor> {
        let b = prefixes.len();
        let t = prefixes.first().map_or(0, Vec::len);
        if t == 0 || prefixes.iter().any(|p| p.len() != t) {
            return Err(Error::InvalidArgument("prefixes must be non-empty and equal length".into()));
        }
        let flat: Vec<u32> = prefixes.iter().flatten().copied().collect();
        let ids = Tensor::from_vec(flat, (b, t), self.device())?;
        let mask = Tensor::ones((b, t), self.dtype(), self.device())?;
        let logits = self.decode_logits(
            &ctx.encoder_states,
            &ctx.encoder_mask,
            &ids,
            &mask,
            &mut Dropout::off(),
        )?;
        Ok(logits.narrow(1, t - 1, 1)?.squeeze(1)?)
    }
}
