//! Transformer building blocks. Parameter names follow the BART layout so pretrained
//! weights map one-to-one.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use crate::error::Result;

pub(crate) const MASK_NEG: f64 = -1.0e9;

/// Deterministic dropout; inactive when `p == 0` or outside training.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Dropout<'static> {
        Dropout { p: 0.0, rng: None }
    }

    pub fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x.clone());
        };
        if self.p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.p;
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub std: f64,
}

impl Init<'_> {
    pub fn linear(&mut self, name: &str, input: usize, output: usize) -> Result<Linear> {
        Ok(Linear {
            weight: self
                .store
                .normal(format!("{name}.weight"), &[output, input], self.std, self.rng)?,
            bias: self.store.constant(format!("{name}.bias"), &[output], 0.0)?,
        })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            weight: self.store.constant(format!("{name}.weight"), &[dim], 1.0)?,
            bias: self.store.constant(format!("{name}.bias"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn embedding(&mut self, name: &str, rows: usize, dim: usize) -> Result<Tensor> {
        self.store
            .normal(format!("{name}.weight"), &[rows, dim], self.std, self.rng)
    }

    pub fn attention(&mut self, name: &str, dim: usize, heads: usize) -> Result<MultiHeadAttention> {
        Ok(MultiHeadAttention {
            q_proj: self.linear(&format!("{name}.q_proj"), dim, dim)?,
            k_proj: self.linear(&format!("{name}.k_proj"), dim, dim)?,
            v_proj: self.linear(&format!("{name}.v_proj"), dim, dim)?,
            out_proj: self.linear(&format!("{name}.out_proj"), dim, dim)?,
            heads,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    pub fn identity(dim: usize, dtype: DType, device: &Device) -> Result<Linear> {
        Ok(Linear {
            weight: Tensor::eye(dim, dtype, device)?,
            bias: Tensor::zeros(dim, dtype, device)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// `(B, T)` 1/0 mask → `(B, 1, 1, T)` additive bias.
pub fn additive_key_mask(mask: &Tensor) -> Result<Tensor> {
    let (b, t) = mask.dims2()?;
    Ok(mask.affine(-MASK_NEG, MASK_NEG)?.reshape((b, 1, 1, t))?)
}

fn causal_bias(t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = (0..t * t)
        .map(|i| if i % t > i / t { MASK_NEG } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(v, (1, 1, t, t), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// Single-head attention whose four projections are the identity.
    pub fn identity(dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        Ok(MultiHeadAttention {
            q_proj: Linear::identity(dim, dtype, device)?,
            k_proj: Linear::identity(dim, dtype, device)?,
            v_proj: Linear::identity(dim, dtype, device)?,
            out_proj: Linear::identity(dim, dtype, device)?,
            heads: 1,
        })
    }

    /// `query: (B, Tq, d)`, `kv: (B, Tk, d)`, `key_bias: (B, 1, 1, Tk)` additive.
    pub fn forward(
        &self,
        query: &Tensor,
        kv: &Tensor,
        key_bias: Option<&Tensor>,
        causal: bool,
    ) -> Result<Tensor> {
        let (b, tq, d) = query.dims3()?;
        let tk = kv.dim(1)?;
        let hd = d / self.heads;
        let split = |x: Tensor, t: usize| -> Result<Tensor> {
            Ok(x.reshape((b, t, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q_proj.forward(query)?, tq)?;
        let k = split(self.k_proj.forward(kv)?, tk)?;
        let v = split(self.v_proj.forward(kv)?, tk)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        if let Some(bias) = key_bias {
            scores = scores.broadcast_add(bias)?;
        }
        if causal {
            scores = scores.broadcast_add(&causal_bias(tq, scores.dtype(), scores.device())?)?;
        }
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, d))?;
        self.out_proj.forward(&ctx)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn forward(&self, x: &Tensor, drop: &mut Dropout) -> Result<Tensor> {
        let h = self.fc1.forward(x)?.gelu_erf()?;
        let h = drop.apply(&h)?;
        self.fc2.forward(&h)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub self_attn_layer_norm: LayerNorm,
    pub ffn: FeedForward,
    pub final_layer_norm: LayerNorm,
}

impl EncoderLayer {
    pub fn forward(&self, x: &Tensor, bias: &Tensor, drop: &mut Dropout) -> Result<Tensor> {
        let h = self.self_attn.forward(x, x, Some(bias), false)?;
        let x = self.self_attn_layer_norm.forward(&(x + drop.apply(&h)?)?)?;
        let h = self.ffn.forward(&x, drop)?;
        self.final_layer_norm.forward(&(x + drop.apply(&h)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub self_attn_layer_norm: LayerNorm,
    pub encoder_attn: MultiHeadAttention,
    pub encoder_attn_layer_norm: LayerNorm,
    pub ffn: FeedForward,
    pub final_layer_norm: LayerNorm,
}

impl DecoderLayer {
    pub fn forward(
        &self,
        x: &Tensor,
        self_bias: &Tensor,
        memory: &Tensor,
        memory_bias: &Tensor,
        drop: &mut Dropout,
    ) -> Result<Tensor> {
        let h = self.self_attn.forward(x, x, Some(self_bias), true)?;
        let x = self.self_attn_layer_norm.forward(&(x + drop.apply(&h)?)?)?;
        let h = self.encoder_attn.forward(&x, memory, Some(memory_bias), false)?;
        let x = self.encoder_attn_layer_norm.forward(&(x + drop.apply(&h)?)?)?;
        let h = self.ffn.forward(&x, drop)?;
        self.final_layer_norm.forward(&(x + drop.apply(&h)?)?)
    }
}

/// Learned positions are stored with BART's offset of two rows.
pub const POSITION_OFFSET: usize = 2;

fn embed(
    shared: &Tensor,
    positions: &Tensor,
    layernorm: &LayerNorm,
    ids: &Tensor,
    drop: &mut Dropout,
) -> Result<Tensor> {
    let (b, t) = ids.dims2()?;
    let d = shared.dim(1)?;
    let tok = shared
        .index_select(&ids.flatten_all()?, 0)?
        .reshape((b, t, d))?;
    let pos_ids = Tensor::arange(POSITION_OFFSET as u32, (t + POSITION_OFFSET) as u32, ids.device())?;
    let pos = positions.index_select(&pos_ids, 0)?.unsqueeze(0)?;
    let x = layernorm.forward(&tok.broadcast_add(&pos)?)?;
    drop.apply(&x)
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub embed_positions: Tensor,
    pub layernorm_embedding: LayerNorm,
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn build(init: &mut Init, prefix: &str, cfg: &super::ModelConfig, layers: usize) -> Result<Self> {
        let d = cfg.d_model;
        let embed_positions = init.embedding(
            &format!("{prefix}.embed_positions"),
            cfg.max_positions + POSITION_OFFSET,
            d,
        )?;
        let layernorm_embedding = init.layer_norm(&format!("{prefix}.layernorm_embedding"), d)?;
        let layers = (0..layers)
            .map(|i| {
                let p = format!("{prefix}.layers.{i}");
                Ok(EncoderLayer {
                    self_attn: init.attention(&format!("{p}.self_attn"), d, cfg.heads)?,
                    self_attn_layer_norm: init.layer_norm(&format!("{p}.self_attn_layer_norm"), d)?,
                    ffn: FeedForward {
                        fc1: init.linear(&format!("{p}.fc1"), d, cfg.ffn_dim)?,
                        fc2: init.linear(&format!("{p}.fc2"), cfg.ffn_dim, d)?,
                    },
                    final_layer_norm: init.layer_norm(&format!("{p}.final_layer_norm"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Encoder {
            embed_positions,
            layernorm_embedding,
            layers,
        })
    }

    /// `ids: (B, T)` u32, `mask: (B, T)` 1/0 → hidden states `(B, T, d)`.
    pub fn forward(&self, shared: &Tensor, ids: &Tensor, mask: &Tensor, drop: &mut Dropout) -> Result<Tensor> {
        let mut x = embed(shared, &self.embed_positions, &self.layernorm_embedding, ids, drop)?;
        let bias = additive_key_mask(mask)?;
        for layer in &self.layers {
            x = layer.forward(&x, &bias, drop)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub embed_positions: Tensor,
    pub layernorm_embedding: LayerNorm,
    pub layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn build(init: &mut Init, prefix: &str, cfg: &super::ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let embed_positions = init.embedding(
            &format!("{prefix}.embed_positions"),
            cfg.max_positions + POSITION_OFFSET,
            d,
        )?;
        let layernorm_embedding = init.layer_norm(&format!("{prefix}.layernorm_embedding"), d)?;
        let layers = (0..cfg.decoder_layers)
            .map(|i| {
                let p = format!("{prefix}.layers.{i}");
                Ok(DecoderLayer {
                    self_attn: init.attention(&format!("{p}.self_attn"), d, cfg.heads)?,
                    self_attn_layer_norm: init.layer_norm(&format!("{p}.self_attn_layer_norm"), d)?,
                    encoder_attn: init.attention(&format!("{p}.encoder_attn"), d, cfg.heads)?,
                    encoder_attn_layer_norm: init
                        .layer_norm(&format!("{p}.encoder_attn_layer_norm"), d)?,
                    ffn: FeedForward {
                        fc1: init.linear(&format!("{p}.fc1"), d, cfg.ffn_dim)?,
                        fc2: init.linear(&format!("{p}.fc2"), cfg.ffn_dim, d)?,
                    },
                    final_layer_norm: init.layer_norm(&format!("{p}.final_layer_norm"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Decoder {
            embed_positions,
            layernorm_embedding,
            layers,
        })
    }

    /// Returns decoder hidden states `(B, T, d)` for teacher-forced `ids`.
    pub fn forward(
        &self,
        shared: &Tensor,
        ids: &Tensor,
        mask: &Tensor,
        memory: &Tensor,
        memory_mask: &Tensor,
        drop: &mut Dropout,
    ) -> Result<Tensor> {
        let mut x = embed(shared, &self.embed_positions, &self.layernorm_embedding, ids, drop)?;
        let self_bias = additive_key_mask(mask)?;
        let mem_bias = additive_key_mask(memory_mask)?;
        for layer in &self.layers {
            x = layer.forward(&x, &self_bias, memory, &mem_bias, drop)?;
        }
        Ok(x)
    }
}

/// Max over the sequence axis ignoring masked positions: `(B, T, d)`, `(B, T)` → `(B, d)`.
pub fn masked_max_pool(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let bias = mask.affine(-MASK_NEG, MASK_NEG)?.unsqueeze(2)?;
    Ok(x.broadcast_add(&bias)?.max(1)?)
}
