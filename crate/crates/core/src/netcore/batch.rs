use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::EncodedSample;
use crate::membank::MemoryBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
}

/// Encoder-side tensors; all that inference needs.
#[derive(Debug, Clone)]
pub struct EncoderInputs {
    pub context_ids: Tensor,
    pub context_mask: Tensor,
    pub strategy_ids: Tensor,
    pub strategy_mask: Tensor,
    pub size: usize,
}

impl EncoderInputs {
    pub fn collate(
        samples: &[&EncodedSample],
        specials: SpecialIds,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if samples.iter().any(|s| s.context_ids.is_empty()) {
            return Err(Error::InvalidArgument("empty encoder input".into()));
        }
        let ctx: Vec<Vec<u32>> = samples.iter().map(|s| s.context_ids.clone()).collect();
        let strat: Vec<Vec<u32>> = samples.iter().map(|s| s.strategy_ids.clone()).collect();
        let (context_ids, context_mask) = pad_rows(&ctx, specials.pad, dtype, device)?;
        let (strategy_ids, strategy_mask) = pad_rows(&strat, specials.pad, dtype, device)?;
        Ok(EncoderInputs {
            context_ids,
            context_mask,
            strategy_ids,
            strategy_mask,
            size: samples.len(),
        })
    }
}

/// Padded tensors for a group of samples. Masks are 1 for real tokens, 0 for padding.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: EncoderInputs,
    pub response_ids: Tensor,
    pub response_mask: Tensor,
    /// `[bos] + R`
    pub decoder_input: Tensor,
    /// `R + [eos]`
    pub decoder_target: Tensor,
    pub decoder_mask: Tensor,
    pub gold: Tensor,
    pub gold_strategies: Vec<usize>,
    pub size: usize,
}

fn pad_rows(rows: &[Vec<u32>], pad: u32, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let b = rows.len();
    let t = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut ids = vec![pad; b * t];
    let mut mask = vec![0f64; b * t];
    for (i, r) in rows.iter().enumerate() {
        ids[i * t..i * t + r.len()].copy_from_slice(r);
        mask[i * t..i * t + r.len()].iter_mut().for_each(|m| *m = 1.0);
    }
    Ok((
        Tensor::from_vec(ids, (b, t), device)?,
        Tensor::from_vec(mask, (b, t), device)?.to_dtype(dtype)?,
    ))
}

impl Batch {
    pub fn collate(
        samples: &[&EncodedSample],
        specials: SpecialIds,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let inputs = EncoderInputs::collate(samples, specials, dtype, device)?;
        if samples.iter().any(|s| s.response_ids.is_empty()) {
            return Err(Error::InvalidArgument("empty response".into()));
        }
        let pad = specials.pad;
        let resp: Vec<Vec<u32>> = samples.iter().map(|s| s.response_ids.clone()).collect();
        let dec_in: Vec<Vec<u32>> = samples
            .iter()
            .map(|s| std::iter::once(specials.bos).chain(s.response_ids.iter().copied()).collect())
            .collect();
        let dec_out: Vec<Vec<u32>> = samples
            .iter()
            .map(|s| s.response_ids.iter().copied().chain(std::iter::once(specials.eos)).collect())
            .collect();
        let (response_ids, response_mask) = pad_rows(&resp, pad, dtype, device)?;
        let (decoder_input, decoder_mask) = pad_rows(&dec_in, pad, dtype, device)?;
        let (decoder_target, _) = pad_rows(&dec_out, pad, dtype, device)?;
        let gold_strategies: Vec<usize> = samples.iter().map(|s| s.strategy).collect();
        let gold = Tensor::from_vec(
            gold_strategies.iter().map(|&g| g as u32).collect::<Vec<_>>(),
            samples.len(),
            device,
        )?;
        Ok(Batch {
            inputs,
            response_ids,
            response_mask,
            decoder_input,
            decoder_target,
            decoder_mask,
            gold,
            gold_strategies,
            size: samples.len(),
        })
    }
}

/// Stacks `M^{g_b}` for each sample into `(B, N, d)` with a `(B, N)` row mask,
/// where `N` is the largest selected row count (possibly 0).
pub fn memory_tensor(
    bank: &MemoryBank,
    strategies: &[usize],
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    let d = bank.dim();
    let mats = strategies
        .iter()
        .map(|&g| bank.read(g))
        .collect::<Result<Vec<_>>>()?;
    let n = mats.iter().map(|m| m.rows).max().unwrap_or(0);
    let b = strategies.len();
    let mut data = vec![0f32; b * n * d];
    let mut mask = vec![0f32; b * n];
    for (i, m) in mats.iter().enumerate() {
        data[i * n * d..i * n * d + m.data.len()].copy_from_slice(&m.data);
        mask[i * n..i * n + m.rows].iter_mut().for_each(|x| *x = 1.0);
    }
    Ok((
        Tensor::from_vec(data, (b, n, d), device)?.to_dtype(dtype)?,
        Tensor::from_vec(mask, (b, n), device)?.to_dtype(dtype)?,
    ))
}
