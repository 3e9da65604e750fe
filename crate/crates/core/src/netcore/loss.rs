use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean softmax cross-entropy: `logits (N, C)`, `targets (N)` u32.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = logp.gather(&targets.unsqueeze(1)?, 1)?.squeeze(1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Token-level negative log-likelihood averaged over unmasked positions.
/// `logits (B, T, V)`, `targets (B, T)` u32, `mask (B, T)` 1/0.
pub fn masked_token_nll(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, t, v) = logits.dims3()?;
    let (tb, tt) = targets.dims2()?;
    if (b, t) != (tb, tt) {
        return Err(Error::LengthMismatch { left: t, right: tt });
    }
    let logp = candle_nn::ops::log_softmax(&logits.reshape((b * t, v))?, D::Minus1)?;
    let picked = logp
        .gather(&targets.reshape((b * t, 1))?, 1)?
        .reshape((b, t))?;
    let summed = (picked * mask)?.sum_all()?;
    Ok((summed.neg()? / mask.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)?)
}

/// Sum of per-token negative log-likelihoods and the token count, for perplexity.
pub fn token_nll_sum(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<(f64, f64)> {
    let (b, t, v) = logits.dims3()?;
    let logp = candle_nn::ops::log_softmax(&logits.reshape((b * t, v))?, D::Minus1)?;
    let picked = logp
        .gather(&targets.reshape((b * t, 1))?, 1)?
        .reshape((b, t))?;
    let nll = (picked * mask)?
        .sum_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?;
    let n = mask.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    Ok((-nll, n))
}

/// Generation loss for one response: mean of `-log p(r_l | r_<l, E)` over target tokens.
/// `logits (T, V)`, one target id per row.
pub fn generation_loss(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    let (t, _) = logits.dims2()?;
    if t != targets.len() {
        return Err(Error::LengthMismatch {
            left: t,
            right: targets.len(),
        });
    }
    let ids = Tensor::new(targets, logits.device())?;
    scalar(&cross_entropy(logits, &ids)?)
}

/// `-log p(g | r)` for a single row of class scores.
pub fn pattern_loss(scores: &Tensor, gold: usize) -> Result<f64> {
    let g = scores.dim(0)?;
    if gold >= g {
        return Err(Error::OutOfRange { index: gold, len: g });
    }
    let ids = Tensor::new(&[gold as u32], scores.device())?;
    scalar(&cross_entropy(&scores.unsqueeze(0)?, &ids)?)
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub generation: f64,
    pub strategy: f64,
    pub pattern: f64,
    pub total: f64,
}

/// `total = generation + lambda_strategy * strategy + lambda_pattern * pattern`.
pub fn total_loss(
    generation: f64,
    strategy: f64,
    pattern: f64,
    lambda_strategy: f64,
    lambda_pattern: f64,
) -> Result<LossBreakdown> {
    if lambda_strategy < 0.0 || lambda_pattern < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "loss weights must be non-negative, got {lambda_strategy} and {lambda_pattern}"
        )));
    }
    Ok(LossBreakdown {
        generation,
        strategy,
        pattern,
        total: generation + lambda_strategy * strategy + lambda_pattern * pattern,
    })
}

/// Index of the first maximum; NaN entries never win.
pub fn argmax<T: PartialOrd + Copy>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] || scores[best] != scores[best] {
            best = i;
        }
    }
    best
}
