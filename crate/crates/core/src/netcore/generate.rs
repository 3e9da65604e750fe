use candle_core::{DType, D};
use serde::{Deserialize, Serialize};

use super::batch::SpecialIds;
use super::model::{PreparedContext, StrategyMemoryModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    #[default]
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
    /// Upper bound on generated tokens, end-of-sequence included.
    pub max_steps: usize,
    /// Minimum number of content tokens before end-of-sequence is allowed.
    pub min_tokens: usize,
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Beam,
            beam_size: 4,
            max_steps: 64,
            min_tokens: 1,
            length_penalty: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            beam_size: 1,
            ..Default::default()
        }
    }
}

fn log_probs(
    model: &StrategyMemoryModel,
    ctx: &PreparedContext,
    prefixes: &[Vec<u32>],
    specials: SpecialIds,
    allow_eos: bool,
) -> Result<Vec<Vec<f64>>> {
    let logits = model.last_logits(ctx, prefixes)?;
    let logp = candle_nn::ops::log_softmax(&logits, D::Minus1)?
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()?;
    Ok(logp
        .into_iter()
        .map(|mut row| {
            row[specials.pad as usize] = f64::NEG_INFINITY;
            row[specials.bos as usize] = f64::NEG_INFINITY;
            row[specials.unk as usize] = f64::NEG_INFINITY;
            if !allow_eos {
                row[specials.eos as usize] = f64::NEG_INFINITY;
            }
            row
        })
        .collect())
}

fn best_token(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

impl StrategyMemoryModel {
    /// Decodes every sample in `ctx`; returned sequences exclude bos/eos.
    pub fn generate(
        &self,
        ctx: &PreparedContext,
        cfg: &DecodeConfig,
        specials: SpecialIds,
    ) -> Result<Vec<Vec<u32>>> {
        if cfg.max_steps == 0 {
            return Err(Error::InvalidArgument("decode.max_steps must be positive".into()));
        }
        match cfg.mode {
            DecodeMode::Beam if cfg.beam_size > 1 => (0..ctx.predicted.len())
                .map(|i| self.beam_search(&ctx.repeat(i, 1)?, cfg, specials))
                .collect(),
            _ => self.greedy(ctx, cfg, specials),
        }
    }

    fn greedy(&self, ctx: &PreparedContext, cfg: &DecodeConfig, specials: SpecialIds) -> Result<Vec<Vec<u32>>> {
        let b = ctx.predicted.len();
        let mut seqs: Vec<Vec<u32>> = vec![vec![specials.bos]; b];
        let mut done = vec![false; b];
        for step in 0..cfg.max_steps {
            let allow_eos = step >= cfg.min_tokens;
            let rows = log_probs(self, ctx, &seqs, specials, allow_eos)?;
            for (i, row) in rows.iter().enumerate() {
                let next = if done[i] { specials.pad } else { best_token(row) };
                if next == specials.eos {
                    done[i] = true;
                }
                seqs[i].push(next);
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(seqs
            .into_iter()
            .map(|s| {
                s.into_iter()
                    .skip(1)
                    .take_while(|&t| t != specials.eos && t != specials.pad)
                    .collect()
            })
            .collect())
    }

    fn beam_search(&self, single: &PreparedContext, cfg: &DecodeConfig, specials: SpecialIds) -> Result<Vec<u32>> {
        let k = cfg.beam_size;
        let mut beams: Vec<(Vec<u32>, f64)> = vec![(vec![specials.bos], 0.0)];
        let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
        let norm = |len: usize, score: f64| score / (len.max(1) as f64).powf(cfg.length_penalty);
        for step in 0..cfg.max_steps {
            let ctx = single.repeat(0, beams.len())?;
            let prefixes: Vec<Vec<u32>> = beams.iter().map(|b| b.0.clone()).collect();
            let rows = log_probs(self, &ctx, &prefixes, specials, step >= cfg.min_tokens)?;
            let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
            for (bi, row) in rows.iter().enumerate() {
                let mut idx: Vec<usize> = (0..row.len()).filter(|&t| row[t].is_finite()).collect();
                idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                for &t in idx.iter().take(2 * k) {
                    candidates.push((bi, t as u32, beams[bi].1 + row[t]));
                }
            }
            candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
            let mut next = Vec::with_capacity(k);
            for (bi, tok, score) in candidates {
                let mut seq = beams[bi].0.clone();
                if tok == specials.eos {
                    let content = seq.len() - 1;
                    finished.push((seq, norm(content + 1, score)));
                } else {
                    seq.push(tok);
                    next.push((seq, score));
                }
                if next.len() == k {
                    break;
                }
            }
            beams = next;
            if beams.is_empty() {
                break;
            }
            if finished.len() >= k {
                let best_alive = beams
                    .iter()
                    .map(|(s, sc)| norm(s.len(), *sc))
                    .fold(f64::NEG_INFINITY, f64::max);
                let worst_done = finished
                    .iter()
                    .map(|f| f.1)
                    .fold(f64::NEG_INFINITY, f64::max);
                if worst_done >= best_alive {
                    break;
                }
            }
        }
        if finished.is_empty() {
            finished = beams
                .into_iter()
                .map(|(s, sc)| {
                    let n = s.len();
                    (s, norm(n, sc))
                })
                .collect();
        }
        let best = finished
            .into_iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|f| f.0)
            .unwrap_or_default();
        Ok(best.into_iter().skip(1).collect())
    }
}
