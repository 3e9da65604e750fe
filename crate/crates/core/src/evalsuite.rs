//! Automatic metrics over decoded outputs: perplexity, corpus BLEU-1..4,
//! ROUGE-L, METEOR and CIDEr.
//!
//! Every text metric uses [`word_tokens`]: lowercase, with punctuation split
//! into separate tokens, identically on both sides.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::word_tokens;

pub const ROUGE_BETA: f64 = 1.2;
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;
pub const CIDER_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
    pub samples: usize,
    pub bleu_level: String,
    pub tokenization: String,
}

/// `exp(total_nll / tokens)`.
pub fn perplexity_from_nll(total_nll: f64, tokens: f64) -> Result<f64> {
    if tokens <= 0.0 {
        return Err(Error::InvalidArgument("perplexity over zero tokens".into()));
    }
    Ok((total_nll / tokens).exp())
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_default() += 1;
        }
    }
    out
}

/// Cumulative corpus BLEU-1..4 with uniform weights, brevity penalty and no smoothing.
pub fn corpus_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> [f64; 4] {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hc = ngrams(h, n);
            let rc = ngrams(rf, n);
            for (g, k) in &hc {
                matched[n - 1] += (*k).min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if c == 0 {
        return [0.0; 4];
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    let mut out = [0.0; 4];
    let mut log_sum = 0.0;
    for n in 1..=4 {
        if matched[n - 1] == 0 {
            // every cumulative score from this order on is zero
            break;
        }
        log_sum += (matched[n - 1] as f64 / total[n - 1] as f64).ln();
        out[n - 1] = bp * (log_sum / n as f64).exp();
    }
    out
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-L F-measure for one pair, `beta = 1.2`.
pub fn rouge_l(hyp: &[String], reference: &[String]) -> f64 {
    let l = lcs(hyp, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / hyp.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Exact-match alignment: hypothesis words scanned right to left, each taking
/// the rightmost unused identical reference word. Returns (hyp, ref) index pairs
/// sorted by hypothesis position.
fn align_exact(hyp: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (i, w) in hyp.iter().enumerate().rev() {
        if let Some(j) = (0..reference.len()).rev().find(|&j| !used[j] && &reference[j] == w) {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

fn chunks(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// METEOR for one pair using exact matches only.
pub fn meteor(hyp: &[String], reference: &[String]) -> f64 {
    let pairs = align_exact(hyp, reference);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let frag = chunks(&pairs) as f64 / m as f64;
    let penalty = METEOR_GAMMA * frag.powf(METEOR_BETA);
    (1.0 - penalty) * fmean
}

type NgramVec = Vec<HashMap<Vec<String>, f64>>;

fn tfidf(tokens: &[String], df: &HashMap<Vec<String>, usize>, log_n: f64) -> (NgramVec, Vec<f64>) {
    let mut vecs = Vec::with_capacity(4);
    let mut norms = Vec::with_capacity(4);
    for n in 1..=4 {
        let v: HashMap<Vec<String>, f64> = ngrams(tokens, n)
            .into_iter()
            .map(|(g, tf)| {
                let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
                (g.to_vec(), tf as f64 * (log_n - d.ln()))
            })
            .collect();
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    (vecs, norms)
}

/// CIDEr (original, not CIDEr-D): per-pair mean over n = 1..4 of tf-idf cosine
/// similarity, idf from reference document frequencies, scaled by 10 and
/// averaged over the corpus.
pub fn cider(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let n_docs = refs.len();
    if n_docs == 0 {
        return 0.0;
    }
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for r in refs {
        let mut seen: HashSet<&[String]> = HashSet::new();
        for n in 1..=4 {
            seen.extend(ngrams(r, n).into_keys());
        }
        for g in seen {
            *df.entry(g.to_vec()).or_default() += 1;
        }
    }
    let log_n = (n_docs as f64).ln();
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| {
            let (vh, nh) = tfidf(h, &df, log_n);
            let (vr, nr) = tfidf(r, &df, log_n);
            let sims: f64 = (0..4)
                .map(|n| {
                    if nh[n] == 0.0 || nr[n] == 0.0 {
                        return 0.0;
                    }
                    let dot: f64 = vh[n]
                        .iter()
                        .map(|(g, x)| x * vr[n].get(g).copied().unwrap_or(0.0))
                        .sum();
                    dot / (nh[n] * nr[n])
                })
                .sum();
            sims / 4.0 * CIDER_SCALE
        })
        .sum();
    total / n_docs as f64
}

/// All text metrics; BLEU, ROUGE-L and METEOR on the 0-100 scale.
pub fn corpus_metrics(hypotheses: &[String], references: &[String]) -> Result<MetricsReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            left: hypotheses.len(),
            right: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::InvalidArgument("no hypothesis/reference pairs".into()));
    }
    let h: Vec<Vec<String>> = hypotheses.iter().map(|s| word_tokens(s)).collect();
    let r: Vec<Vec<String>> = references.iter().map(|s| word_tokens(s)).collect();
    let n = h.len() as f64;
    let bleu = corpus_bleu(&h, &r);
    let rl = h.iter().zip(&r).map(|(a, b)| rouge_l(a, b)).sum::<f64>() / n;
    let mt = h.iter().zip(&r).map(|(a, b)| meteor(a, b)).sum::<f64>() / n;
    Ok(MetricsReport {
        ppl: None,
        b1: 100.0 * bleu[0],
        b2: 100.0 * bleu[1],
        b3: 100.0 * bleu[2],
        b4: 100.0 * bleu[3],
        rouge_l: 100.0 * rl,
        meteor: 100.0 * mt,
        cider: cider(&h, &r),
        samples: h.len(),
        bleu_level: "corpus".into(),
        tokenization: "lowercase, punctuation split".into(),
    })
}

/// One decoded test sample as written by the decode command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedSample {
    pub conv_id: usize,
    pub turn: usize,
    pub reference: String,
    pub hypothesis: String,
    pub gold_strategy: String,
    pub predicted_strategy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedOutput {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
    pub samples: Vec<DecodedSample>,
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Metrics for two newline-aligned files.
pub fn evaluate_files(hypotheses: &Path, references: &Path) -> Result<MetricsReport> {
    corpus_metrics(&read_lines(hypotheses)?, &read_lines(references)?)
}

pub fn evaluate_decoded(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let out: DecodedOutput = serde_json::from_str(&text)?;
    let hyps: Vec<String> = out.samples.iter().map(|s| s.hypothesis.clone()).collect();
    let refs: Vec<String> = out.samples.iter().map(|s| s.reference.clone()).collect();
    let mut report = corpus_metrics(&hyps, &refs)?;
    report.ppl = out.ppl;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        word_tokens(s)
    }

    #[test]
    fn identical_corpus_scores_full_marks() {
        let refs: Vec<String> = vec!["i am sorry to hear that .".into(), "have you talked to a friend about it ?".into()];
        let r = corpus_metrics(&refs, &refs).unwrap();
        for b in [r.b1, r.b2, r.b3, r.b4, r.rouge_l] {
            assert!((b - 100.0).abs() < 1e-9, "{b}");
        }
    }

    #[test]
    fn meteor_single_chunk_penalty() {
        let s = toks("i feel very sad");
        assert!((100.0 * meteor(&s, &s) - 100.0 * (1.0 - 0.5 / 64.0)).abs() < 1e-9);
    }

    #[test]
    fn meteor_counts_chunks() {
        // hyp "b a", ref "a b": two matches, two chunks
        let m = meteor(&toks("b a"), &toks("a b"));
        assert!((m - (1.0 - 0.5 * 1.0)).abs() < 1e-12);
        assert_eq!(meteor(&toks("x"), &toks("y")), 0.0);
    }

    #[test]
    fn bleu_zero_without_higher_order_matches() {
        let b = corpus_bleu(&[toks("a b")], &[toks("b a")]);
        assert!((b[0] - 1.0).abs() < 1e-12);
        assert_eq!(b[1], 0.0);
        assert_eq!(b[3], 0.0);
    }

    #[test]
    fn brevity_penalty_applies() {
        let b = corpus_bleu(&[toks("a b")], &[toks("a b c d")]);
        assert!((b[0] - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_l_hand_value() {
        // lcs("a b c d", "a c e") = 2, p = 0.5, r = 2/3
        let (p, r) = (0.5f64, 2.0f64 / 3.0);
        let expected = (1.0 + 1.44) * p * r / (r + 1.44 * p);
        assert!((rouge_l(&toks("a b c d"), &toks("a c e")) - expected).abs() < 1e-12);
    }

    #[test]
    fn perplexity_cases() {
        assert!((perplexity_from_nll(10.0 * 50f64.ln(), 10.0).unwrap() - 50.0).abs() < 1e-9);
        assert_eq!(perplexity_from_nll(0.0, 3.0).unwrap(), 1.0);
        assert!(perplexity_from_nll(1.0, 0.0).is_err());
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(corpus_metrics(&["a".into()], &[]).is_err());
    }

    proptest! {
        #[test]
        fn metrics_are_order_invariant(pairs in proptest::collection::vec(("[a-e]( [a-e]){0,6}", "[a-e]( [a-e]){0,6}"), 1..8), rot in 0usize..8) {
            let (h, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
            let k = rot % h.len();
            let mut h2 = h.clone();
            let mut r2 = r.clone();
            h2.rotate_left(k);
            r2.rotate_left(k);
            let a = corpus_metrics(&h, &r).unwrap();
            let b = corpus_metrics(&h2, &r2).unwrap();
            for (x, y) in [(a.b1, b.b1), (a.b2, b.b2), (a.b4, b.b4), (a.rouge_l, b.rouge_l), (a.meteor, b.meteor), (a.cider, b.cider)] {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn bleu_orders_non_increasing_on_identical(s in "[a-e]( [a-e]){3,8}") {
            let b = corpus_bleu(&[toks(&s)], &[toks(&s)]);
            prop_assert!(b[0] >= b[1] && b[1] >= b[2] && b[2] >= b[3]);
        }
    }
}
