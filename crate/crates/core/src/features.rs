//! Encoder-input assembly shared by training and serving: `[bos] t [eos] I C [eos]`
//! for the context encoder and `[bos] I [eos]` for the strategy predictor.

use serde::{Deserialize, Serialize};

use crate::concepts::{ConceptReasoner, ConceptSet};
use crate::corpus::{EscSample, Utterance};
use crate::emotion::{build_injected_context, EmotionCache, EmotionDetector, EmotionLabel, InjectedContext, Piece};
use crate::error::{Error, Result};
use crate::tokenizer::TextTokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Encoder input limit L.
    pub max_input: usize,
    /// Target responses are cut to this many tokens before `[eos]`.
    pub max_response: usize,
    /// Set from the trainer's ablation flags.
    #[serde(skip)]
    pub no_emo: bool,
    #[serde(skip)]
    pub no_kg: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            max_input: 512,
            max_response: 128,
            no_emo: false,
            no_kg: false,
        }
    }
}

/// One sample after tokenization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedSample {
    pub conv_id: usize,
    pub turn: usize,
    pub context_ids: Vec<u32>,
    pub strategy_ids: Vec<u32>,
    pub response_ids: Vec<u32>,
    pub strategy: usize,
    pub concepts: Vec<String>,
    pub emotions: Vec<EmotionLabel>,
    pub response_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledContext {
    pub context_ids: Vec<u32>,
    pub strategy_ids: Vec<u32>,
    /// Injected context after truncation.
    pub injected: InjectedContext,
    /// Concepts that survived truncation.
    pub concepts: Vec<String>,
    pub dropped_utterances: usize,
}

fn segment_ids(tok: &dyn TextTokenizer, injected: &InjectedContext) -> Vec<Vec<u32>> {
    injected
        .spans
        .iter()
        .map(|s| {
            injected.pieces[s.start..s.end]
                .iter()
                .flat_map(|p| match p {
                    Piece::Utterance(t) => tok.encode_piece(t),
                    Piece::Emotion(l) => tok.encode_piece(l.name()),
                    Piece::Separator => vec![tok.separator()],
                })
                .collect()
        })
        .collect()
}

/// Drops whole segments from the front while over `budget`, then cuts the
/// head of the newest one. Returns the number of segments dropped.
fn fit_segments(segs: &mut Vec<Vec<u32>>, budget: usize) -> usize {
    let mut dropped = 0;
    while segs.len() > 1 && segs.iter().map(Vec::len).sum::<usize>() > budget {
        segs.remove(0);
        dropped += 1;
    }
    if let Some(last) = segs.first_mut() {
        if last.len() > budget {
            let cut = last.len() - budget;
            last.drain(..cut);
        }
    }
    dropped
}

pub struct ContextAssembler<'a> {
    pub tokenizer: &'a dyn TextTokenizer,
    pub config: &'a FeatureConfig,
}

impl ContextAssembler<'_> {
    /// Truncation order when over the limit: concept tail, then oldest utterance
    /// segments, then the head of the newest utterance, and the situation last.
    pub fn assemble(&self, situation: &str, injected: &InjectedContext, concepts: &[String]) -> Result<AssembledContext> {
        let l = self.config.max_input;
        if l < 4 {
            return Err(Error::Config("features.max_input must be at least 4".into()));
        }
        let sp = self.tokenizer.specials();
        let mut t_ids = self.tokenizer.encode_piece(situation);
        let mut segs = segment_ids(self.tokenizer, injected);
        let mut concept_ids: Vec<Vec<u32>> = concepts.iter().map(|c| self.tokenizer.encode_piece(c)).collect();
        let total = |t: &[u32], s: &[Vec<u32>], c: &[Vec<u32>]| {
            3 + t.len() + s.iter().map(Vec::len).sum::<usize>() + c.iter().map(Vec::len).sum::<usize>()
        };
        while total(&t_ids, &segs, &concept_ids) > l && !concept_ids.is_empty() {
            concept_ids.pop();
        }
        let mut dropped = 0;
        if total(&t_ids, &segs, &concept_ids) > l {
            let budget = l.saturating_sub(3 + t_ids.len()).max(1);
            dropped = fit_segments(&mut segs, budget);
        }
        if total(&t_ids, &segs, &concept_ids) > l {
            let keep = l - 3 - segs.iter().map(Vec::len).sum::<usize>().min(l - 3);
            t_ids.truncate(keep);
        }

        let mut context_ids = vec![sp.bos];
        context_ids.extend(&t_ids);
        context_ids.push(sp.eos);
        segs.iter().for_each(|s| context_ids.extend(s));
        concept_ids.iter().for_each(|c| context_ids.extend(c));
        context_ids.push(sp.eos);
        debug_assert!(context_ids.len() <= l);

        let mut strat_segs = segment_ids(self.tokenizer, injected);
        fit_segments(&mut strat_segs, l - 2);
        let mut strategy_ids = vec![sp.bos];
        strat_segs.iter().for_each(|s| strategy_ids.extend(s));
        strategy_ids.push(sp.eos);

        Ok(AssembledContext {
            context_ids,
            strategy_ids,
            injected: injected.keep_last(injected.spans.len() - dropped),
            concepts: concepts[..concept_ids.len()].to_vec(),
            dropped_utterances: dropped,
        })
    }

    pub fn encode_response(&self, response: &str) -> Result<Vec<u32>> {
        let mut ids = self.tokenizer.encode_piece(response);
        if ids.is_empty() {
            return Err(Error::InvalidArgument("response encodes to no tokens".into()));
        }
        ids.truncate(self.config.max_response);
        Ok(ids)
    }
}

/// Text the concept reasoner scans for anchors: the whole dialogue context.
pub fn concept_source(context: &[Utterance]) -> String {
    context.iter().map(|u| u.text.as_str()).collect::<Vec<_>>().join("\n")
}

/// Emotion annotation, concept reasoning and tokenization behind one call,
/// used identically by the trainer and the gateway.
pub struct ContextPipeline<'a> {
    pub detector: &'a dyn EmotionDetector,
    pub reasoner: Option<&'a ConceptReasoner>,
    pub assembler: ContextAssembler<'a>,
}

impl ContextPipeline<'_> {
    pub fn config(&self) -> &FeatureConfig {
        self.assembler.config
    }

    pub fn emotions(&self, conv_id: Option<usize>, context: &[Utterance], cache: Option<&EmotionCache>) -> Result<Vec<EmotionLabel>> {
        context
            .iter()
            .enumerate()
            .map(|(turn, u)| match (cache, conv_id) {
                (Some(c), Some(id)) => c.get_or_detect(id, turn, &u.text, self.detector),
                _ => self.detector.detect(&u.text),
            })
            .collect()
    }

    pub fn concepts(&self, context: &[Utterance]) -> ConceptSet {
        match (self.config().no_kg, self.reasoner) {
            (false, Some(r)) => r.reason(&concept_source(context)),
            _ => ConceptSet::default(),
        }
    }

    /// Builds encoder inputs from a situation, its context and (unless `no_emo`) labels.
    pub fn assemble(&self, situation: &str, context: &[Utterance], labels: &[EmotionLabel]) -> Result<(AssembledContext, ConceptSet)> {
        let injected = if self.config().no_emo {
            build_injected_context(context, None)?
        } else {
            build_injected_context(context, Some(labels))?
        };
        let concepts = self.concepts(context);
        let assembled = self.assembler.assemble(situation, &injected, &concepts.selected)?;
        Ok((assembled, concepts))
    }

    pub fn encode_sample(&self, sample: &EscSample, cache: Option<&EmotionCache>) -> Result<EncodedSample> {
        let labels = if self.config().no_emo {
            Vec::new()
        } else {
            self.emotions(Some(sample.conv_id), &sample.context, cache)?
        };
        let (assembled, _) = self.assemble(&sample.situation, &sample.context, &labels)?;
        Ok(EncodedSample {
            conv_id: sample.conv_id,
            turn: sample.turn,
            context_ids: assembled.context_ids,
            strategy_ids: assembled.strategy_ids,
            response_ids: self.assembler.encode_response(&sample.response)?,
            strategy: sample.strategy.0,
            concepts: assembled.concepts,
            emotions: labels,
            response_text: sample.response.clone(),
        })
    }
}
