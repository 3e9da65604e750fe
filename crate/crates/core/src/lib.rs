//! Knowledge-enhanced strategy memory model for emotional support conversation.
//!
//! Pipeline: corpus samples are annotated with per-utterance emotions and
//! commonsense concepts, encoded by a BART-style model that predicts a support
//! strategy, reads that strategy's memory of past response patterns, and decodes
//! a reply.

pub mod artifacts;
pub mod concepts;
pub mod config;
pub mod corpus;
pub mod emotion;
pub mod error;
pub mod evalsuite;
pub mod features;
pub mod gateway;
pub mod membank;
pub mod netcore;
pub mod text;
pub mod tokenizer;
pub mod trainer;

pub use concepts::{ConceptConfig, ConceptGraph, ConceptReasoner, ConceptSet, FrequencyTable};
pub use corpus::{Conversation, EscSample, Speaker, StrategyId, StrategyTaxonomy, Utterance};
pub use emotion::{EmotionDetector, EmotionLabel, InjectedContext};
pub use config::SystemConfig;
pub use error::{Error, Result};
pub use features::{ContextAssembler, ContextPipeline, EncodedSample, FeatureConfig};
pub use membank::MemoryBank;
pub use netcore::{DecodeConfig, LossBreakdown, ModelConfig, StrategyMemoryModel};
pub use tokenizer::{HfTokenizer, TextTokenizer, WordVocab};
