#![allow(dead_code)]

use std::path::PathBuf;

use candle_core::Device;
use supportmem::concepts::{ConceptConfig, ConceptGraph, ConceptReasoner};
use supportmem::corpus::{build_all_samples, load_corpus, Conversation, EscSample, LoadOptions, StrategyTaxonomy};
use supportmem::emotion::LexiconDetector;
use supportmem::features::{ContextAssembler, ContextPipeline, EncodedSample, FeatureConfig};
use supportmem::netcore::{ModelConfig, StrategyMemoryModel};
use supportmem::tokenizer::{TextTokenizer, WordVocab};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn conversations() -> Vec<Conversation> {
    let report = load_corpus(fixture("esconv_fixture.json"), &StrategyTaxonomy::esconv(), &LoadOptions::default()).unwrap();
    assert!(report.errors.is_empty(), "{:?}", report.errors);
    report.conversations
}

pub fn samples() -> Vec<EscSample> {
    build_all_samples(&conversations())
}

pub fn graph() -> ConceptGraph {
    ConceptGraph::ingest_file(fixture("conceptnet_fixture.csv"), "en").unwrap().0
}

pub fn all_texts(convs: &[Conversation]) -> Vec<String> {
    convs
        .iter()
        .flat_map(|c| std::iter::once(c.situation.clone()).chain(c.utterances.iter().map(|u| u.text.clone())))
        .collect()
}

pub fn vocab(convs: &[Conversation]) -> WordVocab {
    let texts = all_texts(convs);
    WordVocab::build(texts.iter().map(String::as_str), 1)
}

pub fn reasoner(convs: &[Conversation], top_k: usize) -> ConceptReasoner {
    let texts = all_texts(convs);
    let cfg = ConceptConfig {
        top_k,
        ..ConceptConfig::default()
    };
    ConceptReasoner::new(graph(), cfg, texts.iter().map(String::as_str))
}

pub fn encode_all(
    samples: &[EscSample],
    tokenizer: &dyn TextTokenizer,
    reasoner: Option<&ConceptReasoner>,
    features: &FeatureConfig,
) -> Vec<EncodedSample> {
    let detector = LexiconDetector::default();
    let pipeline = ContextPipeline {
        detector: &detector,
        reasoner,
        assembler: ContextAssembler {
            tokenizer,
            config: features,
        },
    };
    samples.iter().map(|s| pipeline.encode_sample(s, None).unwrap()).collect()
}

/// Fixture samples encoded with the word vocabulary and the fixture graph.
pub struct TinyData {
    pub vocab: WordVocab,
    pub reasoner: ConceptReasoner,
    pub samples: Vec<EscSample>,
    pub encoded: Vec<EncodedSample>,
}

pub fn tiny_data(features: &FeatureConfig) -> TinyData {
    let convs = conversations();
    let vocab = vocab(&convs);
    let reasoner = reasoner(&convs, 3);
    let samples = build_all_samples(&convs);
    let encoded = encode_all(&samples, &vocab, Some(&reasoner), features);
    TinyData {
        vocab,
        reasoner,
        samples,
        encoded,
    }
}

pub fn small_config(vocab_size: usize, d_model: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        heads: 2,
        ffn_dim: 2 * d_model,
        encoder_layers: 1,
        decoder_layers: 1,
        ..ModelConfig::test_profile(vocab_size)
    }
}

pub fn model(cfg: ModelConfig) -> StrategyMemoryModel {
    StrategyMemoryModel::new(cfg, &Device::Cpu).unwrap()
}
