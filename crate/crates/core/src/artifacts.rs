//! On-disk layout of prepared data and loaders shared by the CLI and the gateway.

use std::path::{Path, PathBuf};

use crate::concepts::{ConceptGraph, ConceptReasoner, FrequencyTable};
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::tokenizer::{HfTokenizer, TextTokenizer, WordVocab};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedLayout {
    pub root: PathBuf,
}

impl PreparedLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        PreparedLayout { root: root.into() }
    }

    pub fn samples(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}.samples.jsonl"))
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }

    pub fn frequency(&self) -> PathBuf {
        self.root.join("concept_frequency.json")
    }

    pub fn emotions(&self) -> PathBuf {
        self.root.join("emotions.jsonl")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("prepare_report.json")
    }
}

/// BPE tokenizer from the pretrained directory when one is configured,
/// otherwise the prepared word vocabulary.
pub fn load_tokenizer(cfg: &SystemConfig, layout: &PreparedLayout) -> Result<Box<dyn TextTokenizer>> {
    match &cfg.model.pretrained {
        Some(dir) => Ok(Box::new(HfTokenizer::load(dir.join("tokenizer.json"))?)),
        None => Ok(Box::new(WordVocab::load(layout.vocab())?)),
    }
}

/// Reads a graph from a JSON cache or a raw assertions dump, by extension.
pub fn load_graph(path: &Path, lang: &str) -> Result<ConceptGraph> {
    if path.extension().is_some_and(|e| e == "json") {
        ConceptGraph::load_cache(path)
    } else {
        Ok(ConceptGraph::ingest_file(path, lang)?.0)
    }
}

pub fn load_frequency(path: &Path) -> Result<FrequencyTable> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn save_frequency(path: &Path, table: &FrequencyTable) -> Result<()> {
    std::fs::write(path, serde_json::to_vec(table)?).map_err(|e| Error::io(path, e))
}

/// `None` when no graph is configured; the concept list is then always empty.
pub fn load_reasoner(cfg: &SystemConfig, layout: &PreparedLayout) -> Result<Option<ConceptReasoner>> {
    let Some(graph_path) = &cfg.concepts.graph_path else {
        return Ok(None);
    };
    let graph = load_graph(graph_path, &cfg.concepts.lang)?;
    let freq = load_frequency(&layout.frequency())?;
    Ok(Some(ConceptReasoner::with_frequency(graph, cfg.concepts.clone(), freq)))
}
