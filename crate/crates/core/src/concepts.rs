//! ConceptNet ingestion and context-related concept selection.
//!
//! The pipeline: find graph concepts mentioned in the context (anchors), drop the
//! corpus-wide most frequent ones, walk one hop from each anchor, discard neighbours
//! reached through excluded relations, and keep the heaviest few per anchor.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{is_word, word_tokens};

pub const GRAPH_CACHE_FORMAT: &str = "supportmem-concept-graph";
pub const GRAPH_CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub start: u32,
    pub relation: u16,
    pub end: u32,
    pub weight: f32,
}

#[derive(Debug, Clone, Default)]
pub struct ConceptGraph {
    names: Vec<String>,
    ids: HashMap<String, u32>,
    relations: Vec<String>,
    relation_ids: HashMap<String, u16>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestStats {
    pub lines: usize,
    pub loaded: usize,
    pub skipped_unreadable: usize,
    pub skipped_language: usize,
}

#[derive(Serialize, Deserialize)]
struct GraphCache {
    format: String,
    version: u32,
    nodes: Vec<String>,
    relations: Vec<String>,
    edges: Vec<(u32, u16, u32, f32)>,
}

/// `/c/en/doctor/n/...` → (`en`, `doctor`).
fn parse_concept_uri(uri: &str) -> Option<(&str, String)> {
    let mut parts = uri.split('/');
    if parts.next()? != "" || parts.next()? != "c" {
        return None;
    }
    let lang = parts.next()?;
    let term = parts.next()?;
    if lang.is_empty() || term.is_empty() {
        return None;
    }
    Some((lang, term.replace('_', " ").to_lowercase()))
}

fn parse_relation_uri(uri: &str) -> Option<&str> {
    uri.strip_prefix("/r/").filter(|r| !r.is_empty())
}

impl ConceptGraph {
    fn intern_node(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        self.adjacency.push(Vec::new());
        id
    }

    fn intern_relation(&mut self, name: &str) -> u16 {
        if let Some(&id) = self.relation_ids.get(name) {
            return id;
        }
        let id = self.relations.len() as u16;
        self.relations.push(name.to_string());
        self.relation_ids.insert(name.to_string(), id);
        id
    }

    pub fn add_edge(&mut self, start: &str, relation: &str, end: &str, weight: f32) -> Result<()> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "edge weight must be positive, got {weight}"
            )));
        }
        let s = self.intern_node(start);
        let e = self.intern_node(end);
        let r = self.intern_relation(relation);
        let idx = self.edges.len() as u32;
        self.edges.push(Edge {
            start: s,
            relation: r,
            end: e,
            weight,
        });
        self.adjacency[s as usize].push(idx);
        if e != s {
            self.adjacency[e as usize].push(idx);
        }
        Ok(())
    }

    /// Parses a tab-separated assertions dump, keeping edges whose endpoints are both in `lang`.
    pub fn ingest<R: Read>(reader: R, lang: &str) -> Result<(Self, IngestStats)> {
        let mut graph = ConceptGraph::default();
        let mut stats = IngestStats::default();
        for line in BufReader::new(reader).lines() {
            stats.lines += 1;
            let Ok(line) = line else {
                stats.skipped_unreadable += 1;
                continue;
            };
            if line.trim().is_empty() {
                stats.lines -= 1;
                continue;
            }
            match Self::parse_line(&line) {
                None => stats.skipped_unreadable += 1,
                Some((sl, start, rel, el, end, weight)) => {
                    if sl != lang || el != lang {
                        stats.skipped_language += 1;
                        continue;
                    }
                    if graph.add_edge(&start, rel, &end, weight).is_err() {
                        stats.skipped_unreadable += 1;
                        continue;
                    }
                    stats.loaded += 1;
                }
            }
        }
        if graph.edges.is_empty() {
            return Err(Error::EmptyGraph {
                skipped: stats.skipped_unreadable + stats.skipped_language,
            });
        }
        Ok((graph, stats))
    }

    #[allow(clippy::type_complexity)]
    fn parse_line(line: &str) -> Option<(&str, String, &str, &str, String, f32)> {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return None;
        }
        // with or without the leading edge-URI column
        let (rel, start, end, meta) = if cols.len() >= 5 {
            (cols[1], cols[2], cols[3], Some(cols[4]))
        } else {
            (cols[0], cols[1], cols[2], Some(cols[3]))
        };
        let rel = parse_relation_uri(rel)?;
        let (sl, s) = parse_concept_uri(start)?;
        let (el, e) = parse_concept_uri(end)?;
        let weight = match meta {
            Some(m) => {
                let v: serde_json::Value = serde_json::from_str(m).ok()?;
                v.get("weight").map_or(Some(1.0), |w| w.as_f64())? as f32
            }
            None => 1.0,
        };
        Some((sl, s, rel, el, e, weight))
    }

    pub fn ingest_file(path: impl AsRef<Path>, lang: &str) -> Result<(Self, IngestStats)> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::ingest(f, lang)
    }

    pub fn node_id(&self, name: &str) -> Option<u32> {
        self.ids.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ids.contains_key(name)
    }

    pub fn node_name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn relation_name(&self, id: u16) -> &str {
        &self.relations[id as usize]
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// One-hop neighbours in either edge direction, self-loops excluded.
    pub fn neighbors(&self, concept: &str) -> Vec<NeighborPair> {
        let Some(id) = self.node_id(concept) else {
            return Vec::new();
        };
        self.adjacency[id as usize]
            .iter()
            .filter_map(|&ei| {
                let e = &self.edges[ei as usize];
                let other = if e.start == id { e.end } else { e.start };
                (other != id).then(|| NeighborPair {
                    concept: self.node_name(other).to_string(),
                    relation: self.relation_name(e.relation).to_string(),
                    weight: e.weight,
                })
            })
            .collect()
    }

    pub fn save_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let cache = GraphCache {
            format: GRAPH_CACHE_FORMAT.into(),
            version: GRAPH_CACHE_VERSION,
            nodes: self.names.clone(),
            relations: self.relations.clone(),
            edges: self
                .edges
                .iter()
                .map(|e| (e.start, e.relation, e.end, e.weight))
                .collect(),
        };
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(f), &cache)?;
        Ok(())
    }

    pub fn load_cache(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let cache: GraphCache = serde_json::from_reader(BufReader::new(f))?;
        if cache.format != GRAPH_CACHE_FORMAT || cache.version != GRAPH_CACHE_VERSION {
            return Err(Error::Config(format!(
                "unsupported graph cache {} v{}",
                cache.format, cache.version
            )));
        }
        let mut g = ConceptGraph::default();
        for n in &cache.nodes {
            g.intern_node(n);
        }
        for r in &cache.relations {
            g.intern_relation(r);
        }
        for (s, r, e, w) in cache.edges {
            if s as usize >= g.names.len()
                || e as usize >= g.names.len()
                || r as usize >= g.relations.len()
            {
                return Err(Error::Config("graph cache edge references unknown id".into()));
            }
            let (sn, rn, en) = (g.names[s as usize].clone(), g.relations[r as usize].clone(), g.names[e as usize].clone());
            g.add_edge(&sn, &rn, &en, w)?;
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborPair {
    pub concept: String,
    pub relation: String,
    pub weight: f32,
}

/// Relation exclusion by exact name or by prefix (e.g. every `dbpedia/...` relation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationFilter {
    pub names: Vec<String>,
    pub prefixes: Vec<String>,
}

impl Default for RelationFilter {
    fn default() -> Self {
        RelationFilter {
            names: [
                "Antonym",
                "ExternalURL",
                "NotCapableOf",
                "NotDesires",
                "NotHasProperty",
                "DistinctFrom",
                "ObstructedBy",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            prefixes: vec!["dbpedia".into()],
        }
    }
}

impl RelationFilter {
    pub fn is_excluded(&self, relation: &str) -> bool {
        self.names.iter().any(|n| n == relation)
            || self.prefixes.iter().any(|p| relation.starts_with(p.as_str()))
    }
}

/// Standard English stopword list.
pub const STOPWORDS: &[&str] = &[
    "i", "me", "my", "myself", "we", "our", "ours", "ourselves", "you", "your", "yours",
    "yourself", "yourselves", "he", "him", "his", "himself", "she", "her", "hers", "herself",
    "it", "its", "itself", "they", "them", "their", "theirs", "themselves", "what", "which",
    "who", "whom", "this", "that", "these", "those", "am", "is", "are", "was", "were", "be",
    "been", "being", "have", "has", "had", "having", "do", "does", "did", "doing", "a", "an",
    "the", "and", "but", "if", "or", "because", "as", "until", "while", "of", "at", "by",
    "for", "with", "about", "against", "between", "into", "through", "during", "before",
    "after", "above", "below", "to", "from", "up", "down", "in", "out", "on", "off", "over",
    "under", "again", "further", "then", "once", "here", "there", "when", "where", "why",
    "how", "all", "any", "both", "each", "few", "more", "most", "other", "some", "such", "no",
    "nor", "not", "only", "own", "same", "so", "than", "too", "very", "s", "t", "can", "will",
    "just", "don", "should", "now", "d", "ll", "m", "o", "re", "ve", "y", "ain", "aren",
    "couldn", "didn", "doesn", "hadn", "hasn", "haven", "isn", "ma", "mightn", "mustn",
    "needn", "shan", "shouldn", "wasn", "weren", "won", "wouldn",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConceptConfig {
    /// Number of most frequent training-set concepts to discard.
    pub top_k: usize,
    pub per_anchor_cap: usize,
    pub global_cap: usize,
    pub excluded: RelationFilter,
    pub lang: String,
    /// Also match a plural surface form against its singular node (`doctors` → `doctor`).
    pub lemmatize: bool,
    #[serde(default)]
    pub graph_path: Option<PathBuf>,
}

impl Default for ConceptConfig {
    fn default() -> Self {
        ConceptConfig {
            top_k: 20,
            per_anchor_cap: 5,
            global_cap: 64,
            excluded: RelationFilter::default(),
            lang: "en".into(),
            lemmatize: false,
            graph_path: None,
        }
    }
}

/// Scans text for graph concepts: at each position the bigram (if a node) is
/// reported before the unigram. Stopwords and stopword-only bigrams are skipped.
#[derive(Debug, Clone)]
pub struct MentionScanner {
    stopwords: HashSet<String>,
    lemmatize: bool,
}

impl Default for MentionScanner {
    fn default() -> Self {
        MentionScanner {
            stopwords: STOPWORDS.iter().map(|s| s.to_string()).collect(),
            lemmatize: false,
        }
    }
}

impl MentionScanner {
    pub fn new(stopwords: impl IntoIterator<Item = String>, lemmatize: bool) -> Self {
        MentionScanner {
            stopwords: stopwords.into_iter().collect(),
            lemmatize,
        }
    }

    pub fn with_lemmatize(mut self, on: bool) -> Self {
        self.lemmatize = on;
        self
    }

    fn resolve(&self, surface: &str, graph: &ConceptGraph) -> Option<String> {
        if graph.contains(surface) {
            return Some(surface.to_string());
        }
        if self.lemmatize {
            for suffix in ["es", "s"] {
                if let Some(stem) = surface.strip_suffix(suffix) {
                    if !stem.is_empty() && graph.contains(stem) {
                        return Some(stem.to_string());
                    }
                }
            }
        }
        None
    }

    pub fn mentions(&self, text: &str, graph: &ConceptGraph) -> Vec<String> {
        let words: Vec<String> = word_tokens(text).into_iter().filter(|w| is_word(w)).collect();
        let mut out = Vec::new();
        for i in 0..words.len() {
            if i + 1 < words.len()
                && !(self.stopwords.contains(&words[i]) && self.stopwords.contains(&words[i + 1]))
            {
                let bigram = format!("{} {}", words[i], words[i + 1]);
                if let Some(c) = self.resolve(&bigram, graph) {
                    out.push(c);
                }
            }
            if !self.stopwords.contains(&words[i]) {
                if let Some(c) = self.resolve(&words[i], graph) {
                    out.push(c);
                }
            }
        }
        out
    }
}

/// Unigrams and bigrams of a context, used to avoid re-suggesting words already said.
pub fn context_terms(text: &str) -> HashSet<String> {
    let words: Vec<String> = word_tokens(text).into_iter().filter(|w| is_word(w)).collect();
    let mut set: HashSet<String> = words.iter().cloned().collect();
    for w in words.windows(2) {
        set.insert(format!("{} {}", w[0], w[1]));
    }
    set
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub counts: HashMap<String, usize>,
    pub top_k: Vec<String>,
}

impl FrequencyTable {
    /// Counts every concept mention across `texts`; `top_k` ranks by count, ties lexicographic.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        graph: &ConceptGraph,
        scanner: &MentionScanner,
        k: usize,
    ) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for m in scanner.mentions(t, graph) {
                *counts.entry(m).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&String, &usize)> = counts.iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let top_k = ranked.into_iter().take(k).map(|(c, _)| c.clone()).collect();
        FrequencyTable { counts, top_k }
    }

    pub fn is_top(&self, concept: &str) -> bool {
        self.top_k.iter().any(|c| c == concept)
    }
}

/// Anchors in order of first appearance, deduplicated, excluding top-K concepts.
pub fn extract_anchors(
    context: &str,
    graph: &ConceptGraph,
    freq: &FrequencyTable,
    scanner: &MentionScanner,
) -> Vec<String> {
    let top: HashSet<&str> = freq.top_k.iter().map(String::as_str).collect();
    let mut seen = HashSet::new();
    scanner
        .mentions(context, graph)
        .into_iter()
        .filter(|c| !top.contains(c.as_str()))
        .filter(|c| seen.insert(c.clone()))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub anchors: Vec<String>,
    /// Per anchor: non-excluded one-hop pairs, heaviest first.
    pub neighbor_pairs: Vec<Vec<NeighborPair>>,
    pub selected: Vec<String>,
}

impl ConceptSet {
    pub fn render(&self) -> String {
        self.selected.join(" ")
    }
}

pub struct ExpansionLimits<'a> {
    pub excluded: &'a RelationFilter,
    pub per_anchor_cap: usize,
    pub global_cap: usize,
}

pub fn expand_and_filter(
    anchors: &[String],
    graph: &ConceptGraph,
    limits: &ExpansionLimits<'_>,
    context: &str,
    freq: &FrequencyTable,
) -> ConceptSet {
    let in_context = context_terms(context);
    let anchor_set: HashSet<&str> = anchors.iter().map(String::as_str).collect();
    let mut neighbor_pairs = Vec::with_capacity(anchors.len());
    let mut selected: Vec<String> = Vec::new();
    let mut chosen = HashSet::new();
    for a in anchors {
        let mut pairs: Vec<NeighborPair> = graph
            .neighbors(a)
            .into_iter()
            .filter(|p| !limits.excluded.is_excluded(&p.relation))
            .collect();
        pairs.sort_by(|x, y| {
            y.weight
                .total_cmp(&x.weight)
                .then_with(|| x.concept.cmp(&y.concept))
                .then_with(|| x.relation.cmp(&y.relation))
        });
        for p in pairs.iter().take(limits.per_anchor_cap) {
            if selected.len() >= limits.global_cap {
                break;
            }
            let c = p.concept.as_str();
            if anchor_set.contains(c) || in_context.contains(c) || freq.is_top(c) {
                continue;
            }
            if chosen.insert(c.to_string()) {
                selected.push(c.to_string());
            }
        }
        neighbor_pairs.push(pairs);
    }
    ConceptSet {
        anchors: anchors.to_vec(),
        neighbor_pairs,
        selected,
    }
}

/// Bundles graph, frequency table and limits behind a single `reason` call.
#[derive(Debug, Clone)]
pub struct ConceptReasoner {
    pub graph: ConceptGraph,
    pub freq: FrequencyTable,
    pub config: ConceptConfig,
    scanner: MentionScanner,
}

impl ConceptReasoner {
    pub fn new<'a>(
        graph: ConceptGraph,
        config: ConceptConfig,
        training_texts: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        let scanner = MentionScanner::default().with_lemmatize(config.lemmatize);
        let freq = FrequencyTable::build(training_texts, &graph, &scanner, config.top_k);
        ConceptReasoner {
            graph,
            freq,
            config,
            scanner,
        }
    }

    pub fn with_frequency(graph: ConceptGraph, config: ConceptConfig, freq: FrequencyTable) -> Self {
        let scanner = MentionScanner::default().with_lemmatize(config.lemmatize);
        ConceptReasoner {
            graph,
            freq,
            config,
            scanner,
        }
    }

    pub fn reason(&self, context: &str) -> ConceptSet {
        let anchors = extract_anchors(context, &self.graph, &self.freq, &self.scanner);
        let limits = ExpansionLimits {
            excluded: &self.config.excluded,
            per_anchor_cap: self.config.per_anchor_cap,
            global_cap: self.config.global_cap,
        };
        expand_and_filter(&anchors, &self.graph, &limits, context, &self.freq)
    }
}
