//! Fine-grained emotion labelling and the emotion-injected context sequence.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::text::word_tokens;

/// The 28-way taxonomy used by the pretrained detector (27 emotions plus neutral).
pub const EMOTION_TAXONOMY: [&str; 28] = [
    "admiration",
    "amusement",
    "anger",
    "annoyance",
    "approval",
    "caring",
    "confusion",
    "curiosity",
    "desire",
    "disappointment",
    "disapproval",
    "disgust",
    "embarrassment",
    "excitement",
    "fear",
    "gratitude",
    "grief",
    "joy",
    "love",
    "nervousness",
    "optimism",
    "pride",
    "realization",
    "relief",
    "remorse",
    "sadness",
    "surprise",
    "neutral",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EmotionLabel(usize);

impl EmotionLabel {
    pub fn from_name(name: &str) -> Result<Self> {
        let n = name.trim().to_lowercase();
        EMOTION_TAXONOMY
            .iter()
            .position(|&l| l == n)
            .map(EmotionLabel)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown emotion {name:?}")))
    }

    pub fn neutral() -> Self {
        EmotionLabel(EMOTION_TAXONOMY.len() - 1)
    }

    pub fn name(&self) -> &'static str {
        EMOTION_TAXONOMY[self.0]
    }

    pub fn index(&self) -> usize {
        self.0
    }
}

impl TryFrom<String> for EmotionLabel {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        EmotionLabel::from_name(&s)
    }
}

impl From<EmotionLabel> for String {
    fn from(l: EmotionLabel) -> String {
        l.name().to_string()
    }
}

impl std::fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub trait EmotionDetector: Send + Sync {
    /// Top-class label for `text`. Must be deterministic for fixed weights.
    fn detect(&self, text: &str) -> Result<EmotionLabel>;
}

/// Offline keyword detector. Each label owns a keyword list; the label with the most
/// keyword hits wins, ties go to the earlier taxonomy entry, no hits yields `neutral`.
#[derive(Debug, Clone)]
pub struct LexiconDetector {
    keywords: HashMap<String, usize>,
    max_words: usize,
}

const LEXICON: &[(&str, &[&str])] = &[
    ("admiration", &["admire", "amazing", "impressive", "awesome", "brilliant"]),
    ("amusement", &["funny", "lol", "haha", "hilarious", "laugh"]),
    ("anger", &["angry", "furious", "mad", "rage", "hate"]),
    ("annoyance", &["annoyed", "annoying", "irritated", "frustrating", "frustrated"]),
    ("approval", &["agree", "right", "okay", "ok", "sure"]),
    ("caring", &["here for you", "care", "support", "understand", "sorry to hear"]),
    ("confusion", &["confused", "unsure", "confusing", "puzzled", "don't know"]),
    ("curiosity", &["wonder", "curious", "why", "how", "what"]),
    ("desire", &["wish", "want", "hope to", "long for", "crave"]),
    ("disappointment", &["disappointed", "let down", "disappointing", "failed"]),
    ("disapproval", &["disagree", "wrong", "unfair", "shouldn't"]),
    ("disgust", &["disgusting", "gross", "sick of", "revolting"]),
    ("embarrassment", &["embarrassed", "ashamed", "awkward", "humiliated"]),
    ("excitement", &["excited", "thrilled", "can't wait", "exciting"]),
    ("fear", &["afraid", "scared", "fear", "terrified", "frightened"]),
    ("gratitude", &["thank", "thanks", "grateful", "appreciate"]),
    ("grief", &["grief", "died", "passed away", "mourning", "funeral"]),
    ("joy", &["happy", "glad", "joy", "delighted", "great"]),
    ("love", &["love", "adore", "loving"]),
    ("nervousness", &["nervous", "anxious", "worried", "anxiety", "stress", "stressed"]),
    ("optimism", &["hopeful", "optimistic", "will get better", "better", "hope"]),
    ("pride", &["proud", "accomplished"]),
    ("realization", &["realize", "realized", "noticed", "figured"]),
    ("relief", &["relieved", "relief"]),
    ("remorse", &["regret", "guilty", "my fault", "apologize"]),
    ("sadness", &["sad", "hopeless", "depressed", "lonely", "cry", "unhappy", "lost my"]),
    ("surprise", &["surprised", "shocked", "wow", "unexpected"]),
];

impl Default for LexiconDetector {
    fn default() -> Self {
        let mut keywords = HashMap::new();
        for (label, words) in LEXICON {
            let idx = EmotionLabel::from_name(label).expect("lexicon label in taxonomy").0;
            for w in *words {
                keywords.insert(w.to_string(), idx);
            }
        }
        LexiconDetector {
            keywords,
            max_words: 512,
        }
    }
}

impl LexiconDetector {
    pub fn keyword_label(&self, keyword: &str) -> Option<EmotionLabel> {
        self.keywords.get(keyword).copied().map(EmotionLabel)
    }
}

impl EmotionDetector for LexiconDetector {
    fn detect(&self, text: &str) -> Result<EmotionLabel> {
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("emotion detection on empty text".into()));
        }
        let mut words = word_tokens(text);
        words.truncate(self.max_words);
        let mut hits = [0usize; EMOTION_TAXONOMY.len()];
        for n in 1..=3 {
            for win in words.windows(n) {
                let phrase = win.join(" ");
                if let Some(&idx) = self.keywords.get(&phrase) {
                    hits[idx] += 1;
                }
            }
        }
        // words like "don't" are split by the tokenizer; match contractions on the raw text too
        let lower = text.to_lowercase();
        for (kw, &idx) in &self.keywords {
            if kw.contains('\'') && lower.contains(kw.as_str()) {
                hits[idx] += 1;
            }
        }
        let best = hits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .filter(|(_, &h)| h > 0)
            .map(|(i, _)| EmotionLabel(i))
            .unwrap_or_else(EmotionLabel::neutral);
        Ok(best)
    }
}

/// Labels produced offline by the pretrained 28-class detector, keyed by exact text.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedDetector {
    labels: HashMap<String, EmotionLabel>,
}

#[derive(Serialize, Deserialize)]
struct TextLabel {
    text: String,
    label: EmotionLabel,
}

impl PrecomputedDetector {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| {
            Error::DetectorUnavailable(format!(
                "cannot open pretrained label file {}: {e}; set emotion.detector = \"stub\" to run offline",
                path.display()
            ))
        })?;
        let mut labels = HashMap::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let tl: TextLabel = serde_json::from_str(&line)?;
            labels.insert(tl.text, tl.label);
        }
        Ok(PrecomputedDetector { labels })
    }
}

impl EmotionDetector for PrecomputedDetector {
    fn detect(&self, text: &str) -> Result<EmotionLabel> {
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("emotion detection on empty text".into()));
        }
        self.labels.get(text).copied().ok_or_else(|| {
            Error::DetectorUnavailable(format!(
                "no pretrained label for {text:?}; regenerate the label file or set emotion.detector = \"stub\""
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Pretrained,
    #[default]
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EmotionConfig {
    #[serde(default)]
    pub detector: DetectorKind,
    /// NDJSON `{text, label}` exported from the pretrained detector.
    #[serde(default)]
    pub labels_path: Option<PathBuf>,
}

pub fn build_detector(cfg: &EmotionConfig) -> Result<Box<dyn EmotionDetector>> {
    match cfg.detector {
        DetectorKind::Stub => Ok(Box::new(LexiconDetector::default())),
        DetectorKind::Pretrained => {
            let path = cfg.labels_path.as_ref().ok_or_else(|| {
                Error::DetectorUnavailable(
                    "emotion.labels_path is not set for the pretrained detector; set emotion.detector = \"stub\" to run offline"
                        .into(),
                )
            })?;
            Ok(Box::new(PrecomputedDetector::load(path)?))
        }
    }
}

/// Per-(conversation, turn) label cache. One writer per key; later writes for a key are ignored.
#[derive(Debug, Default)]
pub struct EmotionCache {
    entries: RwLock<HashMap<(usize, usize), EmotionLabel>>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    conv_id: usize,
    turn: usize,
    label: EmotionLabel,
}

impl EmotionCache {
    pub fn get(&self, conv_id: usize, turn: usize) -> Option<EmotionLabel> {
        self.entries.read().unwrap().get(&(conv_id, turn)).copied()
    }

    pub fn get_or_detect(
        &self,
        conv_id: usize,
        turn: usize,
        text: &str,
        detector: &dyn EmotionDetector,
    ) -> Result<EmotionLabel> {
        if let Some(l) = self.get(conv_id, turn) {
            return Ok(l);
        }
        let label = detector.detect(text)?;
        Ok(*self
            .entries
            .write()
            .unwrap()
            .entry((conv_id, turn))
            .or_insert(label))
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let entries = self.entries.read().unwrap();
        let mut keys: Vec<_> = entries.keys().copied().collect();
        keys.sort_unstable();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for (conv_id, turn) in keys {
            let line = CacheLine {
                conv_id,
                turn,
                label: entries[&(conv_id, turn)],
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut map = HashMap::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: CacheLine = serde_json::from_str(&line)?;
            map.entry((l.conv_id, l.turn)).or_insert(l.label);
        }
        Ok(EmotionCache {
            entries: RwLock::new(map),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Piece {
    Utterance(String),
    Emotion(EmotionLabel),
    Separator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSpan {
    pub utterance: usize,
    /// Half-open range into `pieces` covering the utterance, its emotion word and separator.
    pub start: usize,
    pub end: usize,
    pub label: Option<EmotionLabel>,
}

/// Context sequence `u_1 e_1 SEP ... u_n e_n SEP` kept as typed pieces until tokenization.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InjectedContext {
    pub pieces: Vec<Piece>,
    pub spans: Vec<UtteranceSpan>,
}

impl InjectedContext {
    pub fn surface(&self, sep: &str) -> String {
        self.pieces
            .iter()
            .map(|p| match p {
                Piece::Utterance(t) => t.as_str(),
                Piece::Emotion(l) => l.name(),
                Piece::Separator => sep,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn emotion_count(&self) -> usize {
        self.pieces
            .iter()
            .filter(|p| matches!(p, Piece::Emotion(_)))
            .count()
    }

    pub fn separator_count(&self) -> usize {
        self.pieces
            .iter()
            .filter(|p| matches!(p, Piece::Separator))
            .count()
    }

    /// Utterance texts with emotion words and separators stripped.
    pub fn utterances(&self) -> Vec<&str> {
        self.pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Utterance(t) => Some(t.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Keeps only the last `n` utterance segments.
    pub fn keep_last(&self, n: usize) -> InjectedContext {
        let drop = self.spans.len().saturating_sub(n);
        let Some(first) = self.spans.get(drop) else {
            return InjectedContext::default();
        };
        let offset = first.start;
        InjectedContext {
            pieces: self.pieces[offset..].to_vec(),
            spans: self.spans[drop..]
                .iter()
                .map(|s| UtteranceSpan {
                    utterance: s.utterance,
                    start: s.start - offset,
                    end: s.end - offset,
                    label: s.label,
                })
                .collect(),
        }
    }
}

/// Interleaves utterances with their emotion words. `labels = None` builds the
/// emotion-free variant (utterances and separators only).
pub fn build_injected_context(
    context: &[Utterance],
    labels: Option<&[EmotionLabel]>,
) -> Result<InjectedContext> {
    if let Some(labels) = labels {
        if labels.len() != context.len() {
            return Err(Error::LengthMismatch {
                left: context.len(),
                right: labels.len(),
            });
        }
    }
    let mut out = InjectedContext::default();
    for (i, u) in context.iter().enumerate() {
        let start = out.pieces.len();
        out.pieces.push(Piece::Utterance(u.text.clone()));
        let label = labels.map(|l| l[i]);
        if let Some(l) = label {
            out.pieces.push(Piece::Emotion(l));
        }
        out.pieces.push(Piece::Separator);
        out.spans.push(UtteranceSpan {
            utterance: i,
            start,
            end: out.pieces.len(),
            label,
        });
    }
    Ok(out)
}
