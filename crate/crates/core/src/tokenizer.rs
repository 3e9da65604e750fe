//! Text to id mapping. A word-level vocabulary serves the test profile; a
//! byte-level BPE `tokenizer.json` serves pretrained backbones.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::emotion::EMOTION_TAXONOMY;
use crate::error::{Error, Result};
use crate::netcore::SpecialIds;
use crate::text::{detokenize, word_tokens};

pub trait TextTokenizer: Send + Sync {
    /// Ids for a text fragment that follows other text (no special tokens added).
    fn encode_piece(&self, text: &str) -> Vec<u32>;
    fn decode(&self, ids: &[u32]) -> String;
    fn specials(&self) -> SpecialIds;
    fn vocab_size(&self) -> usize;
    /// Separator placed after each utterance; the backbone's native separator.
    fn separator(&self) -> u32 {
        self.specials().eos
    }
    fn separator_text(&self) -> &str;
}

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordVocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl WordVocab {
    /// Builds from training texts; words seen fewer than `min_count` times map to `<unk>`.
    /// Emotion words are always present so injected labels never become unknown.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in word_tokens(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        for e in EMOTION_TAXONOMY {
            for w in word_tokens(e) {
                counts.entry(w).or_insert(usize::MAX);
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        for (w, _) in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        WordVocab { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec(&self.tokens)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = serde_json::from_slice(&bytes)?;
        if tokens.len() < 4 || tokens[..4] != [PAD, BOS, EOS, UNK] {
            return Err(Error::Config(format!("{} is not a word vocabulary", path.display())));
        }
        Ok(Self::from_tokens(tokens))
    }
}

impl TextTokenizer for WordVocab {
    fn encode_piece(&self, text: &str) -> Vec<u32> {
        word_tokens(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(3))
            .collect()
    }

    fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<String> = ids
            .iter()
            .filter(|&&i| i > 3)
            .filter_map(|&i| self.tokens.get(i as usize).cloned())
            .collect();
        detokenize(&words)
    }

    fn specials(&self) -> SpecialIds {
        SpecialIds {
            pad: 0,
            bos: 1,
            eos: 2,
            unk: 3,
        }
    }

    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    fn separator_text(&self) -> &str {
        EOS
    }
}

/// Wrapper over a Hugging Face `tokenizer.json` (BART's byte-level BPE).
pub struct HfTokenizer {
    inner: tokenizers::Tokenizer,
    specials: SpecialIds,
    sep: String,
}

impl HfTokenizer {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let inner = tokenizers::Tokenizer::from_file(path)
            .map_err(|e| Error::Config(format!("cannot load tokenizer {}: {e}", path.display())))?;
        let id = |t: &str| {
            inner
                .token_to_id(t)
                .ok_or_else(|| Error::Config(format!("tokenizer lacks special token {t}")))
        };
        let specials = SpecialIds {
            pad: id(PAD)?,
            bos: id(BOS)?,
            eos: id(EOS)?,
            unk: id(UNK)?,
        };
        Ok(HfTokenizer {
            inner,
            specials,
            sep: EOS.to_string(),
        })
    }
}

impl TextTokenizer for HfTokenizer {
    fn encode_piece(&self, text: &str) -> Vec<u32> {
        // byte-level BPE folds the leading space into the first token
        self.inner
            .encode(format!(" {}", text.trim()), false)
            .map(|e| e.get_ids().to_vec())
            .unwrap_or_default()
    }

    fn decode(&self, ids: &[u32]) -> String {
        self.inner.decode(ids, true).unwrap_or_default().trim().to_string()
    }

    fn specials(&self) -> SpecialIds {
        self.specials
    }

    fn vocab_size(&self) -> usize {
        self.inner.get_vocab_size(true)
    }

    fn separator_text(&self) -> &str {
        &self.sep
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_vocab_round_trip() {
        let v = WordVocab::build(["I feel sad.", "I feel fine"], 1);
        assert_eq!(&v.tokens()[..4], &[PAD, BOS, EOS, UNK]);
        assert!(v.id("sadness").is_some());
        let ids = v.encode_piece("I feel sad.");
        assert!(ids.iter().all(|&i| i > 3));
        assert_eq!(v.decode(&ids), "i feel sad.");
        assert_eq!(v.encode_piece("zebra"), vec![3]);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        assert_eq!(WordVocab::load(&p).unwrap(), v);
    }

    #[test]
    fn min_count_drops_rare_words() {
        let v = WordVocab::build(["a a b"], 2);
        assert!(v.id("a").is_some());
        assert!(v.id("b").is_none());
    }

    #[test]
    fn hf_tokenizer_from_json() {
        let json = r#"{
          "version": "1.0", "truncation": null, "padding": null,
          "added_tokens": [],
          "normalizer": null,
          "pre_tokenizer": {"type": "Whitespace"},
          "post_processor": null, "decoder": null,
          "model": {"type": "WordLevel", "unk_token": "<unk>",
            "vocab": {"<s>": 0, "<pad>": 1, "</s>": 2, "<unk>": 3, "hello": 4, "there": 5}}
        }"#;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tokenizer.json");
        std::fs::write(&p, json).unwrap();
        let t = HfTokenizer::load(&p).unwrap();
        assert_eq!(t.specials(), SpecialIds { pad: 1, bos: 0, eos: 2, unk: 3 });
        assert_eq!(t.encode_piece("hello there"), vec![4, 5]);
        assert_eq!(t.vocab_size(), 6);
    }
}
