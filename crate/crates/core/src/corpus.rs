//! ESConv ingestion, splitting and per-supporter-turn sample construction.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strategy names as they appear in the ESConv annotations, in canonical index order.
pub const ESCONV_STRATEGIES: [&str; 8] = [
    "Question",
    "Restatement or Paraphrasing",
    "Reflection of feelings",
    "Self-disclosure",
    "Affirmation and Reassurance",
    "Providing Suggestions",
    "Information",
    "Others",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StrategyId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Seeker,
    Supporter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategyId>,
}

impl Utterance {
    pub fn seeker(text: impl Into<String>) -> Self {
        Utterance {
            speaker: Speaker::Seeker,
            text: text.into(),
            strategy: None,
        }
    }

    pub fn supporter(text: impl Into<String>, strategy: StrategyId) -> Self {
        Utterance {
            speaker: Speaker::Supporter,
            text: text.into(),
            strategy: Some(strategy),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::InvalidArgument("utterance text is empty".into()));
        }
        match (self.speaker, self.strategy) {
            (Speaker::Supporter, None) => Err(Error::InvalidArgument(
                "supporter utterance without strategy".into(),
            )),
            (Speaker::Seeker, Some(_)) => Err(Error::InvalidArgument(
                "seeker utterance carries a strategy".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    /// Stable identifier; the record index in the source file.
    pub id: usize,
    pub situation: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn supporter_turns(&self) -> usize {
        self.utterances
            .iter()
            .filter(|u| u.speaker == Speaker::Supporter)
            .count()
    }
}

/// One training unit: situation, preceding context, gold strategy and target response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscSample {
    pub conv_id: usize,
    /// Index of the target supporter utterance inside its conversation.
    pub turn: usize,
    pub situation: String,
    pub context: Vec<Utterance>,
    pub strategy: StrategyId,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyTaxonomy {
    labels: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

fn normalize_label(s: &str) -> String {
    s.trim().to_lowercase()
}

impl StrategyTaxonomy {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::InvalidArgument("empty strategy taxonomy".into()));
        }
        let mut index = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if index.insert(normalize_label(l), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate strategy {l:?}")));
            }
        }
        Ok(StrategyTaxonomy { labels, index })
    }

    pub fn esconv() -> Self {
        Self::new(ESCONV_STRATEGIES).expect("static taxonomy is valid")
    }

    /// Collects distinct annotation strings in order of first appearance.
    pub fn discover(path: impl AsRef<Path>) -> Result<Self> {
        let raw = read_raw_records(path.as_ref())?;
        let mut seen: Vec<String> = Vec::new();
        for rec in &raw {
            let Some(dialog) = rec.get("dialog").and_then(|d| d.as_array()) else {
                continue;
            };
            for turn in dialog {
                if let Some(s) = turn
                    .get("annotation")
                    .and_then(|a| a.get("strategy"))
                    .and_then(|s| s.as_str())
                {
                    if !seen.iter().any(|x| normalize_label(x) == normalize_label(s)) {
                        seen.push(s.trim().to_string());
                    }
                }
            }
        }
        Self::new(seen)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn name(&self, id: StrategyId) -> Option<&str> {
        self.labels.get(id.0).map(String::as_str)
    }

    /// Lookup after trimming and case-folding.
    pub fn lookup(&self, name: &str) -> Result<StrategyId> {
        if self.index.is_empty() && !self.labels.is_empty() {
            // deserialized without the index
            return self
                .labels
                .iter()
                .position(|l| normalize_label(l) == normalize_label(name))
                .map(StrategyId)
                .ok_or_else(|| Error::UnknownStrategy(name.to_string()));
        }
        self.index
            .get(&normalize_label(name))
            .copied()
            .map(StrategyId)
            .ok_or_else(|| Error::UnknownStrategy(name.to_string()))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Merge consecutive utterances by the same speaker into one.
    #[serde(default)]
    pub merge_consecutive: bool,
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub conversations: Vec<Conversation>,
    pub errors: Vec<Error>,
}

impl LoadReport {
    pub fn utterance_count(&self) -> usize {
        self.conversations.iter().map(|c| c.utterances.len()).sum()
    }
}

#[derive(Deserialize)]
struct RawTurn {
    speaker: String,
    content: String,
    #[serde(default)]
    annotation: Option<RawAnnotation>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    #[serde(default)]
    strategy: Option<String>,
}

#[derive(Deserialize)]
struct RawConversation {
    situation: String,
    dialog: Vec<RawTurn>,
}

fn read_raw_records(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    Ok(serde_json::from_str(&text)?)
}

fn convert_record(
    index: usize,
    value: serde_json::Value,
    taxonomy: &StrategyTaxonomy,
    opts: &LoadOptions,
) -> Result<Conversation> {
    let rec_err = |message: String| Error::Record { index, message };
    let raw: RawConversation =
        serde_json::from_value(value).map_err(|e| rec_err(e.to_string()))?;
    let mut utterances: Vec<Utterance> = Vec::with_capacity(raw.dialog.len());
    for (t, turn) in raw.dialog.into_iter().enumerate() {
        let speaker = match turn.speaker.trim().to_lowercase().as_str() {
            "seeker" | "usr" | "user" => Speaker::Seeker,
            "supporter" | "sys" | "system" => Speaker::Supporter,
            other => return Err(rec_err(format!("turn {t}: unknown speaker {other:?}"))),
        };
        let text = turn.content.trim().to_string();
        if text.is_empty() {
            return Err(rec_err(format!("turn {t}: empty content")));
        }
        let strategy = match speaker {
            Speaker::Seeker => None,
            Speaker::Supporter => {
                let name = turn
                    .annotation
                    .and_then(|a| a.strategy)
                    .ok_or_else(|| rec_err(format!("turn {t}: supporter turn lacks strategy")))?;
                Some(taxonomy.lookup(&name).map_err(|_| Error::Record {
                    index,
                    message: format!("turn {t}: unknown strategy {name:?}"),
                })?)
            }
        };
        if opts.merge_consecutive {
            if let Some(prev) = utterances.last_mut() {
                if prev.speaker == speaker {
                    prev.text.push(' ');
                    prev.text.push_str(&text);
                    // the merged turn keeps the latest strategy annotation
                    if strategy.is_some() {
                        prev.strategy = strategy;
                    }
                    continue;
                }
            }
        }
        utterances.push(Utterance {
            speaker,
            text,
            strategy,
        });
    }
    let conv = Conversation {
        id: index,
        situation: raw.situation.trim().to_string(),
        utterances,
    };
    if conv.supporter_turns() == 0 {
        return Err(rec_err("conversation has no supporter utterance".into()));
    }
    Ok(conv)
}

/// Loads an ESConv-format JSON file. Malformed records are reported by index and skipped.
pub fn load_corpus(
    path: impl AsRef<Path>,
    taxonomy: &StrategyTaxonomy,
    opts: &LoadOptions,
) -> Result<LoadReport> {
    let records = read_raw_records(path.as_ref())?;
    let mut report = LoadReport::default();
    for (index, value) in records.into_iter().enumerate() {
        match convert_record(index, value, taxonomy, opts) {
            Ok(c) => report.conversations.push(c),
            Err(e) => report.errors.push(e),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: u32,
    pub valid: u32,
    pub test: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        SplitRatio {
            train: 8,
            valid: 1,
            test: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusSplit {
    pub train: Vec<Conversation>,
    pub valid: Vec<Conversation>,
    pub test: Vec<Conversation>,
}

/// Explicit assignment of conversation ids to partitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle followed by ratio cuts, at conversation granularity.
pub fn split_corpus(
    conversations: &[Conversation],
    seed: u64,
    ratio: &SplitRatio,
) -> Result<CorpusSplit> {
    let n = conversations.len();
    let parts = [ratio.train, ratio.valid, ratio.test]
        .iter()
        .filter(|&&r| r > 0)
        .count();
    if n < parts || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} conversations into {parts} partitions"
        )));
    }
    let total = (ratio.train + ratio.valid + ratio.test) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut n_valid = n * ratio.valid as usize / total;
    let mut n_test = n * ratio.test as usize / total;
    if ratio.valid > 0 {
        n_valid = n_valid.max(1);
    }
    if ratio.test > 0 {
        n_test = n_test.max(1);
    }
    let n_train = n - n_valid - n_test;
    if ratio.train > 0 && n_train == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} conversations into {parts} partitions"
        )));
    }
    let pick = |ids: &[usize]| ids.iter().map(|&i| conversations[i].clone()).collect();
    Ok(CorpusSplit {
        train: pick(&order[..n_train]),
        valid: pick(&order[n_train..n_train + n_valid]),
        test: pick(&order[n_train + n_valid..]),
    })
}

/// Applies an explicit split; every id must exist and appear at most once.
pub fn split_from_file(conversations: &[Conversation], split: &SplitFile) -> Result<CorpusSplit> {
    let by_id: HashMap<usize, &Conversation> = conversations.iter().map(|c| (c.id, c)).collect();
    let mut used = std::collections::HashSet::new();
    let mut take = |ids: &[usize]| -> Result<Vec<Conversation>> {
        ids.iter()
            .map(|id| {
                if !used.insert(*id) {
                    return Err(Error::InvalidArgument(format!(
                        "conversation {id} assigned twice"
                    )));
                }
                by_id
                    .get(id)
                    .map(|c| (*c).clone())
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown conversation {id}")))
            })
            .collect()
    };
    Ok(CorpusSplit {
        train: take(&split.train)?,
        valid: take(&split.valid)?,
        test: take(&split.test)?,
    })
}

/// One sample per supporter utterance, with every preceding utterance as context.
pub fn build_samples(conversation: &Conversation) -> Vec<EscSample> {
    conversation
        .utterances
        .iter()
        .enumerate()
        .filter_map(|(turn, u)| {
            let strategy = u.strategy?;
            (u.speaker == Speaker::Supporter).then(|| EscSample {
                conv_id: conversation.id,
                turn,
                situation: conversation.situation.clone(),
                context: conversation.utterances[..turn].to_vec(),
                strategy,
                response: u.text.clone(),
            })
        })
        .collect()
}

pub fn build_all_samples(conversations: &[Conversation]) -> Vec<EscSample> {
    conversations.iter().flat_map(build_samples).collect()
}

pub fn write_samples_ndjson(path: impl AsRef<Path>, samples: &[EscSample]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples_ndjson(path: impl AsRef<Path>) -> Result<Vec<EscSample>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            index: i,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(utts: Vec<Utterance>) -> Conversation {
        Conversation {
            id: 0,
            situation: "s".into(),
            utterances: utts,
        }
    }

    fn write_tmp(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_loads_nothing() {
        let f = write_tmp("");
        let r = load_corpus(f.path(), &StrategyTaxonomy::esconv(), &LoadOptions::default()).unwrap();
        assert!(r.conversations.is_empty());
        assert!(r.errors.is_empty());
    }

    #[test]
    fn misspelled_strategy_is_a_record_error() {
        let body = r#"[
          {"situation": "a", "dialog": [
             {"speaker": "seeker", "content": "hi", "annotation": {}},
             {"speaker": "supporter", "content": "hello", "annotation": {"strategy": "Question"}}]},
          {"situation": "b", "dialog": [
             {"speaker": "seeker", "content": "hi", "annotation": {}},
             {"speaker": "supporter", "content": "hello", "annotation": {"strategy": "Questoin"}}]}
        ]"#;
        let f = write_tmp(body);
        let r = load_corpus(f.path(), &StrategyTaxonomy::esconv(), &LoadOptions::default()).unwrap();
        assert_eq!(r.conversations.len(), 1);
        assert_eq!(r.errors.len(), 1);
        let msg = r.errors[0].to_string();
        assert!(msg.contains("record 1"), "{msg}");
        assert!(msg.contains("Questoin"), "{msg}");
    }

    #[test]
    fn lookup_is_trimmed_and_case_folded() {
        let t = StrategyTaxonomy::esconv();
        assert_eq!(t.len(), 8);
        assert_eq!(t.lookup("  providing suggestions ").unwrap(), StrategyId(5));
        assert!(matches!(t.lookup("Hug"), Err(Error::UnknownStrategy(_))));
        assert!(StrategyTaxonomy::new(["a", "A "]).is_err());
    }

    #[test]
    fn merge_flag_joins_same_speaker_runs() {
        let body = r#"[{"situation": "a", "dialog": [
             {"speaker": "seeker", "content": "one"},
             {"speaker": "seeker", "content": "two"},
             {"speaker": "supporter", "content": "three", "annotation": {"strategy": "Question"}}]}]"#;
        let f = write_tmp(body);
        let tax = StrategyTaxonomy::esconv();
        let kept = load_corpus(f.path(), &tax, &LoadOptions::default()).unwrap();
        assert_eq!(kept.conversations[0].utterances.len(), 3);
        let merged = load_corpus(f.path(), &tax, &LoadOptions { merge_consecutive: true }).unwrap();
        assert_eq!(merged.conversations[0].utterances.len(), 2);
        assert_eq!(merged.conversations[0].utterances[0].text, "one two");
    }

    #[test]
    fn samples_follow_supporter_turns() {
        let q = StrategyId(0);
        let c = conv(vec![
            Utterance::seeker("u1"),
            Utterance::supporter("u2", q),
            Utterance::seeker("u3"),
            Utterance::supporter("u4", StrategyId(3)),
        ]);
        let s = build_samples(&c);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].context, vec![Utterance::seeker("u1")]);
        assert_eq!(s[0].response, "u2");
        assert_eq!(s[1].context.len(), 3);
        assert_eq!(s[1].response, "u4");
        assert_eq!(s[1].strategy, StrategyId(3));
    }

    #[test]
    fn opening_supporter_turn_has_empty_context() {
        let c = conv(vec![Utterance::supporter("hello", StrategyId(0)), Utterance::seeker("hi")]);
        let s = build_samples(&c);
        assert_eq!(s.len(), 1);
        assert!(s[0].context.is_empty());
    }

    #[test]
    fn split_ratio_and_determinism() {
        let convs: Vec<Conversation> = (0..100)
            .map(|i| Conversation {
                id: i,
                situation: format!("s{i}"),
                utterances: vec![Utterance::supporter("x", StrategyId(0))],
            })
            .collect();
        let r = SplitRatio::default();
        let a = split_corpus(&convs, 7, &r).unwrap();
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (80, 10, 10));
        let b = split_corpus(&convs, 7, &r).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<usize> = a
            .train
            .iter()
            .chain(&a.valid)
            .chain(&a.test)
            .map(|c| c.id)
            .collect();
        ids.sort();
        assert_eq!(ids, (0..100).collect::<Vec<_>>());
        assert!(split_corpus(&convs[..2], 7, &r).is_err());
    }

    #[test]
    fn split_file_overrides() {
        let convs: Vec<Conversation> = (0..4)
            .map(|i| Conversation {
                id: i,
                situation: "s".into(),
                utterances: vec![],
            })
            .collect();
        let s = split_from_file(
            &convs,
            &SplitFile {
                train: vec![3, 0],
                valid: vec![1],
                test: vec![2],
            },
        )
        .unwrap();
        assert_eq!(s.train[0].id, 3);
        let dup = SplitFile {
            train: vec![0],
            valid: vec![0],
            test: vec![],
        };
        assert!(split_from_file(&convs, &dup).is_err());
    }

    #[test]
    fn utterance_invariants() {
        assert!(Utterance::seeker("  ").validate().is_err());
        let mut u = Utterance::seeker("x");
        u.strategy = Some(StrategyId(1));
        assert!(u.validate().is_err());
        assert!(Utterance::supporter("ok", StrategyId(1)).validate().is_ok());
    }
}
