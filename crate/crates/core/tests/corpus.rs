mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use supportmem::corpus::{
    build_all_samples, build_samples, load_corpus, read_samples_ndjson, split_corpus, split_from_file,
    write_samples_ndjson, Conversation, LoadOptions, SplitFile, SplitRatio, StrategyTaxonomy,
};
use supportmem::{Speaker, StrategyId, Utterance};

fn esconv() -> StrategyTaxonomy {
    StrategyTaxonomy::esconv()
}

fn raw_fixture() -> Vec<serde_json::Value> {
    serde_json::from_slice(&std::fs::read(common::fixture("esconv_fixture.json")).unwrap()).unwrap()
}

#[test]
fn fixture_counts_match_the_raw_file() {
    let raw = raw_fixture();
    let convs = common::conversations();
    assert_eq!(convs.len(), raw.len());
    for (c, r) in convs.iter().zip(&raw) {
        let dialog = r["dialog"].as_array().unwrap();
        assert_eq!(c.utterances.len(), dialog.len());
        let supporters = dialog.iter().filter(|t| t["speaker"] == "supporter").count();
        assert_eq!(c.supporter_turns(), supporters);
        assert_eq!(build_samples(c).len(), supporters);
        for u in &c.utterances {
            u.validate().unwrap();
        }
    }
    let utterances: usize = convs.iter().map(|c| c.utterances.len()).sum();
    assert_eq!(utterances, 53);
    assert_eq!(build_all_samples(&convs).len(), 27);
}

#[test]
fn misspelled_strategy_drops_one_record() {
    let report = load_corpus(common::fixture("two_conversations.json"), &esconv(), &LoadOptions::default()).unwrap();
    assert_eq!(report.conversations.len(), 1);
    assert_eq!(report.errors.len(), 1);
    let msg = report.errors[0].to_string();
    assert!(msg.contains("record 1") && msg.contains("Questoin"), "{msg}");
}

#[test]
fn empty_file_is_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.json");
    std::fs::write(&p, "").unwrap();
    let report = load_corpus(&p, &esconv(), &LoadOptions::default()).unwrap();
    assert!(report.conversations.is_empty() && report.errors.is_empty());
}

#[test]
fn strategy_names_are_normalized() {
    let t = esconv();
    assert_eq!(t.len(), 8);
    assert_eq!(t.lookup("  question ").unwrap(), t.lookup("Question").unwrap());
    assert!(t.lookup("Questoin").is_err());
}

#[test]
fn opening_supporter_turn_has_empty_context() {
    let convs = common::conversations();
    let c = convs
        .iter()
        .find(|c| c.utterances[0].speaker == Speaker::Supporter)
        .expect("fixture has a supporter-first conversation");
    let s = &build_samples(c)[0];
    assert_eq!(s.turn, 0);
    assert!(s.context.is_empty());
}

#[test]
fn four_turn_dialogue_gives_two_samples() {
    let c = Conversation {
        id: 0,
        situation: "s".into(),
        utterances: vec![
            Utterance::seeker("u1"),
            Utterance::supporter("u2", StrategyId(0)),
            Utterance::seeker("u3"),
            Utterance::supporter("u4", StrategyId(3)),
        ],
    };
    let s = build_samples(&c);
    assert_eq!(s.len(), 2);
    assert_eq!(s[0].context, c.utterances[..1].to_vec());
    assert_eq!(s[0].response, "u2");
    assert_eq!(s[1].context, c.utterances[..3].to_vec());
    assert_eq!((s[1].response.as_str(), s[1].strategy), ("u4", StrategyId(3)));
}

fn synthetic(n: usize) -> Vec<Conversation> {
    (0..n)
        .map(|id| Conversation {
            id,
            situation: format!("situation {id}"),
            utterances: vec![Utterance::seeker("hi"), Utterance::supporter("hello", StrategyId(id % 8))],
        })
        .collect()
}

#[test]
fn hundred_conversations_split_eight_one_one() {
    let convs = synthetic(100);
    let a = split_corpus(&convs, 13, &SplitRatio::default()).unwrap();
    assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (80, 10, 10));
    let b = split_corpus(&convs, 13, &SplitRatio::default()).unwrap();
    assert_eq!(a, b);
    let ids: HashSet<usize> = a.train.iter().chain(&a.valid).chain(&a.test).map(|c| c.id).collect();
    assert_eq!(ids.len(), 100);
    assert!(split_corpus(&synthetic(2), 13, &SplitRatio::default()).is_err());
}

#[test]
fn split_file_overrides_and_rejects_bad_ids() {
    let convs = synthetic(5);
    let f = SplitFile {
        train: vec![4, 0],
        valid: vec![2],
        test: vec![1, 3],
    };
    let s = split_from_file(&convs, &f).unwrap();
    assert_eq!(s.train.iter().map(|c| c.id).collect::<Vec<_>>(), vec![4, 0]);
    let dup = SplitFile {
        train: vec![0],
        valid: vec![0],
        test: vec![],
    };
    assert!(split_from_file(&convs, &dup).is_err());
    let missing = SplitFile {
        train: vec![9],
        valid: vec![],
        test: vec![],
    };
    assert!(split_from_file(&convs, &missing).is_err());
}

#[test]
fn samples_survive_ndjson() {
    let samples = common::samples();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("train.samples.jsonl");
    write_samples_ndjson(&p, &samples).unwrap();
    assert_eq!(read_samples_ndjson(&p).unwrap(), samples);
}

#[test]
fn merge_flag_joins_same_speaker_runs() {
    let json = r#"[{"situation": "s", "dialog": [
        {"speaker": "seeker", "content": "a"},
        {"speaker": "seeker", "content": "b"},
        {"speaker": "supporter", "content": "c", "annotation": {"strategy": "Question"}}]}]"#;
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, json).unwrap();
    let kept = load_corpus(&p, &esconv(), &LoadOptions::default()).unwrap();
    assert_eq!(kept.conversations[0].utterances.len(), 3);
    let merged = load_corpus(&p, &esconv(), &LoadOptions { merge_consecutive: true }).unwrap();
    assert_eq!(merged.conversations[0].utterances.len(), 2);
    assert_eq!(merged.conversations[0].utterances[0].text, "a b");
}

#[test]
fn full_corpus_statistics() {
    // the official file is not shipped; point ESCONV_PATH at it to run this check
    let Ok(path) = std::env::var("ESCONV_PATH") else {
        eprintln!("ESCONV_PATH unset; skipping full-corpus statistics");
        return;
    };
    let report = load_corpus(path, &esconv(), &LoadOptions::default()).unwrap();
    assert_eq!(report.conversations.len(), 1300);
    assert_eq!(report.utterance_count(), 38350);
}

fn arb_conversation() -> impl Strategy<Value = Conversation> {
    prop::collection::vec((any::<bool>(), "[a-z]{1,6}( [a-z]{1,6}){0,3}", 0usize..8), 1..12).prop_map(|turns| {
        let mut utterances: Vec<Utterance> = turns
            .into_iter()
            .map(|(sup, text, g)| {
                if sup {
                    Utterance::supporter(text, StrategyId(g))
                } else {
                    Utterance::seeker(text)
                }
            })
            .collect();
        if !utterances.iter().any(|u| u.speaker == Speaker::Supporter) {
            utterances.push(Utterance::supporter("ok", StrategyId(0)));
        }
        Conversation {
            id: 7,
            situation: "s".into(),
            utterances,
        }
    })
}

proptest! {
    #[test]
    fn one_sample_per_supporter_turn_with_prefix_contexts(c in arb_conversation()) {
        let samples = build_samples(&c);
        prop_assert_eq!(samples.len(), c.supporter_turns());
        for s in &samples {
            prop_assert_eq!(&s.context[..], &c.utterances[..s.turn]);
            prop_assert_eq!(&s.response, &c.utterances[s.turn].text);
            prop_assert!(s.strategy.0 < 8);
        }
        for w in samples.windows(2) {
            prop_assert!(w[0].context.len() < w[1].context.len());
            prop_assert_eq!(&w[1].context[..w[0].context.len()], &w[0].context[..]);
        }
    }

    #[test]
    fn conversation_json_round_trip(c in arb_conversation()) {
        let back: Conversation = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }
}
