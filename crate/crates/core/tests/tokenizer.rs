// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::sync::OnceLock;

use circuitprint::Tokenizer;
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    text: String,
    ids: Vec<u32>,
}

fn gpt2() -> &'static Tokenizer {
    static TOK: OnceLock<Tokenizer> = OnceLock::new();
    TOK.get_or_init(Tokenizer::gpt2)
}

#[test]
fn gpt2_matches_frozen_reference_corpus() {
    let raw = std::fs::read_to_string(common::fixture_dir().join("gpt2_tokenization.json")).unwrap();
    let cases: Vec<Case> = serde_json::from_str(&raw).unwrap();
    assert_eq!(cases.len(), 50);
    for case in &cases {
        assert_eq!(gpt2().encode(&case.text), case.ids, "{:?}", case.text);
        assert_eq!(gpt2().decode(&case.ids).unwrap(), case.text);
    }
}

#[test]
fn gpt2_vocabulary_size_and_end_of_text() {
    assert_eq!(gpt2().vocab_size(), 50257);
    assert_eq!(gpt2().end_of_text(), Some(50256));
}

#[test]
fn single_token_answers() {
    assert!(gpt2().single_token(" Paris").is_some());
    assert!(gpt2().single_token(" Mary").is_some());
    assert_eq!(gpt2().single_token("Paris"), gpt2().single_token(" Paris"));
    assert!(gpt2().single_token(" Brazzaville-on-sea").is_none());
}

#[test]
fn decode_rejects_unknown_ids() {
    assert!(gpt2().decode(&[60000]).is_err());
}

#[test]
fn toy_tokenizer_saves_and_reloads() {
    let (_, tok) = common::toy_fixture();
    let dir = tempfile::tempdir().unwrap();
    tok.save(dir.path()).unwrap();
    let back = Tokenizer::from_dir(dir.path()).unwrap();
    for text in ["When Mary and John went to the store", "The capital of France is", "xyz!?"] {
        assert_eq!(back.encode(text), tok.encode(text));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn gpt2_round_trips_arbitrary_text(text in "\\PC{0,40}") {
        let ids = gpt2().encode(&text);
        prop_assert_eq!(gpt2().decode(&ids).unwrap(), text);
    }

    #[test]
    fn toy_round_trips_ascii(text in "[ -~\\n]{0,60}") {
        let (_, tok) = common::toy_fixture();
        let ids = tok.encode(&text);
        prop_assert_eq!(tok.decode(&ids).unwrap(), text);
    }
}
