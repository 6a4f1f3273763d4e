//! Harness bodies shared by the fuzz targets and the corpus replay test.
//! Each accepts arbitrary bytes and panics only on a broken invariant.

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::Manifest;
use crate::describe::{parse_cache, parse_chat_response};
use crate::text::{tokenize, Vocab};

/// Parsed manifests survive a serialize/parse round trip.
pub fn manifest(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let path = Path::new("fuzz.jsonl");
    if let Ok(m) = Manifest::parse(text, path) {
        let again = m.to_jsonl().expect("parsed manifest serializes");
        assert_eq!(Manifest::parse(&again, path).expect("round trip"), m);
    }
}

/// The encoding is canonical: anything that decodes re-encodes to itself.
pub fn checkpoint(data: &[u8]) {
    if let Ok(ck) = Checkpoint::decode(data) {
        assert_eq!(ck.encode(), data);
        let _ = ck.to_model();
    }
}

pub fn description_cache(data: &[u8]) {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_cache(text, Path::new("cache.jsonl"));
    }
}

pub fn chat_response(data: &[u8]) {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(reply) = parse_chat_response(text) {
            assert!(!reply.trim().is_empty());
        }
    }
}

pub fn train_config(data: &[u8]) {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = TrainConfig::parse(text) {
            cfg.validate().expect("parsed config is valid");
        }
    }
}

/// Vocabulary lines, a blank line, then text to tokenize.
pub fn vocab(data: &[u8]) {
    const MAX_LEN: usize = 16;
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let (lines, sentence) = text.split_once("\n\n").unwrap_or((text, ""));
    if let Ok(vocab) = Vocab::from_lines(lines) {
        let tokens = tokenize(sentence, &vocab, MAX_LEN);
        assert_eq!(tokens.ids.len(), MAX_LEN);
        assert!(tokens.ids.iter().all(|&id| id < vocab.len()));
        assert_eq!(Vocab::from_lines(&vocab.to_lines()).expect("round trip"), vocab);
    }
}

pub type Harness = fn(&[u8]);

pub const TARGETS: [(&str, Harness); 6] = [
    ("manifest", manifest),
    ("checkpoint", checkpoint),
    ("description_cache", description_cache),
    ("chat_response", chat_response),
    ("train_config", train_config),
    ("vocab", vocab),
];
