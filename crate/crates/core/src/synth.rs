//! Seeded synthetic corpus with planted multi-token slot fillers.
//!
//! Four intents, each with a few carrier templates and an intent-specific
//! lexicon of 2-3-token filler phrases. Fillers always recur as exact
//! phrases while carriers vary, so token co-occurrence marks the slot
//! boundaries — a signal a boundary prober can plausibly learn.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::corpus::{Corpus, Utterance};
use crate::error::{Error, Result};

struct IntentSpec {
    name: &'static str,
    slot: &'static str,
    /// Carrier templates; `{}` marks where the filler phrase goes.
    templates: &'static [&'static [&'static str]],
    fillers: &'static [&'static [&'static str]],
}

// Carrier templates reuse a shared pool of function words across intents
// (as real task-oriented corpora do); only one or two marker words and the
// filler lexicon are intent-specific.
const INTENTS: [IntentSpec; 4] = [
    IntentSpec {
        name: "play_music",
        slot: "artist",
        templates: &[
            &["can", "you", "play", "{}", "please"],
            &["play", "some", "{}", "for", "me"],
            &["put", "{}", "on", "now"],
        ],
        fillers: &[
            &["the", "rolling", "stones"],
            &["daft", "punk"],
            &["miles", "davis"],
            &["the", "black", "keys"],
            &["norah", "jones"],
            &["arcade", "fire"],
        ],
    },
    IntentSpec {
        name: "get_weather",
        slot: "city",
        templates: &[
            &["can", "you", "check", "{}", "weather"],
            &["weather", "for", "{}", "please"],
            &["check", "{}", "for", "me", "now"],
        ],
        fillers: &[
            &["new", "york", "city"],
            &["san", "juan"],
            &["rio", "de", "janeiro"],
            &["los", "angeles"],
            &["cape", "town"],
            &["kuala", "lumpur"],
        ],
    },
    IntentSpec {
        name: "book_table",
        slot: "restaurant",
        templates: &[
            &["can", "you", "book", "{}", "please"],
            &["book", "{}", "for", "me", "now"],
            &["table", "at", "{}", "please"],
        ],
        fillers: &[
            &["golden", "dragon", "palace"],
            &["chez", "marie"],
            &["blue", "hill", "farm"],
            &["taco", "grande"],
            &["little", "owl"],
            &["pasta", "republic"],
        ],
    },
    IntentSpec {
        name: "set_alarm",
        slot: "time",
        templates: &[
            &["can", "you", "wake", "me", "at", "{}"],
            &["alarm", "for", "{}", "please"],
            &["wake", "me", "at", "{}", "now"],
        ],
        fillers: &[
            &["half", "past", "seven"],
            &["six", "thirty"],
            &["quarter", "to", "nine"],
            &["eight", "fifteen"],
            &["five", "oclock"],
            &["ten", "forty", "five"],
        ],
    },
];

/// Builds `n` utterances round-robin over the four intents, deterministic
/// per seed.
pub fn build_synthetic_corpus(n: usize, seed: u64) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::InvalidConfig("synthetic corpus size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut utterances = Vec::with_capacity(n);
    for i in 0..n {
        let spec = &INTENTS[i % INTENTS.len()];
        let template = *spec.templates.choose(&mut rng).expect("nonempty");
        let filler = *spec.fillers.choose(&mut rng).expect("nonempty");
        let mut tokens = Vec::new();
        let mut slots = Vec::new();
        for &word in template {
            if word == "{}" {
                for (k, &ft) in filler.iter().enumerate() {
                    tokens.push(ft.to_string());
                    slots.push(if k == 0 {
                        format!("B-{}", spec.slot)
                    } else {
                        format!("I-{}", spec.slot)
                    });
                }
            } else {
                tokens.push(word.to_string());
                slots.push("O".to_string());
            }
        }
        utterances.push(Utterance {
            id: format!("syn-{i:05}"),
            tokens,
            slots,
            intent: spec.name.to_string(),
        });
    }
    Ok(Corpus::from_utterances(utterances))
}

/// Builds and writes the corpus as JSON lines; returns the built corpus.
pub fn write_synthetic_corpus(path: &Path, n: usize, seed: u64) -> Result<Corpus> {
    let corpus = build_synthetic_corpus(n, seed)?;
    corpus.write_jsonl(path)?;
    Ok(corpus)
}
