//! Dataset ingestion, Break-Tie gold labels, and intent-disjoint splits.
//!
//! Utterances arrive as JSONL records with pre-split tokens, BIO slot tags
//! and a sentence-level intent. Loading validates the BIO scheme, lowercases
//! tokens and builds a dense vocabulary with three reserved marker ids.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLS_TOKEN: &str = "[CLS]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const UNK_TOKEN: &str = "[UNK]";

pub const CLS_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const UNK_ID: usize = 2;

/// One annotated utterance: tokens, per-token BIO slot tags, intent label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<String>,
    pub slots: Vec<String>,
    pub intent: String,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Token-string to dense-id mapping with reserved marker ids 0..=2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    fn with_reserved() -> Self {
        let mut v = Vocab {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for marker in [CLS_TOKEN, MASK_TOKEN, UNK_TOKEN] {
            v.insert(marker);
        }
        v
    }

    fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = self.id_to_token.len();
        self.id_to_token.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
        id
    }

    /// Builds a vocabulary from utterances in order of first occurrence.
    pub fn from_utterances<'a>(utterances: impl IntoIterator<Item = &'a Utterance>) -> Self {
        let mut v = Vocab::with_reserved();
        for u in utterances {
            for t in &u.tokens {
                v.insert(t);
            }
        }
        v
    }

    /// Reconstructs a vocabulary from an id-ordered token list (checkpoints).
    pub fn from_id_ordered(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3
            || tokens[CLS_ID] != CLS_TOKEN
            || tokens[MASK_ID] != MASK_TOKEN
            || tokens[UNK_ID] != UNK_TOKEN
        {
            return Err(Error::Checkpoint(
                "vocabulary does not start with the reserved markers".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), id).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocab entry `{t}`")));
            }
        }
        Ok(Vocab {
            token_to_id,
            id_to_token: tokens,
        })
    }

    /// Id for a token, falling back to the unknown marker.
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    /// Tokens in id order (includes the reserved markers).
    pub fn id_ordered(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Maps an utterance's tokens to ids, unknown tokens to the unk marker.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// A loaded dataset: utterances, the set of intents, and its vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    intent_set: BTreeSet<String>,
    vocab: Vocab,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: Option<String>,
    tokens: Vec<String>,
    slots: Vec<String>,
    intent: String,
}

impl Corpus {
    /// Builds a corpus from validated utterances (vocab from first occurrence).
    pub fn from_utterances(utterances: Vec<Utterance>) -> Self {
        let intent_set = utterances.iter().map(|u| u.intent.clone()).collect();
        let vocab = Vocab::from_utterances(&utterances);
        Corpus {
            utterances,
            intent_set,
            vocab,
        }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn intents(&self) -> &BTreeSet<String> {
        &self.intent_set
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn by_id(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    /// Longest utterance, in tokens.
    pub fn max_tokens(&self) -> usize {
        self.utterances.iter().map(|u| u.len()).max().unwrap_or(0)
    }

    /// Keeps only utterances whose intent is in `intents`; rebuilds the vocab.
    pub fn filter_intents(&self, intents: &BTreeSet<String>) -> Corpus {
        let kept = self
            .utterances
            .iter()
            .filter(|u| intents.contains(&u.intent))
            .cloned()
            .collect();
        Corpus::from_utterances(kept)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for u in &self.utterances {
            let line = serde_json::to_string(u)
                .map_err(|e| Error::MalformedJson { line: 0, message: e.to_string() })?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Loads a JSONL corpus; one `{"id"?, "tokens", "slots", "intent"}` object per line.
///
/// Tokens are lowercased; ids default to `u<line>`; BIO tags are validated.
pub fn load_jsonl(path: &Path) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut utterances = Vec::new();
    let mut seen_ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedJson {
            line: line_no,
            message: e.to_string(),
        })?;
        let utt = validate_record(raw, line_no)?;
        if !seen_ids.insert(utt.id.clone()) {
            return Err(Error::DuplicateId {
                id: utt.id,
                line: line_no,
            });
        }
        utterances.push(utt);
    }
    Ok(Corpus::from_utterances(utterances))
}

fn validate_record(raw: RawRecord, line: usize) -> Result<Utterance> {
    if raw.tokens.is_empty() {
        return Err(Error::EmptyUtterance { line });
    }
    if raw.tokens.len() != raw.slots.len() {
        return Err(Error::LengthMismatch {
            line,
            tokens: raw.tokens.len(),
            slots: raw.slots.len(),
        });
    }
    validate_bio(&raw.slots).map_err(|message| Error::IllFormedBio { line, message })?;
    Ok(Utterance {
        id: raw.id.unwrap_or_else(|| format!("u{line}")),
        tokens: raw.tokens.iter().map(|t| t.to_lowercase()).collect(),
        slots: raw.slots,
        intent: raw.intent,
    })
}

enum BioTag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> Option<BioTag<'_>> {
    if tag == "O" {
        return Some(BioTag::Outside);
    }
    let ty = tag.strip_prefix("B-").or_else(|| tag.strip_prefix("I-"))?;
    if ty.is_empty() {
        return None;
    }
    if tag.starts_with("B-") {
        Some(BioTag::Begin(ty))
    } else {
        Some(BioTag::Inside(ty))
    }
}

/// Checks BIO well-formedness: every `I-<ty>` continues a `B-<ty>`/`I-<ty>` run.
pub fn validate_bio(slots: &[String]) -> std::result::Result<(), String> {
    let mut prev_type: Option<&str> = None;
    for (pos, tag) in slots.iter().enumerate() {
        match parse_tag(tag) {
            None => return Err(format!("unrecognized tag `{tag}` at position {pos}")),
            Some(BioTag::Outside) => prev_type = None,
            Some(BioTag::Begin(ty)) => prev_type = Some(ty),
            Some(BioTag::Inside(ty)) => {
                if prev_type != Some(ty) {
                    return Err(format!("`{tag}` at position {pos} does not continue a run"));
                }
            }
        }
    }
    Ok(())
}

/// Boundary label in the Break-Tie schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BtLabel {
    #[serde(rename = "B")]
    Break,
    #[serde(rename = "T")]
    Tie,
    #[serde(rename = "NA")]
    Na,
}

impl fmt::Display for BtLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BtLabel::Break => write!(f, "B"),
            BtLabel::Tie => write!(f, "T"),
            BtLabel::Na => write!(f, "NA"),
        }
    }
}

/// The T-1 boundary decisions of one utterance; position p sits between
/// tokens p and p+1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BtSequence {
    pub labels: Vec<BtLabel>,
}

impl BtSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Derives gold Break-Tie labels from BIO tags.
///
/// A boundary is NA when both adjacent tokens are non-slot, Tie when both
/// belong to the same slot instance, Break otherwise (slot edges, type
/// changes, and a fresh `B-` opening a second instance of the same type).
pub fn derive_bt_gold(u: &Utterance) -> BtSequence {
    let labels = u
        .slots
        .windows(2)
        .map(|pair| {
            let (left, right) = (pair[0].as_str(), pair[1].as_str());
            if left == "O" && right == "O" {
                BtLabel::Na
            } else if right.starts_with("I-") {
                // Well-formedness guarantees the run continues from `left`.
                BtLabel::Tie
            } else {
                BtLabel::Break
            }
        })
        .collect();
    BtSequence { labels }
}

/// Intent-disjoint P1/P2 assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub p1_intents: BTreeSet<String>,
    pub p2_intents: BTreeSet<String>,
    pub seed: u64,
    pub ratio: f64,
}

/// Shuffles the intent set with a seeded generator and assigns the first
/// `ceil(ratio * N)` intents to P1.
pub fn split_by_intent(corpus: &Corpus, ratio: f64, seed: u64) -> Result<SplitSpec> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split ratio must be in (0, 1), got {ratio}"
        )));
    }
    let n = corpus.intent_set.len();
    if n < 2 {
        return Err(Error::TooFewIntents { found: n });
    }
    let mut intents: Vec<String> = corpus.intent_set.iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    intents.shuffle(&mut rng);
    let take = (ratio * n as f64).ceil() as usize;
    if take >= n {
        return Err(Error::DegenerateSplit { ratio, n_intents: n });
    }
    let p1_intents: BTreeSet<String> = intents[..take].iter().cloned().collect();
    let p2_intents: BTreeSet<String> = intents[take..].iter().cloned().collect();
    Ok(SplitSpec {
        p1_intents,
        p2_intents,
        seed,
        ratio,
    })
}
