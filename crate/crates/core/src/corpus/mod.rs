//! Dialogues, ontology, vocabulary and the data that feeds the model.

mod embeddings;
mod io;
pub mod synth;
mod tokenize;
mod vocab;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use embeddings::load_embeddings;
pub use io::{load_corpus, load_ontology, parse_corpus, save_corpus, to_json};
pub use synth::{synth_corpus, Provenance, ProvenanceKind, SynthConfig, SynthCorpus};
pub use tokenize::{tokenize, PUNCTUATION};
pub use vocab::{
    build_vocab, word_dropout, Vocabulary, EOS, EOS_TOKEN, PAD, PAD_TOKEN, SOS, SOS_TOKEN, UNK, UNK_TOKEN,
};

/// Special value meaning the slot has not been mentioned.
pub const NONE_VALUE: &str = "none";
/// Special value meaning the user has no preference.
pub const DONTCARE_VALUE: &str = "dontcare";

/// A `(domain, slot)` pair.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotPair {
    pub domain: String,
    pub slot: String,
}

impl SlotPair {
    pub fn new(domain: impl Into<String>, slot: impl Into<String>) -> Self {
        SlotPair {
            domain: domain.into(),
            slot: slot.into(),
        }
    }
}

impl fmt::Display for SlotPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.domain, self.slot)
    }
}

/// Belief state: at most one value (as tokens) per pair. Absent pairs are "none".
pub type BeliefState = BTreeMap<SlotPair, Vec<String>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    pub system: Vec<String>,
    pub user: Vec<String>,
    /// Cumulative state after this turn.
    pub state: BeliefState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

/// Ordered set of `(domain, slot)` pairs; the position of a pair is its slot index.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Ontology {
    pairs: Vec<SlotPair>,
}

impl Ontology {
    pub fn new(pairs: Vec<SlotPair>) -> crate::Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &pairs {
            if !seen.insert(p) {
                return Err(crate::Error::Schema(format!("duplicate ontology pair {p}")));
            }
        }
        Ok(Ontology { pairs })
    }

    pub fn pairs(&self) -> &[SlotPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn index_of(&self, pair: &SlotPair) -> Option<usize> {
        self.pairs.iter().position(|p| p == pair)
    }

    pub fn contains(&self, pair: &SlotPair) -> bool {
        self.index_of(pair).is_some()
    }

    /// Distinct domains in first-appearance order.
    pub fn domains(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for p in &self.pairs {
            if !out.contains(&p.domain.as_str()) {
                out.push(&p.domain);
            }
        }
        out
    }

    /// Distinct slot names in first-appearance order; pairs sharing a slot name
    /// share its embedding row.
    pub fn slot_names(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for p in &self.pairs {
            if !out.contains(&p.slot.as_str()) {
                out.push(&p.slot);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub ontology: Ontology,
    pub dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn turn_count(&self) -> usize {
        self.dialogues.iter().map(|d| d.turns.len()).sum()
    }

    pub fn dialogue(&self, id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.id == id)
    }
}
