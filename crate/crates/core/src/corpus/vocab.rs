use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::{Corpus, DONTCARE_VALUE, NONE_VALUE};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const SOS_TOKEN: &str = "<sos>";
pub const EOS_TOKEN: &str = "<eos>";

const RESERVED: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, SOS_TOKEN, EOS_TOKEN];

/// Token ↔ id bijection with ids 0..4 reserved.
#[derive(Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    oov_lookups: AtomicU64,
}

impl Clone for Vocabulary {
    fn clone(&self) -> Self {
        Vocabulary {
            tokens: self.tokens.clone(),
            index: self.index.clone(),
            oov_lookups: AtomicU64::new(self.oov_lookups()),
        }
    }
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Vocabulary {
    /// Builds from non-reserved tokens in id order (ids start at 4).
    /// Duplicates and reserved strings are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
            oov_lookups: AtomicU64::new(0),
        };
        for t in RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into))
        {
            if !vocab.index.contains_key(&t) {
                vocab.index.insert(t.clone(), vocab.tokens.len());
                vocab.tokens.push(t);
            }
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK_TOKEN)
    }

    /// Tokens in id order, including the reserved ones.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Non-reserved tokens in id order.
    pub fn content_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// Maps tokens to ids; unknown tokens become UNK and are counted.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| {
                self.id(t).unwrap_or_else(|| {
                    self.oov_lookups.fetch_add(1, Ordering::Relaxed);
                    UNK
                })
            })
            .collect()
    }

    /// Number of out-of-vocabulary tokens seen by [`Vocabulary::encode`].
    pub fn oov_lookups(&self) -> u64 {
        self.oov_lookups.load(Ordering::Relaxed)
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }
}

/// Vocabulary over utterance tokens with frequency ≥ `min_freq`, plus every
/// gold value token and the special values. Ids ordered by utterance
/// frequency (descending), then lexicographically.
pub fn build_vocab(corpus: &Corpus, min_freq: usize) -> Vocabulary {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    let mut forced: BTreeSet<&str> = [NONE_VALUE, DONTCARE_VALUE].into_iter().collect();
    for dialogue in &corpus.dialogues {
        for turn in &dialogue.turns {
            for t in turn.system.iter().chain(&turn.user) {
                *freq.entry(t.as_str()).or_default() += 1;
            }
            for value in turn.state.values() {
                forced.extend(value.iter().map(String::as_str));
            }
        }
    }
    let mut chosen: BTreeSet<&str> = freq.iter().filter(|&(_, &n)| n >= min_freq).map(|(&t, _)| t).collect();
    chosen.extend(forced);
    let mut ordered: Vec<&str> = chosen.into_iter().filter(|t| !RESERVED.contains(t)).collect();
    ordered.sort_by(|a, b| {
        let fa = freq.get(a).copied().unwrap_or(0);
        let fb = freq.get(b).copied().unwrap_or(0);
        fb.cmp(&fa).then_with(|| a.cmp(b))
    });
    Vocabulary::from_tokens(ordered)
}

/// Replaces each non-reserved id by UNK with probability `rate`.
pub fn word_dropout<R: Rng + ?Sized>(ids: &[usize], rate: f64, rng: &mut R) -> Vec<usize> {
    if rate <= 0.0 {
        return ids.to_vec();
    }
    ids.iter()
        .map(|&id| {
            if !Vocabulary::is_reserved(id) && rng.random::<f64>() < rate {
                UNK
            } else {
                id
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Dialogue, Ontology, SlotPair, Turn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_corpus() -> Corpus {
        let pair = SlotPair::new("restaurant", "food");
        let mut state = std::collections::BTreeMap::new();
        state.insert(pair.clone(), vec!["c".to_string()]);
        Corpus {
            ontology: Ontology::new(vec![pair]).unwrap(),
            dialogues: vec![Dialogue {
                id: "d".into(),
                turns: vec![Turn {
                    system: vec![PAD_TOKEN.into()],
                    user: vec!["a".into(), "b".into()],
                    state,
                }],
            }],
        }
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::from_tokens(["x", "<pad>", "y"]);
        assert_eq!(v.id(PAD_TOKEN), Some(PAD));
        assert_eq!(v.id(UNK_TOKEN), Some(UNK));
        assert_eq!(v.id(SOS_TOKEN), Some(SOS));
        assert_eq!(v.id(EOS_TOKEN), Some(EOS));
        assert_eq!(v.id("x"), Some(4));
        assert_eq!(v.id("y"), Some(5));
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn min_freq_threshold_keeps_values() {
        let v = build_vocab(&tiny_corpus(), 2);
        for t in [
            PAD_TOKEN,
            UNK_TOKEN,
            SOS_TOKEN,
            EOS_TOKEN,
            "c",
            NONE_VALUE,
            DONTCARE_VALUE,
        ] {
            assert!(v.id(t).is_some(), "{t} missing");
        }
        assert!(v.id("a").is_none());
        assert!(v.id("b").is_none());
    }

    #[test]
    fn min_freq_one_keeps_everything() {
        let v = build_vocab(&tiny_corpus(), 1);
        for t in ["a", "b", "c"] {
            assert!(v.id(t).is_some());
        }
        // a, b each once; c, none, dontcare zero times: frequency then lexicographic.
        assert_eq!(v.content_tokens(), &["a", "b", "c", "dontcare", "none"]);
    }

    #[test]
    fn encode_counts_oov() {
        let v = Vocabulary::from_tokens(["a"]);
        let ids = v.encode(&["a".into(), "zzz".into()]);
        assert_eq!(ids, vec![4, UNK]);
        assert_eq!(v.oov_lookups(), 1);
    }

    #[test]
    fn word_dropout_rate_and_reserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids: Vec<usize> = (0..100_000).map(|i| 4 + i % 50).collect();
        assert_eq!(word_dropout(&ids, 0.0, &mut rng), ids);
        let dropped = word_dropout(&ids, 0.3, &mut rng);
        let frac = dropped.iter().filter(|&&i| i == UNK).count() as f64 / ids.len() as f64;
        assert!((frac - 0.3).abs() < 0.01, "{frac}");

        let reserved = vec![PAD, UNK, SOS, EOS, PAD, EOS];
        assert_eq!(word_dropout(&reserved, 0.99, &mut rng), reserved);
    }
}
