//! Canonical corpus JSON:
//! `{"ontology": [[domain, slot], ...], "dialogues": [{"id", "turns": [{"system", "user", "state": [[domain, slot, value], ...]}]}]}`

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tokenize, Corpus, Dialogue, Ontology, SlotPair, Turn, NONE_VALUE};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct RawCorpus {
    ontology: Vec<(String, String)>,
    dialogues: Vec<RawDialogue>,
}

#[derive(Serialize, Deserialize)]
struct RawDialogue {
    id: String,
    turns: Vec<RawTurn>,
}

#[derive(Serialize, Deserialize)]
struct RawTurn {
    system: String,
    user: String,
    state: Vec<(String, String, String)>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawOntology {
    Bare(Vec<(String, String)>),
    Wrapped { ontology: Vec<(String, String)> },
}

fn parse_error(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        message: e.to_string(),
    }
}

fn ontology_from_raw(raw: Vec<(String, String)>) -> Result<Ontology> {
    Ontology::new(raw.into_iter().map(|(d, s)| SlotPair::new(d, s)).collect())
}

/// Parses canonical JSON text. State pairs are validated against `ontology`
/// when given, otherwise against the file's own ontology.
pub fn parse_corpus(text: &str, ontology: Option<&Ontology>) -> Result<Corpus> {
    let raw: RawCorpus = serde_json::from_str(text).map_err(parse_error)?;
    let own = ontology_from_raw(raw.ontology)?;
    let ontology = match ontology {
        Some(o) => {
            if let Some(p) = own.pairs().iter().find(|p| !o.contains(p)) {
                return Err(Error::Schema(format!(
                    "corpus ontology pair {p} is not in the supplied ontology"
                )));
            }
            o.clone()
        }
        None => own,
    };
    let mut dialogues = Vec::with_capacity(raw.dialogues.len());
    for d in raw.dialogues {
        let mut turns = Vec::with_capacity(d.turns.len());
        for (ti, t) in d.turns.into_iter().enumerate() {
            let mut state = BTreeMap::new();
            for (domain, slot, value) in t.state {
                let pair = SlotPair::new(domain, slot);
                if !ontology.contains(&pair) {
                    return Err(Error::Schema(format!(
                        "dialogue {} turn {ti}: pair {pair} is not in the ontology",
                        d.id
                    )));
                }
                let value = tokenize(&value);
                if value == [NONE_VALUE] {
                    continue;
                }
                if state.insert(pair.clone(), value).is_some() {
                    return Err(Error::Schema(format!(
                        "dialogue {} turn {ti}: pair {pair} has more than one value",
                        d.id
                    )));
                }
            }
            turns.push(Turn {
                system: tokenize(&t.system),
                user: tokenize(&t.user),
                state,
            });
        }
        dialogues.push(Dialogue { id: d.id, turns });
    }
    Ok(Corpus { ontology, dialogues })
}

pub fn load_corpus(path: &Path, ontology: Option<&Ontology>) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, ontology)
}

/// Accepts either a bare `[[domain, slot], ...]` array or an object with an
/// `ontology` field (so a corpus file doubles as an ontology file).
pub fn load_ontology(path: &Path) -> Result<Ontology> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawOntology = serde_json::from_str(&text).map_err(parse_error)?;
    match raw {
        RawOntology::Bare(p) | RawOntology::Wrapped { ontology: p } => ontology_from_raw(p),
    }
}

pub fn to_json(corpus: &Corpus) -> String {
    let raw = RawCorpus {
        ontology: corpus
            .ontology
            .pairs()
            .iter()
            .map(|p| (p.domain.clone(), p.slot.clone()))
            .collect(),
        dialogues: corpus
            .dialogues
            .iter()
            .map(|d| RawDialogue {
                id: d.id.clone(),
                turns: d
                    .turns
                    .iter()
                    .map(|t| RawTurn {
                        system: t.system.join(" "),
                        user: t.user.join(" "),
                        state: t
                            .state
                            .iter()
                            .map(|(p, v)| (p.domain.clone(), p.slot.clone(), v.join(" ")))
                            .collect(),
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&raw).expect("corpus serializes")
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    fs::write(path, to_json(corpus)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = r#"{
        "ontology": [["restaurant", "food"], ["hotel", "area"]],
        "dialogues": [{"id": "d1", "turns": [
            {"system": "", "user": "I want European food.", "state": [["restaurant", "food", "European"]]}
        ]}]
    }"#;

    #[test]
    fn single_dialogue_round_trips() {
        let c = parse_corpus(ONE, None).unwrap();
        assert_eq!(c.dialogues.len(), 1);
        let t = &c.dialogues[0].turns[0];
        assert_eq!(t.system, vec!["<pad>"]);
        assert_eq!(t.user, vec!["i", "want", "european", "food", "."]);
        assert_eq!(
            t.state[&SlotPair::new("restaurant", "food")],
            vec!["european".to_string()]
        );
        let again = parse_corpus(&to_json(&c), None).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn pair_outside_ontology_is_schema_error() {
        let bad = ONE.replace(r#"["restaurant", "food", "European"]"#, r#"["taxi", "food", "x"]"#);
        match parse_corpus(&bad, None) {
            Err(Error::Schema(msg)) => assert!(msg.contains("taxi-food"), "{msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
        let narrow = Ontology::new(vec![SlotPair::new("hotel", "area")]).unwrap();
        assert!(matches!(parse_corpus(ONE, Some(&narrow)), Err(Error::Schema(_))));
    }

    #[test]
    fn malformed_json_reports_line() {
        let broken = "{\n  \"ontology\": [\n  oops\n]}";
        match parse_corpus(broken, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_pair_in_state_rejected() {
        let dup = ONE.replace(
            r#"[["restaurant", "food", "European"]]"#,
            r#"[["restaurant", "food", "European"], ["restaurant", "food", "thai"]]"#,
        );
        assert!(matches!(parse_corpus(&dup, None), Err(Error::Schema(_))));
    }
}
