//! Metrics, per-slot reports and copy inspection.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::synth::{Provenance, ProvenanceKind};
use crate::corpus::{Corpus, Dialogue, Ontology, SlotPair, DONTCARE_VALUE, NONE_VALUE};
use crate::encoder::encode_dialogue;
use crate::error::{Error, Result};
use crate::generator::{detokenize, generate, resolve_state, Generated};
use crate::grad::{argmax, Scalar, Tape};
use crate::model::Model;
use crate::train::turn_ids;

/// Lowercased with runs of whitespace collapsed to single spaces.
pub fn normalize(value: &str) -> String {
    value.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TurnPrediction {
    pub dialogue_id: String,
    pub turn: usize,
    /// Every ontology pair; unmentioned pairs are "none".
    pub predicted: BTreeMap<SlotPair, String>,
    pub gold: BTreeMap<SlotPair, String>,
}

impl TurnPrediction {
    pub fn correct(&self, pair: &SlotPair) -> bool {
        let p = self.predicted.get(pair).map(|v| normalize(v));
        let g = self.gold.get(pair).map(|v| normalize(v));
        p.unwrap_or_else(|| NONE_VALUE.into()) == g.unwrap_or_else(|| NONE_VALUE.into())
    }

    fn pairs(&self) -> impl Iterator<Item = &SlotPair> {
        self.gold
            .keys()
            .chain(self.predicted.keys().filter(|k| !self.gold.contains_key(*k)))
    }
}

/// Gold values of one turn as strings, "none" for absent pairs.
pub fn gold_map(ontology: &Ontology, dialogue: &Dialogue, turn: usize) -> BTreeMap<SlotPair, String> {
    let state = &dialogue.turns[turn].state;
    ontology
        .pairs()
        .iter()
        .map(|p| {
            let v = state.get(p).map(|v| v.join(" ")).unwrap_or_else(|| NONE_VALUE.into());
            (p.clone(), v)
        })
        .collect()
}

fn nonempty(preds: &[TurnPrediction]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Contract("metric over zero turns".into()));
    }
    Ok(())
}

/// Fraction of turns whose every pair is predicted correctly.
pub fn joint_goal_accuracy(preds: &[TurnPrediction]) -> Result<f64> {
    nonempty(preds)?;
    let hits = preds.iter().filter(|p| p.pairs().all(|k| p.correct(k))).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Correct (pair, value) predictions over turns × pairs, "none"-gold pairs
/// included.
pub fn goal_accuracy(preds: &[TurnPrediction]) -> Result<f64> {
    nonempty(preds)?;
    let (mut hits, mut total) = (0usize, 0usize);
    for p in preds {
        for k in p.pairs() {
            total += 1;
            hits += p.correct(k) as usize;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Per-turn predictions for one dialogue. The dialogue is encoded once and
/// each turn reads its prefix rows.
pub fn predict_dialogue<T: Scalar>(model: &Model<T>, dialogue: &Dialogue) -> Result<Vec<TurnPrediction>> {
    if dialogue.turns.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let enc = encode_dialogue(&mut tape, &b, &turn_ids(&model.vocab, dialogue), None)?;
    let pairs: Vec<usize> = (0..model.num_pairs()).collect();
    let mut out = Vec::with_capacity(dialogue.turns.len());
    for turn in 0..dialogue.turns.len() {
        let mem = enc.memory(&mut tape, turn)?;
        let (gens, _) = generate(&mut tape, &b, &mem, &pairs, model.config.max_decode_len)?;
        let predicted = model
            .ontology
            .pairs()
            .iter()
            .zip(&gens)
            .map(|(p, g)| (p.clone(), resolve(model, g)))
            .collect();
        out.push(TurnPrediction {
            dialogue_id: dialogue.id.clone(),
            turn,
            predicted,
            gold: gold_map(&model.ontology, dialogue, turn),
        });
    }
    Ok(out)
}

fn resolve<T: Scalar>(model: &Model<T>, g: &Generated) -> String {
    resolve_state(&g.gate, &detokenize(&model.vocab, &g.tokens))
}

pub fn predict_corpus<T: Scalar>(model: &Model<T>, corpus: &Corpus) -> Result<Vec<TurnPrediction>> {
    let mut out = Vec::new();
    for d in &corpus.dialogues {
        out.extend(predict_dialogue(model, d)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlotRow {
    pub domain: String,
    pub slot: String,
    pub correct: usize,
    /// Turns whose gold value is not "none".
    pub support: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlotGroup {
    pub slot: String,
    pub rows: Vec<SlotRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlotReport {
    pub groups: Vec<SlotGroup>,
}

fn slot_row(preds: &[TurnPrediction], pair: &SlotPair) -> SlotRow {
    let (mut correct, mut support) = (0, 0);
    for p in preds {
        let gold = p
            .gold
            .get(pair)
            .map(|v| normalize(v))
            .unwrap_or_else(|| NONE_VALUE.into());
        if gold != NONE_VALUE {
            support += 1;
            correct += p.correct(pair) as usize;
        }
    }
    SlotRow {
        domain: pair.domain.clone(),
        slot: pair.slot.clone(),
        correct,
        support,
        accuracy: if support == 0 {
            0.0
        } else {
            correct as f64 / support as f64
        },
    }
}

/// Accuracy per (domain, slot) over turns with a non-"none" gold value,
/// grouped by shared slot name as given by `overlap_spec`
/// (slot name → domains).
pub fn slot_report(
    preds: &[TurnPrediction],
    ontology: &Ontology,
    overlap_spec: &BTreeMap<String, Vec<String>>,
) -> Result<SlotReport> {
    let mut groups = Vec::new();
    for (slot, domains) in overlap_spec {
        let mut rows = Vec::new();
        for domain in domains {
            let pair = SlotPair::new(domain.clone(), slot.clone());
            if !ontology.contains(&pair) {
                return Err(Error::Config(format!("overlap spec names unknown pair {pair}")));
            }
            rows.push(slot_row(preds, &pair));
        }
        groups.push(SlotGroup {
            slot: slot.clone(),
            rows,
        });
    }
    Ok(SlotReport { groups })
}

/// Every pair in its own single-row group.
pub fn per_slot_report(preds: &[TurnPrediction], ontology: &Ontology) -> SlotReport {
    SlotReport {
        groups: ontology
            .pairs()
            .iter()
            .map(|p| SlotGroup {
                slot: p.to_string(),
                rows: vec![slot_row(preds, p)],
            })
            .collect(),
    }
}

impl SlotReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:<12} {:>8} {:>8}", "slot", "domain", "support", "acc");
        for g in &self.groups {
            for r in &g.rows {
                let _ = writeln!(
                    s,
                    "{:<16} {:<12} {:>8} {:>8.1}",
                    r.slot,
                    r.domain,
                    r.support,
                    100.0 * r.accuracy
                );
            }
        }
        s
    }
}

/// Gen-labeled (turn, pair) instances on shared slot names, and how many of
/// them were answered with the gold value of the same slot name in another
/// domain. Also counts predictions on "none"-gold pairs that copy another
/// domain's value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossAssignment {
    pub gen_instances: usize,
    pub errors: usize,
    pub rate: f64,
}

pub fn cross_assignment(preds: &[TurnPrediction], ontology: &Ontology) -> CrossAssignment {
    let mut by_slot: HashMap<&str, Vec<&SlotPair>> = HashMap::new();
    for p in ontology.pairs() {
        by_slot.entry(p.slot.as_str()).or_default().push(p);
    }
    let (mut gen_instances, mut errors) = (0, 0);
    for pred in preds {
        for pair in ontology.pairs() {
            let siblings = &by_slot[pair.slot.as_str()];
            if siblings.len() < 2 {
                continue;
            }
            let gold = normalize(&pred.gold[pair]);
            if gold != NONE_VALUE && gold != DONTCARE_VALUE {
                gen_instances += 1;
            }
            let got = normalize(pred.predicted.get(pair).map(String::as_str).unwrap_or(NONE_VALUE));
            if got == gold || got == NONE_VALUE || got == DONTCARE_VALUE {
                continue;
            }
            let borrowed = siblings
                .iter()
                .filter(|s| **s != pair)
                .any(|s| normalize(&pred.gold[*s]) == got);
            errors += borrowed as usize;
        }
    }
    CrossAssignment {
        gen_instances,
        errors,
        rate: if gen_instances == 0 {
            0.0
        } else {
            errors as f64 / gen_instances as f64
        },
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Value accuracy of planted triplets by how they were realized, measured at
/// the turn each triplet enters the state.
pub fn provenance_accuracy(preds: &[TurnPrediction], provenance: &[Provenance]) -> BTreeMap<&'static str, Tally> {
    let index: HashMap<(&str, usize), &TurnPrediction> =
        preds.iter().map(|p| ((p.dialogue_id.as_str(), p.turn), p)).collect();
    let mut out: BTreeMap<&'static str, Tally> = BTreeMap::new();
    for rec in provenance {
        let Some(pred) = index.get(&(rec.dialogue_id.as_str(), rec.state_turn)) else {
            continue;
        };
        let pair = SlotPair::new(rec.domain.clone(), rec.slot.clone());
        let got = pred.predicted.get(&pair).map(|v| normalize(v)).unwrap_or_default();
        let t = out.entry(kind_name(rec.kind)).or_default();
        t.total += 1;
        t.correct += (got == normalize(&rec.value)) as usize;
    }
    out
}

pub fn kind_name(kind: ProvenanceKind) -> &'static str {
    match kind {
        ProvenanceKind::InTurn => "in-turn",
        ProvenanceKind::CrossTurn => "cross-turn",
        ProvenanceKind::SystemProvided => "system-provided",
    }
}

fn contains_seq(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Where a value occurs in the history up to and including `turn`.
pub fn value_sources(dialogue: &Dialogue, turn: usize, value: &[String]) -> (bool, bool) {
    let mut in_sys = false;
    let mut in_usr = false;
    for t in &dialogue.turns[..=turn] {
        in_sys |= contains_seq(&t.system, value);
        in_usr |= contains_seq(&t.user, value);
    }
    (in_sys, in_usr)
}

/// Share of triplets whose value-emitting step routes copy mass to the stream
/// that actually holds the value: `1 − β > 0.5` for user-only values and
/// `β > 0.5` for system-only values.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Routing {
    pub user_only: Tally,
    pub system_only: Tally,
}

pub fn routing_check<T: Scalar>(model: &Model<T>, corpus: &Corpus, provenance: &[Provenance]) -> Result<Routing> {
    let mut out = Routing::default();
    for rec in provenance {
        let Some(dialogue) = corpus.dialogue(&rec.dialogue_id) else {
            continue;
        };
        if rec.value == DONTCARE_VALUE || rec.state_turn >= dialogue.turns.len() {
            continue;
        }
        let value: Vec<String> = rec.value.split_whitespace().map(String::from).collect();
        let (in_sys, in_usr) = value_sources(dialogue, rec.state_turn, &value);
        if in_sys == in_usr {
            continue;
        }
        let pair = SlotPair::new(rec.domain.clone(), rec.slot.clone());
        let record = inspect_copy(model, dialogue, rec.state_turn, &pair, 0)?;
        let first = model.vocab.id(&value[0]);
        let step = record
            .steps
            .iter()
            .find(|s| Some(s.emitted_id) == first)
            .unwrap_or(&record.steps[0]);
        if in_usr {
            out.user_only.total += 1;
            out.user_only.correct += (1.0 - step.beta > 0.5) as usize;
        } else {
            out.system_only.total += 1;
            out.system_only.correct += (step.beta > 0.5) as usize;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PositionWeight {
    pub turn: usize,
    pub speaker: &'static str,
    pub token: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TopToken {
    pub token: String,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InspectStep {
    pub step: usize,
    pub emitted: String,
    #[serde(skip)]
    pub emitted_id: usize,
    pub alpha: f64,
    pub beta: f64,
    pub top_vocab: Vec<TopToken>,
    pub top_system: Vec<TopToken>,
    pub top_user: Vec<TopToken>,
    pub top_final: Vec<TopToken>,
    /// One entry per history position: system positions (weights `q_a`)
    /// followed by user positions (weights `q_u`).
    pub positions: Vec<PositionWeight>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Inspection {
    pub dialogue_id: String,
    pub turn: usize,
    pub domain: String,
    pub slot: String,
    pub gate: BTreeMap<&'static str, f64>,
    pub value: String,
    pub steps: Vec<InspectStep>,
}

fn top_k(vocab: &crate::corpus::Vocabulary, row: &[f64], k: usize) -> Vec<TopToken> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(k)
        .map(|i| TopToken {
            token: vocab.token(i).to_string(),
            prob: row[i],
        })
        .collect()
}

/// Greedy decode of one pair at one turn with every step's mixture weights,
/// top-`k` tokens of each distribution (`k = 0` skips them) and the copy
/// attention over every history position.
pub fn inspect_copy<T: Scalar>(
    model: &Model<T>,
    dialogue: &Dialogue,
    turn: usize,
    pair: &SlotPair,
    k: usize,
) -> Result<Inspection> {
    if turn >= dialogue.turns.len() {
        return Err(Error::Index {
            op: "inspect_copy",
            index: turn,
            size: dialogue.turns.len(),
        });
    }
    let s = model
        .ontology
        .index_of(pair)
        .ok_or_else(|| Error::Config(format!("pair {pair} is not in the model's ontology")))?;
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let ids = turn_ids(&model.vocab, dialogue);
    let enc = encode_dialogue(&mut tape, &b, &ids[..=turn], None)?;
    let mem = enc.full_memory();
    let (gens, dec) = generate(&mut tape, &b, &mem, &[s], model.config.max_decode_len)?;
    let g = &gens[0];
    let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
    let row = |tape: &Tape<T>, v| tape.data(v).iter().map(|&x| f(x)).collect::<Vec<f64>>();
    let mut layout = Vec::new();
    for (speaker, pick) in [("system", true), ("user", false)] {
        for (ti, t) in dialogue.turns[..=turn].iter().enumerate() {
            let toks = if pick { &t.system } else { &t.user };
            for tok in toks {
                layout.push((ti, speaker, tok.clone()));
            }
        }
    }
    let mut steps = Vec::new();
    for (i, st) in dec.steps.iter().take(g.steps.max(1)).enumerate() {
        let p_final = row(&tape, st.p_final);
        let emitted_id = argmax(&p_final);
        let weights: Vec<f64> = row(&tape, st.dists.q_a)
            .into_iter()
            .chain(row(&tape, st.dists.q_u))
            .collect();
        let positions = layout
            .iter()
            .zip(weights)
            .map(|((turn, speaker, token), weight)| PositionWeight {
                turn: *turn,
                speaker,
                token: token.clone(),
                weight,
            })
            .collect();
        let top = |v| top_k(&model.vocab, &row(&tape, v), k);
        steps.push(InspectStep {
            step: i + 1,
            emitted: model.vocab.token(emitted_id).to_string(),
            emitted_id,
            alpha: f(tape.item(st.alpha)),
            beta: f(tape.item(st.beta)),
            top_vocab: top(st.dists.p_v),
            top_system: top(st.dists.p_a),
            top_user: top(st.dists.p_u),
            top_final: top(st.p_final),
            positions,
        });
    }
    let gate = ["none", "dontcare", "gen"].into_iter().zip(g.gate).collect();
    Ok(Inspection {
        dialogue_id: dialogue.id.clone(),
        turn,
        domain: pair.domain.clone(),
        slot: pair.slot.clone(),
        gate,
        value: resolve(model, g),
        steps,
    })
}
