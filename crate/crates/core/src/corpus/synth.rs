//! Deterministic template-based dialogue generator.
//!
//! Every planted `(domain, slot, value)` triplet is realized one of three
//! ways and labeled accordingly:
//!
//! * **in-turn**: the user states the value in the turn it enters the state;
//! * **cross-turn**: the system offers the value, the user defers, and only
//!   in a later turn refers back to it ("the area you mentioned");
//! * **system-provided**: the system offers the value and the user accepts in
//!   the same turn without repeating it.
//!
//! The first `overlap_slot_count` slots of every domain share their name and
//! value pool across domains.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    load_corpus, save_corpus, tokenize, BeliefState, Corpus, Dialogue, Ontology, SlotPair, Turn, DONTCARE_VALUE,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_domains: usize,
    pub slots_per_domain: usize,
    pub overlap_slot_count: usize,
    /// Values drawn per slot (capped by the catalog).
    pub value_pool_size: usize,
    /// Training dialogues.
    pub n_dialogues: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub max_turns: usize,
    pub cross_turn_rate: f64,
    pub system_provided_rate: f64,
    pub dontcare_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_domains: 2,
            slots_per_domain: 4,
            overlap_slot_count: 2,
            value_pool_size: 6,
            n_dialogues: 500,
            n_dev: 100,
            n_test: 100,
            max_turns: 6,
            cross_turn_rate: 0.2,
            system_provided_rate: 0.15,
            dontcare_rate: 0.05,
            seed: 17,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProvenanceKind {
    InTurn,
    CrossTurn,
    SystemProvided,
}

/// How one planted triplet entered a dialogue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub split: String,
    pub dialogue_id: String,
    pub domain: String,
    pub slot: String,
    pub value: String,
    pub kind: ProvenanceKind,
    /// Turn whose utterances first contain the value.
    pub mention_turn: usize,
    /// Turn at which the triplet enters the gold state.
    pub state_turn: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
    pub provenance: Vec<Provenance>,
}

impl SynthCorpus {
    /// Shared slot name → domains that use it.
    pub fn overlap_spec(&self) -> BTreeMap<String, Vec<String>> {
        overlap_groups(&self.train.ontology)
    }
}

/// File names written by [`SynthCorpus::save`].
pub const SPLIT_FILES: [&str; 3] = ["train.json", "dev.json", "test.json"];
pub const PROVENANCE_FILE: &str = "provenance.json";

impl SynthCorpus {
    /// Writes the three splits and the provenance sidecar into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, split) in SPLIT_FILES.iter().zip([&self.train, &self.dev, &self.test]) {
            save_corpus(split, &dir.join(name))?;
        }
        save_provenance(&self.provenance, &dir.join(PROVENANCE_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let train = load_corpus(&dir.join(SPLIT_FILES[0]), None)?;
        let dev = load_corpus(&dir.join(SPLIT_FILES[1]), Some(&train.ontology))?;
        let test = load_corpus(&dir.join(SPLIT_FILES[2]), Some(&train.ontology))?;
        let provenance = load_provenance(&dir.join(PROVENANCE_FILE))?;
        Ok(SynthCorpus {
            train,
            dev,
            test,
            provenance,
        })
    }
}

pub fn save_provenance(records: &[Provenance], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(records).expect("provenance serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_provenance(path: &Path) -> Result<Vec<Provenance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

/// Slot names used by more than one domain, with their domains.
pub fn overlap_groups(ontology: &Ontology) -> BTreeMap<String, Vec<String>> {
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for p in ontology.pairs() {
        groups.entry(p.slot.clone()).or_default().push(p.domain.clone());
    }
    groups.retain(|_, d| d.len() > 1);
    groups
}

const SHARED_SLOTS: [(&str, &[&str]); 4] = [
    (
        "area",
        &[
            "north",
            "south",
            "east",
            "west",
            "centre",
            "riverside",
            "airport",
            "downtown",
        ],
    ),
    (
        "pricerange",
        &[
            "cheap",
            "moderate",
            "expensive",
            "budget",
            "luxury",
            "mid-range",
            "affordable",
            "premium",
        ],
    ),
    (
        "day",
        &[
            "monday",
            "tuesday",
            "wednesday",
            "thursday",
            "friday",
            "saturday",
            "sunday",
            "weekend",
        ],
    ),
    (
        "people",
        &["one", "two", "three", "four", "five", "six", "seven", "eight"],
    ),
];

type SlotDef = (&'static str, &'static [&'static str]);

const DOMAINS: [(&str, [SlotDef; 3]); 5] = [
    (
        "restaurant",
        [
            (
                "food",
                &[
                    "european", "italian", "chinese", "indian", "thai", "korean", "british", "french",
                ],
            ),
            (
                "name",
                &[
                    "curry garden",
                    "pizza hut",
                    "golden wok",
                    "sitar palace",
                    "the eagle",
                    "river bar",
                    "saffron house",
                    "lucky star",
                ],
            ),
            (
                "seating",
                &[
                    "indoor", "outdoor", "terrace", "window", "private", "garden", "rooftop", "balcony",
                ],
            ),
        ],
    ),
    (
        "hotel",
        [
            (
                "stars",
                &[
                    "one-star",
                    "two-star",
                    "three-star",
                    "four-star",
                    "five-star",
                    "unrated",
                    "boutique",
                    "superior",
                ],
            ),
            (
                "type",
                &[
                    "guesthouse",
                    "lodge",
                    "inn",
                    "motel",
                    "hostel",
                    "bed-and-breakfast",
                    "resort",
                    "apartment",
                ],
            ),
            (
                "parking",
                &[
                    "free", "paid", "garage", "valet", "street", "onsite", "covered", "nearby",
                ],
            ),
        ],
    ),
    (
        "attraction",
        [
            (
                "category",
                &[
                    "museum", "park", "theatre", "gallery", "cinema", "college", "church", "pool",
                ],
            ),
            (
                "venue",
                &[
                    "kings college",
                    "castle hill",
                    "the fitzwilliam",
                    "botanic garden",
                    "corn exchange",
                    "wandlebury",
                    "byard art",
                    "scudamores",
                ],
            ),
            (
                "entrance",
                &[
                    "free-entry",
                    "ticketed",
                    "donation",
                    "members-only",
                    "discounted",
                    "pay-what-you-can",
                    "student-price",
                    "family-pass",
                ],
            ),
        ],
    ),
    (
        "taxi",
        [
            (
                "destination",
                &[
                    "cambridge",
                    "london",
                    "ely",
                    "norwich",
                    "stevenage",
                    "kings lynn",
                    "peterborough",
                    "bishops stortford",
                ],
            ),
            (
                "departure",
                &[
                    "the station",
                    "the airport",
                    "the hospital",
                    "the market",
                    "the cinema",
                    "the library",
                    "the stadium",
                    "the harbour",
                ],
            ),
            (
                "car",
                &["toyota", "ford", "honda", "audi", "tesla", "skoda", "volvo", "bmw"],
            ),
        ],
    ),
    (
        "train",
        [
            (
                "arriveby",
                &["08:00", "09:15", "10:30", "11:45", "13:00", "14:15", "15:30", "16:45"],
            ),
            (
                "departs",
                &["06:10", "07:20", "08:40", "12:50", "17:05", "18:25", "19:35", "20:55"],
            ),
            (
                "carriage",
                &[
                    "first-class",
                    "standard",
                    "quiet",
                    "sleeper",
                    "economy",
                    "business",
                    "family",
                    "accessible",
                ],
            ),
        ],
    ),
];

const SYSTEM_FILLER: [&str; 5] = [
    "how can i help you ?",
    "what else can i do for you ?",
    "anything else ?",
    "sure , noted .",
    "ok , what else do you need ?",
];
const SYSTEM_OFFER: [&str; 3] = [
    "there is a {d} with {s} {v} .",
    "how about {v} for the {d} {s} ?",
    "i can suggest {s} {v} for your {d} .",
];
const USER_REQUEST: [&str; 4] = [
    "i am looking for a {d} with {v} {s} .",
    "i need a {d} , the {s} should be {v} .",
    "please find me a {d} . {s} {v} .",
    "a {d} with {s} {v} would be great .",
];
const USER_ALSO: [&str; 2] = ["also the {d} {s} should be {v} .", "and {s} {v} for the {d} ."];
const USER_DONTCARE: [&str; 2] = ["i do not mind the {s} of the {d} .", "any {s} is fine for the {d} ."];
const USER_ACCEPT: [&str; 3] = ["yes , that works .", "great , i will take it .", "sounds good ."];
const USER_DEFER: [&str; 3] = [
    "let me think about it .",
    "maybe , i am not sure yet .",
    "hmm , i need to check first .",
];
const USER_REFERENCE: [&str; 3] = [
    "i will take the {d} {s} you mentioned .",
    "ok , book that {s} for the {d} .",
    "yes , the {s} you suggested for the {d} is fine .",
];
const USER_GREETING: &str = "hello , i need a {d} .";

struct SlotSpec {
    pair: SlotPair,
    pool: Vec<String>,
}

struct Catalog {
    ontology: Ontology,
    slots: Vec<SlotSpec>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("cross_turn_rate", self.cross_turn_rate),
            ("system_provided_rate", self.system_provided_rate),
            ("dontcare_rate", self.dontcare_rate),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} is outside [0, 1]")));
            }
        }
        if self.cross_turn_rate + self.system_provided_rate > 1.0 {
            return Err(Error::Config("cross_turn_rate + system_provided_rate exceeds 1".into()));
        }
        let counts = [
            ("n_domains", self.n_domains),
            ("slots_per_domain", self.slots_per_domain),
            ("value_pool_size", self.value_pool_size),
            ("n_dialogues", self.n_dialogues),
            ("max_turns", self.max_turns),
        ];
        for (name, c) in counts {
            if c == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.overlap_slot_count > self.slots_per_domain {
            return Err(Error::Config(format!(
                "overlap_slot_count {} exceeds slots_per_domain {}",
                self.overlap_slot_count, self.slots_per_domain
            )));
        }
        if self.n_domains > DOMAINS.len() {
            return Err(Error::Config(format!(
                "at most {} domains are available",
                DOMAINS.len()
            )));
        }
        if self.overlap_slot_count > SHARED_SLOTS.len() {
            return Err(Error::Config(format!(
                "at most {} overlapping slots are available",
                SHARED_SLOTS.len()
            )));
        }
        if self.slots_per_domain - self.overlap_slot_count > DOMAINS[0].1.len() {
            return Err(Error::Config(format!(
                "at most {} domain-specific slots are available",
                DOMAINS[0].1.len()
            )));
        }
        if self.overlap_slot_count > 0 && self.n_domains < 2 {
            return Err(Error::Config("overlapping slots need at least two domains".into()));
        }
        Ok(())
    }

    fn catalog(&self) -> Result<Catalog> {
        let pool = |values: &[&str]| -> Vec<String> {
            values
                .iter()
                .take(self.value_pool_size)
                .map(|v| v.to_string())
                .collect()
        };
        let mut slots = Vec::new();
        for (domain, own) in DOMAINS.iter().take(self.n_domains) {
            for (slot, values) in SHARED_SLOTS.iter().take(self.overlap_slot_count) {
                slots.push(SlotSpec {
                    pair: SlotPair::new(*domain, *slot),
                    pool: pool(values),
                });
            }
            for (slot, values) in own.iter().take(self.slots_per_domain - self.overlap_slot_count) {
                slots.push(SlotSpec {
                    pair: SlotPair::new(*domain, *slot),
                    pool: pool(values),
                });
            }
        }
        let ontology = Ontology::new(slots.iter().map(|s| s.pair.clone()).collect())?;
        Ok(Catalog { ontology, slots })
    }
}

fn fill(template: &str, pair: &SlotPair, value: &str) -> String {
    template
        .replace("{d}", &pair.domain)
        .replace("{s}", &pair.slot)
        .replace("{v}", value)
}

#[derive(Clone)]
struct Event {
    slot: usize,
    value: String,
    kind: ProvenanceKind,
}

struct Draft {
    system: String,
    user: String,
    entering: Vec<usize>,
    mentions: Vec<usize>,
}

fn plan_events(cfg: &SynthConfig, cat: &Catalog, rng: &mut ChaCha8Rng) -> Vec<Event> {
    let n_active = if cfg.n_domains > 1 && rng.random_bool(0.5) {
        2
    } else {
        1
    };
    let mut domains: Vec<usize> = (0..cfg.n_domains).collect();
    domains.shuffle(rng);
    let mut events = Vec::new();
    for &d in domains.iter().take(n_active) {
        let mut slot_ids: Vec<usize> = (0..cfg.slots_per_domain)
            .map(|k| d * cfg.slots_per_domain + k)
            .collect();
        slot_ids.shuffle(rng);
        let k = rng.random_range(1..=cfg.slots_per_domain.min(3));
        for &s in slot_ids.iter().take(k) {
            let r: f64 = rng.random();
            let kind = if r < cfg.cross_turn_rate {
                ProvenanceKind::CrossTurn
            } else if r < cfg.cross_turn_rate + cfg.system_provided_rate {
                ProvenanceKind::SystemProvided
            } else {
                ProvenanceKind::InTurn
            };
            let value = if kind == ProvenanceKind::InTurn && rng.random_bool(cfg.dontcare_rate) {
                DONTCARE_VALUE.to_string()
            } else {
                cat.slots[s].pool.choose(rng).expect("non-empty pool").clone()
            };
            events.push(Event { slot: s, value, kind });
        }
    }
    events
}

fn request(cat: &Catalog, e: &Event, rng: &mut ChaCha8Rng, templates: &[&str]) -> String {
    let pair = &cat.slots[e.slot].pair;
    if e.value == DONTCARE_VALUE {
        fill(USER_DONTCARE.choose(rng).unwrap(), pair, "")
    } else {
        fill(templates.choose(rng).unwrap(), pair, &e.value)
    }
}

fn filler(rng: &mut ChaCha8Rng) -> String {
    SYSTEM_FILLER.choose(rng).unwrap().to_string()
}

/// Lays out events as turns; returns the drafts and the events actually used.
fn script(cfg: &SynthConfig, cat: &Catalog, events: &[Event], rng: &mut ChaCha8Rng) -> Vec<Draft> {
    let mut drafts: Vec<Draft> = Vec::new();
    let mut i = 0;
    while i < events.len() {
        let e = &events[i];
        let pair = &cat.slots[e.slot].pair;
        let next_in_turn = events.get(i + 1).filter(|n| n.kind == ProvenanceKind::InTurn).cloned();
        let greeting = drafts.is_empty() && e.kind != ProvenanceKind::InTurn;
        let mut block: Vec<Draft> = Vec::new();
        if greeting {
            block.push(Draft {
                system: String::new(),
                user: fill(USER_GREETING, pair, ""),
                entering: vec![],
                mentions: vec![],
            });
        }
        let system_open = |rng: &mut ChaCha8Rng, first: bool| {
            if first {
                String::new()
            } else {
                filler(rng)
            }
        };
        let mut consumed = 1;
        match e.kind {
            ProvenanceKind::InTurn => {
                let mut user = request(cat, e, rng, &USER_REQUEST);
                let mut entering = vec![i];
                if let Some(n) = &next_in_turn {
                    if rng.random_bool(0.3) {
                        user.push(' ');
                        user.push_str(&request(cat, n, rng, &USER_ALSO));
                        entering.push(i + 1);
                        consumed = 2;
                    }
                }
                block.push(Draft {
                    system: system_open(rng, drafts.is_empty()),
                    user,
                    mentions: entering.clone(),
                    entering,
                });
            }
            ProvenanceKind::SystemProvided => {
                block.push(Draft {
                    system: fill(SYSTEM_OFFER.choose(rng).unwrap(), pair, &e.value),
                    user: USER_ACCEPT.choose(rng).unwrap().to_string(),
                    entering: vec![i],
                    mentions: vec![i],
                });
            }
            ProvenanceKind::CrossTurn => {
                block.push(Draft {
                    system: fill(SYSTEM_OFFER.choose(rng).unwrap(), pair, &e.value),
                    user: USER_DEFER.choose(rng).unwrap().to_string(),
                    entering: vec![],
                    mentions: vec![i],
                });
                if let Some(n) = &next_in_turn {
                    if rng.random_bool(0.5) {
                        block.push(Draft {
                            system: filler(rng),
                            user: request(cat, n, rng, &USER_REQUEST),
                            entering: vec![i + 1],
                            mentions: vec![i + 1],
                        });
                        consumed = 2;
                    }
                }
                block.push(Draft {
                    system: filler(rng),
                    user: fill(USER_REFERENCE.choose(rng).unwrap(), pair, ""),
                    entering: vec![i],
                    mentions: vec![],
                });
            }
        }
        if drafts.len() + block.len() > cfg.max_turns {
            break;
        }
        drafts.extend(block);
        i += consumed;
    }
    drafts
}

fn generate_split(
    cfg: &SynthConfig,
    cat: &Catalog,
    split: &str,
    stream: u64,
    count: usize,
    provenance: &mut Vec<Provenance>,
) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut dialogues = Vec::with_capacity(count);
    for n in 0..count {
        let id = format!("{split}-{n:04}");
        let drafts = loop {
            let events = plan_events(cfg, cat, &mut rng);
            let drafts = script(cfg, cat, &events, &mut rng);
            if drafts.iter().any(|d| !d.entering.is_empty()) {
                break (drafts, events);
            }
        };
        let (drafts, events) = drafts;
        let mut state = BeliefState::new();
        let mut turns = Vec::with_capacity(drafts.len());
        let mut first_mention: BTreeMap<usize, usize> = BTreeMap::new();
        for (ti, d) in drafts.iter().enumerate() {
            for &e in &d.mentions {
                first_mention.entry(e).or_insert(ti);
            }
            for &e in &d.entering {
                let ev = &events[e];
                let pair = cat.slots[ev.slot].pair.clone();
                state.insert(pair.clone(), tokenize(&ev.value));
                provenance.push(Provenance {
                    split: split.to_string(),
                    dialogue_id: id.clone(),
                    domain: pair.domain,
                    slot: pair.slot,
                    value: ev.value.clone(),
                    kind: ev.kind,
                    mention_turn: first_mention[&e],
                    state_turn: ti,
                });
            }
            turns.push(Turn {
                system: tokenize(&d.system),
                user: tokenize(&d.user),
                state: state.clone(),
            });
        }
        dialogues.push(Dialogue { id, turns });
    }
    Corpus {
        ontology: cat.ontology.clone(),
        dialogues,
    }
}

/// Generates train/dev/test splits. A pure function of `config`.
pub fn synth_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let cat = config.catalog()?;
    let mut provenance = Vec::new();
    let train = generate_split(config, &cat, "train", 1, config.n_dialogues, &mut provenance);
    let dev = generate_split(config, &cat, "dev", 2, config.n_dev, &mut provenance);
    let test = generate_split(config, &cat, "test", 3, config.n_test, &mut provenance);
    Ok(SynthCorpus {
        train,
        dev,
        test,
        provenance,
    })
}
