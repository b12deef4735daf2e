//! Joint gate + generator training.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, Corpus, Dialogue, Ontology, SlotPair, Turn, Vocabulary, EOS, NONE_VALUE, PAD};
use crate::encoder::{encode_dialogue, Noise, TurnIds};
use crate::error::{Error, Result};
use crate::eval;
use crate::generator::{decode, GateClass};
use crate::grad::{grad_check_with, GradCheckReport, OpKind, ParamStore, Scalar, Tape, Tensor, Var};
use crate::model::{param_group, Bound, Model, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Target number of (dialogue, turn) examples per batch. Whole dialogues
    /// are packed until the target is reached.
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub lr: f64,
    pub word_dropout: f64,
    pub embed_dropout: f64,
    pub teacher_forcing: f64,
    pub max_decode_len: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub precision: Precision,
    pub optimizer: Optimizer,
    pub clip_norm: f64,
    pub min_freq: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            hidden_dim: 400,
            embed_dim: 400,
            lr: 0.001,
            word_dropout: 0.3,
            embed_dropout: 0.3,
            teacher_forcing: 0.5,
            max_decode_len: 10,
            epochs: 30,
            patience: 6,
            seed: 1,
            precision: Precision::F32,
            optimizer: Optimizer::Adam,
            clip_norm: 10.0,
            min_freq: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("word_dropout", self.word_dropout),
            ("embed_dropout", self.embed_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is outside [0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing) {
            return Err(Error::Config(format!(
                "teacher_forcing = {} is outside [0, 1]",
                self.teacher_forcing
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            max_decode_len: self.max_decode_len,
        }
    }
}

/// Per-turn supervision for every ontology pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnTargets {
    pub gates: Vec<GateClass>,
    /// Value token ids followed by EOS; "none"/"dontcare" for non-gen slots.
    pub values: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDialogue {
    pub id: String,
    pub turns: Vec<TurnIds>,
    pub targets: Vec<TurnTargets>,
}

fn value_ids(vocab: &Vocabulary, dialogue: &str, pair: &SlotPair, value: &[String]) -> Result<Vec<usize>> {
    let mut ids = Vec::with_capacity(value.len() + 1);
    for t in value {
        ids.push(vocab.id(t).ok_or_else(|| {
            Error::Data(format!(
                "dialogue {dialogue}: value token `{t}` of {pair} is not in the vocabulary"
            ))
        })?);
    }
    ids.push(EOS);
    Ok(ids)
}

fn turn_targets(vocab: &Vocabulary, ontology: &Ontology, dialogue: &str, turn: &Turn) -> Result<TurnTargets> {
    let none = vec![NONE_VALUE.to_string()];
    let mut gates = Vec::with_capacity(ontology.len());
    let mut values = Vec::with_capacity(ontology.len());
    for pair in ontology.pairs() {
        let value = turn.state.get(pair).unwrap_or(&none);
        gates.push(GateClass::of_value(value));
        values.push(value_ids(vocab, dialogue, pair, value)?);
    }
    Ok(TurnTargets { gates, values })
}

/// Token ids of every turn (OOV words become UNK).
pub fn turn_ids(vocab: &Vocabulary, dialogue: &Dialogue) -> Vec<TurnIds> {
    dialogue
        .turns
        .iter()
        .map(|t| TurnIds {
            system: vocab.encode(&t.system),
            user: vocab.encode(&t.user),
        })
        .collect()
}

pub fn prepare(corpus: &Corpus, vocab: &Vocabulary, ontology: &Ontology) -> Result<Vec<PreparedDialogue>> {
    corpus
        .dialogues
        .iter()
        .filter(|d| !d.turns.is_empty())
        .map(|d| {
            Ok(PreparedDialogue {
                id: d.id.clone(),
                turns: turn_ids(vocab, d),
                targets: d
                    .turns
                    .iter()
                    .map(|t| turn_targets(vocab, ontology, &d.id, t))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// One training example: the dialogue prefix ending at `turn`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Example {
    pub dialogue: usize,
    pub turn: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    pub teacher_forcing: f64,
    pub word_dropout: f64,
    pub embed_dropout: f64,
}

impl LossOptions {
    /// No noise and full teacher forcing: the loss is a smooth function of
    /// the parameters.
    pub fn deterministic() -> Self {
        LossOptions {
            teacher_forcing: 1.0,
            word_dropout: 0.0,
            embed_dropout: 0.0,
        }
    }

    fn noisy(&self) -> bool {
        self.word_dropout > 0.0 || self.embed_dropout > 0.0
    }
}

/// Gate plus value cross-entropy summed over all pairs and decode steps,
/// averaged over `batch`. Each dialogue is encoded once; every example reads
/// the rows of its prefix.
pub fn compute_loss<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    data: &[PreparedDialogue],
    batch: &[Example],
    opts: &LossOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut order: Vec<usize> = Vec::new();
    let mut upto: BTreeMap<usize, usize> = BTreeMap::new();
    for ex in batch {
        let d = data.get(ex.dialogue).ok_or(Error::Index {
            op: "compute_loss",
            index: ex.dialogue,
            size: data.len(),
        })?;
        if ex.turn >= d.turns.len() {
            return Err(Error::Index {
                op: "compute_loss",
                index: ex.turn,
                size: d.turns.len(),
            });
        }
        let e = upto.entry(ex.dialogue).or_insert_with(|| {
            order.push(ex.dialogue);
            0
        });
        *e = (*e).max(ex.turn);
    }
    let mut encoded = BTreeMap::new();
    for &di in &order {
        let turns = &data[di].turns[..=upto[&di]];
        let noise = opts.noisy().then(|| Noise {
            word_dropout: opts.word_dropout,
            embed_dropout: opts.embed_dropout,
            rng: &mut *rng,
        });
        encoded.insert(di, encode_dialogue(tape, b, turns, noise)?);
    }
    let pairs: Vec<usize> = (0..b.domain_of.len()).collect();
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let mem = encoded[&ex.dialogue].memory(tape, ex.turn)?;
        let targets = &data[ex.dialogue].targets[ex.turn];
        let steps = targets.values.iter().map(Vec::len).max().unwrap_or(1);
        let forced: Vec<bool> = pairs
            .iter()
            .map(|_| opts.teacher_forcing >= 1.0 || rng.random::<f64>() < opts.teacher_forcing)
            .collect();
        let dec = decode(tape, b, &mem, &pairs, steps, |t, best| {
            Some(
                targets
                    .values
                    .iter()
                    .enumerate()
                    .map(|(r, gold)| match gold.get(t) {
                        Some(&g) if t + 1 < gold.len() => {
                            if forced[r] {
                                g
                            } else {
                                best[r]
                            }
                        }
                        _ => PAD,
                    })
                    .collect(),
            )
        })?;
        let gate_t: Vec<Option<usize>> = targets.gates.iter().map(|g| Some(g.index())).collect();
        let mut parts = vec![tape.cross_entropy_rows(dec.gate, &gate_t)?];
        for (t, step) in dec.steps.iter().enumerate() {
            let tg: Vec<Option<usize>> = targets.values.iter().map(|v| v.get(t).copied()).collect();
            parts.push(tape.cross_entropy_rows(step.p_final, &tg)?);
        }
        losses.push(tape.add_all(&parts)?);
    }
    let total = tape.add_all(&losses)?;
    Ok(tape.scale(total, T::from_f64(1.0 / batch.len() as f64)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn check_finite<T: Scalar>(params: &ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for ((_, name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim("optimizer step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
        }
    }
    Ok(())
}

/// Bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    check_finite(params, grads)?;
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let step_size = T::from_f64(lr / c1);
    let (tb1, tb2) = (T::from_f64(b1), T::from_f64(b2));
    let (ob1, ob2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let inv_c2 = T::from_f64(1.0 / c2);
    let eps = T::from_f64(state.eps);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            if g[j] == T::zero() && m[j] == T::zero() && v[j] == T::zero() {
                continue;
            }
            m[j] = tb1 * m[j] + ob1 * g[j];
            v[j] = tb2 * v[j] + ob2 * g[j] * g[j];
            *w -= step_size * m[j] / ((v[j] * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
    check_finite(params, grads)?;
    let lr = T::from_f64(lr);
    for (p, g) in params.tensors_mut().iter_mut().zip(grads) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// Rescales `grads` to global L2 norm `max_norm` if above it. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One JSON-lines record per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_joint_acc: f64,
    pub dev_goal_acc: f64,
    pub wall_ms: u64,
    pub clipped_steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the best dev joint accuracy.
    pub model: Model<T>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Packs whole dialogues into batches of at least `batch_size` examples.
fn make_batches(data: &[PreparedDialogue], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Example>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    for di in order {
        for turn in 0..data[di].turns.len() {
            cur.push(Example { dialogue: di, turn });
        }
        if cur.len() >= batch_size {
            batches.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// One optimizer step on `batch`; returns the batch loss.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    data: &[PreparedDialogue],
    batch: &[Example],
    cfg: &TrainConfig,
    adam: &mut AdamState<T>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, bool)> {
    let opts = LossOptions {
        teacher_forcing: cfg.teacher_forcing,
        word_dropout: cfg.word_dropout,
        embed_dropout: cfg.embed_dropout,
    };
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let loss = compute_loss(&mut tape, &b, data, batch, &opts, rng)?;
    let value = tape.item(loss).to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    let grads = tape.backward(loss)?;
    let mut grads = grads.param_grads(&tape, &model.params);
    let norm = clip_global_norm(&mut grads, cfg.clip_norm);
    let clipped = norm > cfg.clip_norm;
    if clipped {
        log::debug!("gradient norm {norm:.3} clipped to {}", cfg.clip_norm);
    }
    match cfg.optimizer {
        Optimizer::Adam => adam_step(&mut model.params, &grads, adam, cfg.lr)?,
        Optimizer::Sgd => sgd_step(&mut model.params, &grads, cfg.lr)?,
    }
    Ok((value, clipped))
}

/// Builds the vocabulary from `train` and a fresh model.
pub fn init_model<T: Scalar>(train: &Corpus, cfg: &TrainConfig) -> Result<Model<T>> {
    let vocab = build_vocab(train, cfg.min_freq);
    Model::new(cfg.model_config(), vocab, train.ontology.clone(), cfg.seed)
}

/// Epoch loop with seeded shuffling and early stopping on dev joint goal
/// accuracy: training stops once `patience` epochs pass without improvement.
/// `on_epoch` sees each log record as it is produced.
pub fn train<T: Scalar>(
    model: Model<T>,
    train: &Corpus,
    dev: &Corpus,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.dialogues.iter().all(|d| d.turns.is_empty()) {
        return Err(Error::Config("training corpus has no turns".into()));
    }
    if dev.dialogues.iter().all(|d| d.turns.is_empty()) {
        return Err(Error::Config("dev corpus has no turns".into()));
    }
    let mut model = model;
    let data = prepare(train, &model.vocab, &model.ontology)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.params);
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut log = Vec::new();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let batches = make_batches(&data, cfg.batch_size, &mut rng);
        let mut total = 0.0;
        let mut clipped_steps = 0;
        for batch in &batches {
            let (loss, clipped) = train_step(&mut model, &data, batch, cfg, &mut adam, &mut rng)?;
            total += loss;
            clipped_steps += clipped as usize;
        }
        let preds = eval::predict_corpus(&model, dev)?;
        let record = EpochLog {
            epoch,
            train_loss: total / batches.len() as f64,
            dev_joint_acc: eval::joint_goal_accuracy(&preds)?,
            dev_goal_acc: eval::goal_accuracy(&preds)?,
            wall_ms: start.elapsed().as_millis() as u64,
            clipped_steps,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} dev joint {:.4} goal {:.4} ({} ms)",
            record.train_loss,
            record.dev_joint_acc,
            record.dev_goal_acc,
            record.wall_ms
        );
        on_epoch(&record);
        let improved = best.as_ref().is_none_or(|(acc, _, _)| record.dev_joint_acc > *acc);
        if improved {
            best = Some((record.dev_joint_acc, epoch, model.params.clone()));
        }
        log.push(record);
        let best_epoch = best.as_ref().map(|b| b.1).unwrap_or(epoch);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainOutcome { model, log, best_epoch })
}

/// Tiny complete instance used by the gradient check: hidden 8, vocabulary
/// of 30, two turns, three pairs (two sharing a slot name).
pub fn tiny_instance(seed: u64) -> Result<(Model<f64>, Vec<PreparedDialogue>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..24).map(|i| format!("w{i:02}")).collect();
    let vocab = Vocabulary::from_tokens(words.iter().cloned().chain(["none".into(), "dontcare".into()]));
    let ontology = Ontology::new(vec![
        SlotPair::new("hotel", "area"),
        SlotPair::new("restaurant", "area"),
        SlotPair::new("restaurant", "food"),
    ])?;
    let mut utt = |n: usize| -> Vec<String> {
        (0..n)
            .map(|_| words[rng.random_range(0..words.len())].clone())
            .collect()
    };
    let t0 = Turn {
        system: vec!["<pad>".into()],
        user: utt(4),
        state: [(ontology.pairs()[0].clone(), vec![words[3].clone()])]
            .into_iter()
            .collect(),
    };
    let mut s1 = t0.state.clone();
    s1.insert(ontology.pairs()[2].clone(), vec![words[5].clone(), words[6].clone()]);
    s1.insert(ontology.pairs()[1].clone(), vec!["dontcare".into()]);
    let t1 = Turn {
        system: utt(3),
        user: utt(5),
        state: s1,
    };
    let corpus = Corpus {
        ontology: ontology.clone(),
        dialogues: vec![Dialogue {
            id: "tiny".into(),
            turns: vec![t0, t1],
        }],
    };
    debug_assert_eq!(vocab.len(), 30);
    let model = Model::new(ModelConfig::with_hidden(8), vocab, ontology, seed)?;
    let data = prepare(&corpus, &model.vocab, &model.ontology)?;
    Ok((model, data))
}

/// Worst relative error per parameter group.
pub fn group_errors(report: &GradCheckReport) -> BTreeMap<&'static str, (f64, String)> {
    let mut out: BTreeMap<&'static str, (f64, String)> = BTreeMap::new();
    for p in &report.params {
        let e = out.entry(param_group(&p.name)).or_insert((0.0, p.name.clone()));
        if p.max_rel_err > e.0 {
            *e = (p.max_rel_err, p.name.clone());
        }
    }
    out
}

/// Finite-difference check of the full loss on [`tiny_instance`] in f64.
/// `fault` corrupts one backward rule (negative control).
pub fn gradcheck_full_model(seed: u64, eps: f64, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let (model, data) = tiny_instance(seed)?;
    let batch = [Example { dialogue: 0, turn: 0 }, Example { dialogue: 0, turn: 1 }];
    let mut store = model.params.clone();
    let mut loss_fn = |tape: &mut Tape<f64>, store: &ParamStore<f64>| -> Result<Var> {
        let mut m = model.clone();
        m.params = store.clone();
        let b = m.bind(tape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        compute_loss(tape, &b, &data, &batch, &LossOptions::deterministic(), &mut rng)
    };
    grad_check_with(&mut store, eps, &mut loss_fn, |tape| {
        if let Some(k) = fault {
            tape.inject_fault(k);
        }
    })
}
