//! Per-slot value generation: slot-level context, GRU decoder, vocabulary and
//! two copy distributions mixed by learned weights, and the three-way slot
//! gate. All functions work on a batch of `S` slots at once (one row each).

use serde::Serialize;

use crate::corpus::{Vocabulary, DONTCARE_VALUE, EOS, NONE_VALUE};
use crate::encoder::{gru_cell, GruVars, Memory};
use crate::error::{Error, Result};
use crate::grad::{argmax, Scalar, Tape, Var};
use crate::model::Bound;

/// Slot gate classes in output order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GateClass {
    None = 0,
    Dontcare = 1,
    Gen = 2,
}

impl GateClass {
    pub const ALL: [GateClass; 3] = [GateClass::None, GateClass::Dontcare, GateClass::Gen];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Gate label implied by a gold value.
    pub fn of_value(value: &[String]) -> GateClass {
        match value {
            [v] if v == NONE_VALUE => GateClass::None,
            [v] if v == DONTCARE_VALUE => GateClass::Dontcare,
            [] => GateClass::None,
            _ => GateClass::Gen,
        }
    }
}

/// Per-pair vectors `v_s = domain_emb + slot_emb`, `[S, d]`. They serve both
/// as attention queries and as the first decoder input.
pub fn slot_embeddings<T: Scalar>(tape: &mut Tape<T>, b: &Bound, pairs: &[usize]) -> Result<Var> {
    let dom: Vec<usize> = pairs.iter().map(|&s| b.domain_of[s]).collect();
    let slot: Vec<usize> = pairs.iter().map(|&s| b.slot_of[s]).collect();
    let d = tape.embedding(b.domain_emb, &dom)?;
    let s = tape.embedding(b.slot_emb, &slot)?;
    tape.add(d, s)
}

#[derive(Clone, Copy, Debug)]
pub struct SlotContext {
    /// Attention over system positions, `[S, M]`.
    pub mu: Var,
    /// Attention over user positions, `[S, N]`.
    pub eta: Var,
    pub c_a: Var,
    pub c_u: Var,
    /// `c_a + c_u`, `[S, h]`.
    pub c: Var,
}

/// Slot-specific attention pooling of the system and user histories.
pub fn slot_context<T: Scalar>(tape: &mut Tape<T>, h_a: Var, h_u: Var, v_s: Var) -> Result<SlotContext> {
    let sa = tape.matmul_t(v_s, h_a)?;
    let mu = tape.softmax(sa, 1)?;
    let c_a = tape.matmul(mu, h_a)?;
    let su = tape.matmul_t(v_s, h_u)?;
    let eta = tape.softmax(su, 1)?;
    let c_u = tape.matmul(eta, h_u)?;
    let c = tape.add(c_a, c_u)?;
    Ok(SlotContext { mu, eta, c_a, c_u, c })
}

/// One decoder GRU step.
pub fn decode_step_hidden<T: Scalar>(tape: &mut Tape<T>, x: Var, o_prev: Var, w_d: &GruVars) -> Result<Var> {
    gru_cell(tape, x, o_prev, w_d)
}

#[derive(Clone, Copy, Debug)]
pub struct CopyDistributions {
    /// Generation distribution over the vocabulary, `[S, |V|]`.
    pub p_v: Var,
    /// Copy distribution from system positions mapped to the vocabulary.
    pub p_a: Var,
    pub p_u: Var,
    /// Position-level attention, `[S, M]` and `[S, N]`.
    pub q_a: Var,
    pub q_u: Var,
}

pub fn copy_distributions<T: Scalar>(
    tape: &mut Tape<T>,
    o: Var,
    mem: &Memory,
    embedding: Var,
) -> Result<CopyDistributions> {
    let vocab = tape.shape(embedding)[0];
    let lv = tape.matmul_t(o, embedding)?;
    let p_v = tape.softmax(lv, 1)?;
    let la = tape.matmul_t(o, mem.h_a)?;
    let q_a = tape.softmax(la, 1)?;
    let p_a = tape.scatter_add_by_word(q_a, &mem.words_a, vocab)?;
    let lu = tape.matmul_t(o, mem.h_u)?;
    let q_u = tape.softmax(lu, 1)?;
    let p_u = tape.scatter_add_by_word(q_u, &mem.words_u, vocab)?;
    Ok(CopyDistributions {
        p_v,
        p_a,
        p_u,
        q_a,
        q_u,
    })
}

/// Attention-weighted sums of context rows, `[S, h]` each.
pub fn feature_vectors<T: Scalar>(tape: &mut Tape<T>, q_a: Var, q_u: Var, h_a: Var, h_u: Var) -> Result<(Var, Var)> {
    Ok((tape.matmul(q_a, h_a)?, tape.matmul(q_u, h_u)?))
}

/// `α = σ([x, o, h^a, h^u]·W_v)` and `β = σ(ρ^a − ρ^u)` with
/// `ρ^a = [x, o, h^a]·W_c`, `ρ^u = [x, o, h^u]·W_c`. Both `[S, 1]`.
pub fn mixture_weights<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    o: Var,
    feat_a: Var,
    feat_u: Var,
    w_v: Var,
    w_c: Var,
) -> Result<(Var, Var)> {
    let all = tape.concat(&[x, o, feat_a, feat_u], 1)?;
    let la = tape.matmul(all, w_v)?;
    let alpha = tape.sigmoid(la);
    let sys = tape.concat(&[x, o, feat_a], 1)?;
    let usr = tape.concat(&[x, o, feat_u], 1)?;
    let rho_a = tape.matmul(sys, w_c)?;
    let rho_u = tape.matmul(usr, w_c)?;
    let d = tape.sub(rho_a, rho_u)?;
    let beta = tape.sigmoid(d);
    Ok((alpha, beta))
}

/// `α·P_v + (1 − α)(β·P_a + (1 − β)·P_u)` row by row.
pub fn final_distribution<T: Scalar>(
    tape: &mut Tape<T>,
    alpha: Var,
    beta: Var,
    p_v: Var,
    p_a: Var,
    p_u: Var,
) -> Result<Var> {
    tape.mixture(alpha, beta, p_v, p_a, p_u)
}

/// Three-way gate from the first-step feature vectors, `[S, 3]`.
pub fn slot_gate<T: Scalar>(tape: &mut Tape<T>, feat_a: Var, feat_u: Var, w_s: Var) -> Result<Var> {
    let f = tape.concat(&[feat_a, feat_u], 1)?;
    let logits = tape.matmul(f, w_s)?;
    tape.softmax(logits, 1)
}

/// Everything computed at one decode step.
#[derive(Clone, Copy, Debug)]
pub struct DecodeStep {
    pub x: Var,
    pub o: Var,
    pub dists: CopyDistributions,
    pub feat_a: Var,
    pub feat_u: Var,
    pub alpha: Var,
    pub beta: Var,
    pub p_final: Var,
}

#[derive(Clone, Debug)]
pub struct Decoding {
    pub context: SlotContext,
    pub gate: Var,
    pub steps: Vec<DecodeStep>,
}

/// Runs the decoder for the ontology pairs `pairs`. After step `t` (from 0),
/// `next_inputs(t, argmax_ids)` returns the token ids fed at step `t + 1`,
/// or `None` to stop. At most `max_steps` steps run.
pub fn decode<T, F>(
    tape: &mut Tape<T>,
    b: &Bound,
    mem: &Memory,
    pairs: &[usize],
    max_steps: usize,
    mut next_inputs: F,
) -> Result<Decoding>
where
    T: Scalar,
    F: FnMut(usize, &[usize]) -> Option<Vec<usize>>,
{
    if pairs.is_empty() || max_steps == 0 {
        return Err(Error::Contract("decode needs at least one pair and one step".into()));
    }
    let v_s = slot_embeddings(tape, b, pairs)?;
    let context = slot_context(tape, mem.h_a, mem.h_u, v_s)?;
    let mut x = v_s;
    let mut o = context.c;
    let mut steps = Vec::new();
    let mut gate = None;
    let cols = b.vocab_size;
    for t in 0..max_steps {
        o = decode_step_hidden(tape, x, o, &b.decoder)?;
        let dists = copy_distributions(tape, o, mem, b.embedding)?;
        let (feat_a, feat_u) = feature_vectors(tape, dists.q_a, dists.q_u, mem.h_a, mem.h_u)?;
        let (alpha, beta) = mixture_weights(tape, x, o, feat_a, feat_u, b.w_v, b.w_c)?;
        let p_final = final_distribution(tape, alpha, beta, dists.p_v, dists.p_a, dists.p_u)?;
        if t == 0 {
            gate = Some(slot_gate(tape, feat_a, feat_u, b.w_s)?);
        }
        steps.push(DecodeStep {
            x,
            o,
            dists,
            feat_a,
            feat_u,
            alpha,
            beta,
            p_final,
        });
        if t + 1 == max_steps {
            break;
        }
        let best: Vec<usize> = tape.data(p_final).chunks(cols).map(argmax).collect();
        match next_inputs(t, &best) {
            Some(ids) => x = tape.embedding(b.embedding, &ids)?,
            None => break,
        }
    }
    Ok(Decoding {
        context,
        gate: gate.expect("at least one step"),
        steps,
    })
}

/// Greedy output for one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// Emitted token ids, without the terminating EOS.
    pub tokens: Vec<usize>,
    /// Number of decode steps whose output belongs to this slot
    /// (`tokens.len() + 1` when EOS was reached).
    pub steps: usize,
    /// Hit `max_len` without emitting EOS.
    pub truncated: bool,
    pub gate: [f64; 3],
}

/// Greedy decoding (ties to the lowest id) for every pair in `pairs`; each
/// emitted token is fed back as the next input.
pub fn generate<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    mem: &Memory,
    pairs: &[usize],
    max_len: usize,
) -> Result<(Vec<Generated>, Decoding)> {
    let mut out: Vec<Generated> = pairs
        .iter()
        .map(|_| Generated {
            tokens: Vec::new(),
            steps: 0,
            truncated: true,
            gate: [0.0; 3],
        })
        .collect();
    let mut done = vec![false; pairs.len()];
    let mut record = |best: &[usize], out: &mut [Generated]| {
        for (r, &id) in best.iter().enumerate() {
            if done[r] {
                continue;
            }
            out[r].steps += 1;
            if id == EOS {
                done[r] = true;
                out[r].truncated = false;
            } else {
                out[r].tokens.push(id);
            }
        }
        done.iter().all(|&d| d)
    };
    let dec = decode(tape, b, mem, pairs, max_len, |_, best| {
        if record(best, &mut out) {
            None
        } else {
            Some(best.to_vec())
        }
    })?;
    // The callback is not invoked after the final step.
    if dec.steps.len() == max_len {
        let last = dec.steps[max_len - 1].p_final;
        let best: Vec<usize> = tape.data(last).chunks(b.vocab_size).map(argmax).collect();
        record(&best, &mut out);
    }
    let g = tape.data(dec.gate);
    for (r, gen) in out.iter_mut().enumerate() {
        for c in 0..3 {
            gen.gate[c] = g[r * 3 + c].to_f64().unwrap_or(f64::NAN);
        }
    }
    Ok((out, dec))
}

/// Greedy decoding of a single slot.
pub fn generate_value<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    mem: &Memory,
    pair: usize,
    max_len: usize,
) -> Result<(Generated, Decoding)> {
    let (mut g, d) = generate(tape, b, mem, &[pair], max_len)?;
    Ok((g.remove(0), d))
}

/// Final value string: the gate's argmax class decides between "none",
/// "dontcare" and the generated tokens (empty generation reads as "none").
pub fn resolve_state(gate: &[f64], generated: &[String]) -> String {
    match argmax(gate) {
        0 => NONE_VALUE.to_string(),
        1 => DONTCARE_VALUE.to_string(),
        _ if generated.is_empty() => NONE_VALUE.to_string(),
        _ => generated.join(" "),
    }
}

/// Decoded tokens as strings.
pub fn detokenize(vocab: &Vocabulary, ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&i| vocab.token(i).to_string()).collect()
}
