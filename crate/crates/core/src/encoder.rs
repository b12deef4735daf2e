//! Interactive hierarchical encoder: two parallel two-layer bidirectional GRU
//! stacks (system and user) whose initial states are taken from the other
//! stack, both across turns (lower layer) and within a turn (upper layer).

use rand_chacha::ChaCha8Rng;

use crate::corpus::word_dropout;
use crate::error::{Error, Result};
use crate::grad::{Scalar, Tape, Tensor, Var};
use crate::model::Bound;

/// One GRU direction. `w_x: [d_in, 3h]` and `b: [3h]` hold the update, reset
/// and candidate input projections; `w_hzr: [h, 2h]` the recurrent update and
/// reset projections; `w_hc: [h, h]` the recurrent candidate projection.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_x: Var,
    pub b: Var,
    pub w_hzr: Var,
    pub w_hc: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BiGruVars {
    pub fwd: GruVars,
    pub bwd: GruVars,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub sys_lower: BiGruVars,
    pub usr_lower: BiGruVars,
    pub sys_upper: BiGruVars,
    pub usr_upper: BiGruVars,
}

fn last_axis<T: Scalar>(tape: &Tape<T>, v: Var) -> usize {
    tape.shape(v).len() - 1
}

/// GRU update from a precomputed input projection `xp = x·w_x + b`.
fn gru_from_projection<T: Scalar>(tape: &mut Tape<T>, xp: Var, h: Var, p: &GruVars) -> Result<Var> {
    let hd = tape.shape(p.w_hc)[0];
    let ax = last_axis(tape, xp);
    let hp = tape.matmul(h, p.w_hzr)?;
    let x_zr = tape.narrow(xp, ax, 0, 2 * hd)?;
    let x_c = tape.narrow(xp, ax, 2 * hd, hd)?;
    let pre = tape.add(x_zr, hp)?;
    let zr = tape.sigmoid(pre);
    let ax = last_axis(tape, zr);
    let z = tape.narrow(zr, ax, 0, hd)?;
    let r = tape.narrow(zr, ax, hd, hd)?;
    let rh = tape.mul(r, h)?;
    let rc = tape.matmul(rh, p.w_hc)?;
    let pre_c = tape.add(x_c, rc)?;
    let cand = tape.tanh(pre_c);
    let diff = tape.sub(cand, h)?;
    let step = tape.mul(z, diff)?;
    tape.add(h, step)
}

/// `h' = (1 − z)⊙h + z⊙ĥ` with update gate `z`, reset gate `r` and candidate
/// `ĥ = tanh(W_c·[x, r⊙h] + b_c)`. Rows of `x: [R, d_in]` and `h: [R, h]` are
/// independent.
pub fn gru_cell<T: Scalar>(tape: &mut Tape<T>, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    let xw = tape.matmul(x, p.w_x)?;
    let xp = tape.add(xw, p.b)?;
    gru_from_projection(tape, xp, h, p)
}

/// Bidirectional pass over `x: [L, d_in]`, both directions starting from
/// `h0: [1, h]`. Returns `G: [L, h]` (forward + backward output per position)
/// and `g: [1, h]` (final forward state + final backward state).
pub fn gre<T: Scalar>(tape: &mut Tape<T>, x: Var, h0: Var, p: &BiGruVars) -> Result<(Var, Var)> {
    let len = match tape.shape(x) {
        [l, _] => *l,
        s => return Err(Error::Contract(format!("gre expects a [L, d] input, got {s:?}"))),
    };
    if len == 0 {
        return Err(Error::Contract("gre over an empty sequence".into()));
    }
    let run = |tape: &mut Tape<T>, dir: &GruVars, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Var>> {
        let xw = tape.matmul(x, dir.w_x)?;
        let xp = tape.add(xw, dir.b)?;
        let mut outs = vec![h0; len];
        let mut h = h0;
        for t in order {
            let xt = tape.narrow(xp, 0, t, 1)?;
            h = gru_from_projection(tape, xt, h, dir)?;
            outs[t] = h;
        }
        Ok(outs)
    };
    let fwd = run(tape, &p.fwd, &mut (0..len))?;
    let bwd = run(tape, &p.bwd, &mut (0..len).rev())?;
    let (gf, gb) = if len == 1 {
        (fwd[0], bwd[0])
    } else {
        (tape.concat(&fwd, 0)?, tape.concat(&bwd, 0)?)
    };
    let g_seq = tape.add(gf, gb)?;
    let g_last = tape.add(fwd[len - 1], bwd[0])?;
    Ok((g_seq, g_last))
}

/// Output of [`encode_turn`].
#[derive(Clone, Copy, Debug)]
pub struct TurnEncoding {
    pub h_a: Var,
    pub h_u: Var,
    pub last_a: Var,
    pub last_u: Var,
}

/// Encodes turn `l` from its system rows `a: [m, d]` and user rows `u: [n, d]`.
/// The lower system pass starts from the previous user context and the lower
/// user pass from the previous system context; the upper passes start from
/// the other stream's lower summary of this turn.
pub fn encode_turn<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    u: Var,
    prev_a: Var,
    prev_u: Var,
    p: &EncoderVars,
) -> Result<TurnEncoding> {
    let (ga, ga_last) = gre(tape, a, prev_u, &p.sys_lower)?;
    let (gu, gu_last) = gre(tape, u, prev_a, &p.usr_lower)?;
    let (h_a, last_a) = gre(tape, ga, gu_last, &p.sys_upper)?;
    let (h_u, last_u) = gre(tape, gu, ga_last, &p.usr_upper)?;
    Ok(TurnEncoding {
        h_a,
        h_u,
        last_a,
        last_u,
    })
}

/// Token ids of one turn.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnIds {
    pub system: Vec<usize>,
    pub user: Vec<usize>,
}

/// Training-time input noise.
pub struct Noise<'a> {
    pub word_dropout: f64,
    pub embed_dropout: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Encoded dialogue: context rows for all system (`h_a: [M, h]`) and user
/// (`h_u: [N, h]`) positions with the word id at each position.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub h_a: Var,
    pub h_u: Var,
    pub words_a: Vec<usize>,
    pub words_u: Vec<usize>,
    /// Final contexts after the last turn, `[1, h]` each.
    pub last_a: Var,
    pub last_u: Var,
    /// Rows of `h_a` / `h_u` covered by turns `0..=l`, per `l`.
    pub rows_a: Vec<usize>,
    pub rows_u: Vec<usize>,
}

/// The part of an encoded dialogue visible at a given turn.
#[derive(Clone, Debug)]
pub struct Memory {
    pub h_a: Var,
    pub h_u: Var,
    pub words_a: Vec<usize>,
    pub words_u: Vec<usize>,
}

impl EncoderOutput {
    pub fn turns(&self) -> usize {
        self.rows_a.len()
    }

    /// History up to and including turn `l`. Encoding is causal, so these rows
    /// equal those of encoding only turns `0..=l`.
    pub fn memory<T: Scalar>(&self, tape: &mut Tape<T>, l: usize) -> Result<Memory> {
        if l >= self.turns() {
            return Err(Error::Index {
                op: "memory",
                index: l,
                size: self.turns(),
            });
        }
        let (m, n) = (self.rows_a[l], self.rows_u[l]);
        let full = l + 1 == self.turns();
        let h_a = if full {
            self.h_a
        } else {
            tape.narrow(self.h_a, 0, 0, m)?
        };
        let h_u = if full {
            self.h_u
        } else {
            tape.narrow(self.h_u, 0, 0, n)?
        };
        Ok(Memory {
            h_a,
            h_u,
            words_a: self.words_a[..m].to_vec(),
            words_u: self.words_u[..n].to_vec(),
        })
    }

    pub fn full_memory(&self) -> Memory {
        Memory {
            h_a: self.h_a,
            h_u: self.h_u,
            words_a: self.words_a.clone(),
            words_u: self.words_u.clone(),
        }
    }
}

/// Rolls [`encode_turn`] over `turns` from zero initial contexts. With
/// `noise`, word dropout replaces encoder input ids by UNK and embedding
/// dropout is applied to the input rows; the copy map keeps the original ids.
pub fn encode_dialogue<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    turns: &[TurnIds],
    mut noise: Option<Noise<'_>>,
) -> Result<EncoderOutput> {
    if turns.is_empty() {
        return Err(Error::Contract("encode_dialogue needs at least one turn".into()));
    }
    let hd = tape.shape(b.decoder.w_hc)[0];
    let zero = tape.constant(Tensor::zeros(&[1, hd]));
    let (mut prev_a, mut prev_u) = (zero, zero);
    let (mut blocks_a, mut blocks_u) = (Vec::new(), Vec::new());
    let (mut words_a, mut words_u) = (Vec::new(), Vec::new());
    let (mut rows_a, mut rows_u) = (Vec::new(), Vec::new());
    for turn in turns {
        if turn.system.is_empty() || turn.user.is_empty() {
            return Err(Error::Contract("turn with an empty utterance".into()));
        }
        let mut embed = |tape: &mut Tape<T>, ids: &[usize]| -> Result<Var> {
            match noise.as_mut() {
                Some(n) => {
                    let dropped = word_dropout(ids, n.word_dropout, n.rng);
                    let rows = tape.embedding(b.embedding, &dropped)?;
                    tape.dropout(rows, n.embed_dropout, n.rng)
                }
                None => tape.embedding(b.embedding, ids),
            }
        };
        let a = embed(tape, &turn.system)?;
        let u = embed(tape, &turn.user)?;
        let enc = encode_turn(tape, a, u, prev_a, prev_u, &b.encoder)?;
        blocks_a.push(enc.h_a);
        blocks_u.push(enc.h_u);
        words_a.extend_from_slice(&turn.system);
        words_u.extend_from_slice(&turn.user);
        rows_a.push(words_a.len());
        rows_u.push(words_u.len());
        prev_a = enc.last_a;
        prev_u = enc.last_u;
    }
    let join = |tape: &mut Tape<T>, blocks: &[Var]| -> Result<Var> {
        if blocks.len() == 1 {
            Ok(blocks[0])
        } else {
            tape.concat(blocks, 0)
        }
    };
    let h_a = join(tape, &blocks_a)?;
    let h_u = join(tape, &blocks_u)?;
    Ok(EncoderOutput {
        h_a,
        h_u,
        words_a,
        words_u,
        last_a: prev_a,
        last_u: prev_u,
        rows_a,
        rows_u,
    })
}
