use pin_core::encoder::{encode_dialogue, Memory};
use pin_core::generator::{
    copy_distributions, feature_vectors, final_distribution, generate, mixture_weights, resolve_state, slot_context,
    slot_gate, GateClass,
};
use pin_core::grad::{softmax, Tape, Tensor};
use pin_core::train::tiny_instance;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rows(t: &[f64], width: usize) -> Vec<&[f64]> {
    t.chunks(width).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn slot_context_matches_naive_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, n, h, s) = (5, 3, 4, 2);
    let ha = Tensor::<f64>::uniform(&[m, h], 1.0, &mut rng);
    let hu = Tensor::<f64>::uniform(&[n, h], 1.0, &mut rng);
    let vs = Tensor::<f64>::uniform(&[s, h], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (a, u, v) = (
        tape.constant(ha.clone()),
        tape.constant(hu.clone()),
        tape.constant(vs.clone()),
    );
    let ctx = slot_context(&mut tape, a, u, v).unwrap();
    for (r, q) in rows(vs.data(), h).into_iter().enumerate() {
        let mut expect = vec![0.0; h];
        for hist in [&ha, &hu] {
            let scores: Vec<f64> = rows(hist.data(), h).iter().map(|row| dot(q, row)).collect();
            let w = softmax(&scores);
            for (i, row) in rows(hist.data(), h).into_iter().enumerate() {
                for j in 0..h {
                    expect[j] += w[i] * row[j];
                }
            }
        }
        for j in 0..h {
            assert!((tape.data(ctx.c)[r * h + j] - expect[j]).abs() < 1e-12);
        }
    }
    let c_sum: Vec<f64> = tape
        .data(ctx.c_a)
        .iter()
        .zip(tape.data(ctx.c_u))
        .map(|(x, y)| x + y)
        .collect();
    assert_eq!(tape.data(ctx.c), c_sum.as_slice());
}

#[test]
fn single_position_and_zero_query() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ha = Tensor::<f64>::uniform(&[1, 3], 1.0, &mut rng);
    let hu = Tensor::<f64>::uniform(&[4, 3], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (a, u) = (tape.constant(ha.clone()), tape.constant(hu.clone()));
    let v = tape.constant(Tensor::zeros(&[1, 3]));
    let ctx = slot_context(&mut tape, a, u, v).unwrap();
    assert_eq!(tape.data(ctx.mu), &[1.0]);
    assert_eq!(tape.data(ctx.c_a), ha.data());
    for j in 0..3 {
        let mean = (0..4).map(|i| hu.data()[i * 3 + j]).sum::<f64>() / 4.0;
        assert!((tape.data(ctx.c_u)[j] - mean).abs() < 1e-12);
    }
    assert!(tape.data(ctx.eta).iter().all(|&w| (w - 0.25).abs() < 1e-15));
}

fn memory(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, words_a: Vec<usize>, words_u: Vec<usize>, h: usize) -> Memory {
    let h_a = tape.constant(Tensor::uniform(&[words_a.len(), h], 1.0, rng));
    let h_u = tape.constant(Tensor::uniform(&[words_u.len(), h], 1.0, rng));
    Memory {
        h_a,
        h_u,
        words_a,
        words_u,
    }
}

#[test]
fn copy_mass_lands_on_position_words() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let (vocab, h) = (9, 4);
    let mem = memory(&mut tape, &mut rng, vec![5, 7, 5, 2], vec![8, 8, 3], h);
    let emb = tape.constant(Tensor::uniform(&[vocab, h], 1.0, &mut rng));
    let o = tape.constant(Tensor::uniform(&[2, h], 1.0, &mut rng));
    let d = copy_distributions(&mut tape, o, &mem, emb).unwrap();
    for r in 0..2 {
        let q_a = &tape.data(d.q_a)[r * 4..(r + 1) * 4];
        let q_u = &tape.data(d.q_u)[r * 3..(r + 1) * 3];
        let p_a = &tape.data(d.p_a)[r * vocab..(r + 1) * vocab];
        let p_u = &tape.data(d.p_u)[r * vocab..(r + 1) * vocab];
        for w in 0..vocab {
            let ea: f64 = mem
                .words_a
                .iter()
                .zip(q_a)
                .filter(|(&x, _)| x == w)
                .map(|(_, q)| q)
                .sum();
            let eu: f64 = mem
                .words_u
                .iter()
                .zip(q_u)
                .filter(|(&x, _)| x == w)
                .map(|(_, q)| q)
                .sum();
            assert!((p_a[w] - ea).abs() < 1e-15);
            assert!((p_u[w] - eu).abs() < 1e-15);
        }
        let o_row = &tape.data(o)[r * h..(r + 1) * h];
        let logits: Vec<f64> = rows(tape.data(emb), h).iter().map(|e| dot(o_row, e)).collect();
        let p_v = softmax(&logits);
        for w in 0..vocab {
            assert!((tape.data(d.p_v)[r * vocab + w] - p_v[w]).abs() < 1e-15);
        }
    }
}

#[test]
fn features_are_attention_weighted_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let mem = memory(&mut tape, &mut rng, vec![4, 5], vec![6, 7, 8], 3);
    let q_a = tape.constant(Tensor::from_f64(&[1, 2], &[0.25, 0.75]).unwrap());
    let q_u = tape.constant(Tensor::from_f64(&[1, 3], &[0.0, 1.0, 0.0]).unwrap());
    let (fa, fu) = feature_vectors(&mut tape, q_a, q_u, mem.h_a, mem.h_u).unwrap();
    let ha = tape.data(mem.h_a).to_vec();
    for j in 0..3 {
        assert!((tape.data(fa)[j] - (0.25 * ha[j] + 0.75 * ha[3 + j])).abs() < 1e-15);
    }
    assert_eq!(tape.data(fu), &tape.data(mem.h_u)[3..6]);
}

#[test]
fn mixture_weight_degenerate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 3;
    let mut tape = Tape::new();
    let mut r = |tape: &mut Tape<f64>| tape.constant(Tensor::uniform(&[2, h], 1.0, &mut rng));
    let (x, o, fa) = (r(&mut tape), r(&mut tape), r(&mut tape));
    let w_v = tape.constant(Tensor::zeros(&[4 * h, 1]));
    let w_c = tape.constant(Tensor::uniform(&[3 * h, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(6)));
    let (alpha, beta) = mixture_weights(&mut tape, x, o, fa, fa, w_v, w_c).unwrap();
    assert_eq!(tape.data(alpha), &[0.5, 0.5]);
    assert_eq!(tape.data(beta), &[0.5, 0.5]);
}

#[test]
fn final_distribution_is_the_pointwise_mixture() {
    let mut tape = Tape::new();
    let alpha = tape.constant(Tensor::from_f64(&[1, 1], &[0.2]).unwrap());
    let beta = tape.constant(Tensor::from_f64(&[1, 1], &[0.7]).unwrap());
    let pv = tape.constant(Tensor::from_f64(&[1, 3], &[0.5, 0.5, 0.0]).unwrap());
    let pa = tape.constant(Tensor::from_f64(&[1, 3], &[0.0, 0.0, 1.0]).unwrap());
    let pu = tape.constant(Tensor::from_f64(&[1, 3], &[0.0, 1.0, 0.0]).unwrap());
    let p = final_distribution(&mut tape, alpha, beta, pv, pa, pu).unwrap();
    let expect = [0.1, 0.1 + 0.8 * 0.3, 0.8 * 0.7];
    for (a, b) in tape.data(p).iter().zip(expect) {
        let a: f64 = *a;
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn gate_is_a_simplex_in_class_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::new();
    let fa = tape.constant(Tensor::uniform(&[2, 2], 1.0, &mut rng));
    let fu = tape.constant(Tensor::uniform(&[2, 2], 1.0, &mut rng));
    let mut w = Tensor::zeros(&[4, 3]);
    w.data_mut()[2] = 50.0;
    w.data_mut()[5] = 50.0;
    let w_s = tape.constant(w);
    let g = slot_gate(&mut tape, fa, fu, w_s).unwrap();
    for row in tape.data(g).chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let ord: Vec<usize> = GateClass::ALL.iter().map(|c| c.index()).collect();
    assert_eq!(ord, vec![0, 1, 2]);
}

#[test]
fn resolve_state_examples() {
    let toks = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    assert_eq!(resolve_state(&[0.8, 0.1, 0.1], &toks("european")), "none");
    assert_eq!(resolve_state(&[0.1, 0.8, 0.1], &toks("european")), "dontcare");
    assert_eq!(
        resolve_state(&[0.1, 0.1, 0.8], &toks("modern european")),
        "modern european"
    );
    assert_eq!(resolve_state(&[0.1, 0.1, 0.8], &[]), "none");
    assert_eq!(GateClass::of_value(&toks("dontcare")), GateClass::Dontcare);
    assert_eq!(GateClass::of_value(&toks("none")), GateClass::None);
    assert_eq!(GateClass::of_value(&toks("north")), GateClass::Gen);
}

#[test]
fn greedy_generation_is_deterministic_with_consistent_traces() {
    let (model, data) = tiny_instance(12).unwrap();
    let run = || {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let enc = encode_dialogue(&mut tape, &b, &data[0].turns, None).unwrap();
        let mem = enc.memory(&mut tape, 1).unwrap();
        let (gens, dec) = generate(&mut tape, &b, &mem, &[0, 1, 2], 6).unwrap();
        (gens, dec.steps.len())
    };
    let (a, steps) = run();
    assert_eq!(a, run().0);
    for g in &a {
        if g.truncated {
            assert_eq!(g.steps, 6);
            assert_eq!(g.tokens.len(), 6);
        } else {
            assert_eq!(g.steps, g.tokens.len() + 1);
        }
        assert!(g.steps <= steps);
        assert!((g.gate.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decode_distributions_are_simplices(seed in any::<u64>(), turn in 0usize..2) {
        let (model, data) = tiny_instance(seed).unwrap();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let enc = encode_dialogue(&mut tape, &b, &data[0].turns, None).unwrap();
        let mem = enc.memory(&mut tape, turn).unwrap();
        let (_, dec) = generate(&mut tape, &b, &mem, &[0, 1, 2], 3).unwrap();
        let vocab = model.vocab.len();
        for st in &dec.steps {
            for (v, width) in [(st.dists.p_v, vocab), (st.dists.p_a, vocab), (st.dists.p_u, vocab),
                               (st.p_final, vocab), (st.dists.q_a, mem.words_a.len()), (st.dists.q_u, mem.words_u.len())] {
                for row in tape.data(v).chunks(width) {
                    prop_assert!(row.iter().all(|&p| p >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
            for &a in tape.data(st.alpha).iter().chain(tape.data(st.beta)) {
                prop_assert!(a > 0.0 && a < 1.0);
            }
        }
    }
}
