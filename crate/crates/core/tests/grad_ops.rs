//! Primitive ops: hand-computed values and finite-difference oracles.

use pin_core::grad::{relative_error, OpKind, Tape, Tensor, Var};
use pin_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Scalarizes `build`'s output with a fixed random projection, then compares
/// the tape gradient of every input element against central differences of
/// the forward pass. Returns the worst relative error.
fn fd_check(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> f64 {
    let eps = 1e-6;
    let forward = |vals: &[Tensor<f64>], tape: &mut Tape<f64>| -> (Vec<Var>, Var) {
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(tape, &vars);
        let shape = tape.shape(out).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = tape.constant(Tensor::uniform(&shape, 1.0, &mut rng));
        let prod = tape.mul(out, proj).unwrap();
        let loss = tape.sum(prod);
        (vars, loss)
    };
    let mut tape = Tape::new();
    let (vars, loss) = forward(inputs, &mut tape);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let eval = |delta: f64| {
                let mut vals = inputs.to_vec();
                vals[i].data_mut()[j] += delta;
                let mut tp = Tape::new();
                let (_, l) = forward(&vals, &mut tp);
                tp.item(l)
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    worst
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut tape = Tape::new();
    let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let out = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(out), &[1, 1]);
    assert_eq!(tape.data(out), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(Tensor::zeros(&[3, 4]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![3, 4]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4, 2])];
    let err = fd_check(&inputs, &|tp, v| tp.matmul(v[0], v[1]).unwrap(), 7);
    assert!(err < 1e-6, "rel err {err}");

    // Vector forms.
    let inputs = [rand_t(&mut rng, &[4]), rand_t(&mut rng, &[4, 3])];
    assert!(fd_check(&inputs, &|tp, v| tp.matmul(v[0], v[1]).unwrap(), 8) < 1e-6);
    let inputs = [rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4])];
    assert!(fd_check(&inputs, &|tp, v| tp.matmul(v[0], v[1]).unwrap(), 9) < 1e-6);
}

#[test]
fn elementwise_values() {
    let mut tape: Tape<f64> = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    let th = tape.tanh(z);
    assert_eq!(tape.item(s), 0.5);
    assert_eq!(tape.item(th), 0.0);

    let big = tape.constant(t(&[2], &[1e3, -1e3]));
    let s = tape.sigmoid(big);
    assert_eq!(tape.data(s), &[1.0, 0.0]);

    let mut tape32: Tape<f32> = Tape::new();
    let big = tape32.constant(Tensor::vector(vec![1e3_f32, -1e3, 88.0, -88.0]));
    let s = tape32.sigmoid(big);
    let reference = [1.0, 0.0, 1.0 / (1.0 + (-88.0f64).exp()), 1.0 / (1.0 + 88.0f64.exp())];
    for (&got, want) in tape32.data(s).iter().zip(reference) {
        assert!(got.is_finite());
        assert!((got as f64 - want).abs() < 1e-7, "{got} vs {want}");
    }
}

#[test]
fn broadcasting_is_leading_only() {
    let mut tape: Tape<f64> = Tape::new();
    let m = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let row = tape.constant(t(&[3], &[10.0, 20.0, 30.0]));
    let out = tape.add(m, row).unwrap();
    assert_eq!(tape.data(out), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);

    let col = tape.constant(t(&[2, 1], &[1.0, 2.0]));
    assert!(matches!(tape.add(m, col), Err(Error::Dimension { .. })));
    let wrong = tape.constant(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.mul(m, wrong), Err(Error::Dimension { .. })));
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_t(&mut rng, &[2, 3]);
    let b = rand_t(&mut rng, &[3]);
    let s = rand_t(&mut rng, &[1]);
    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<Build>)> = vec![
        (
            "add",
            vec![a.clone(), b.clone()],
            Box::new(|tp, v| tp.add(v[0], v[1]).unwrap()),
        ),
        (
            "sub",
            vec![b.clone(), a.clone()],
            Box::new(|tp, v| tp.sub(v[0], v[1]).unwrap()),
        ),
        (
            "mul",
            vec![a.clone(), b.clone()],
            Box::new(|tp, v| tp.mul(v[0], v[1]).unwrap()),
        ),
        (
            "scalar mul",
            vec![s.clone(), a.clone()],
            Box::new(|tp, v| tp.mul(v[0], v[1]).unwrap()),
        ),
        ("sigmoid", vec![a.clone()], Box::new(|tp, v| tp.sigmoid(v[0]))),
        ("tanh", vec![a.clone()], Box::new(|tp, v| tp.tanh(v[0]))),
        ("exp", vec![a.clone()], Box::new(|tp, v| tp.exp(v[0]))),
        ("scale", vec![a.clone()], Box::new(|tp, v| tp.scale(v[0], -2.5))),
        ("one_minus", vec![a.clone()], Box::new(|tp, v| tp.one_minus(v[0]))),
    ];
    for (name, inputs, build) in cases {
        let err = fd_check(&inputs, build.as_ref(), 3);
        assert!(err < 1e-6, "{name}: rel err {err}");
    }
}

#[test]
fn softmax_values() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    for &v in tape.data(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
    let y = tape.softmax(x, 0).unwrap();
    for (&got, want) in tape.data(y).iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((got - want).abs() < 1e-15);
    }
}

#[test]
fn softmax_along_each_axis() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(t(&[2, 2], &[0.0, 0.0, 2f64.ln(), 0.0]));
    let rows = tape.softmax(x, 1).unwrap();
    let want = [0.5, 0.5, 2.0 / 3.0, 1.0 / 3.0];
    for (g, w) in tape.data(rows).iter().zip(want) {
        assert!((g - w).abs() < 1e-15);
    }
    let cols = tape.softmax(x, 0).unwrap();
    let want = [1.0 / 3.0, 0.5, 2.0 / 3.0, 0.5];
    for (g, w) in tape.data(cols).iter().zip(want) {
        assert!((g - w).abs() < 1e-15);
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_t(&mut rng, &[5]);
    assert!(fd_check(&[x], &|tp, v| tp.softmax(v[0], 0).unwrap(), 4) < 1e-6);
    let x = rand_t(&mut rng, &[3, 4]);
    assert!(fd_check(&[x.clone()], &|tp, v| tp.softmax(v[0], 0).unwrap(), 5) < 1e-6);
    assert!(fd_check(&[x], &|tp, v| tp.softmax(v[0], 1).unwrap(), 6) < 1e-6);
}

#[test]
fn concat_values_and_gradients() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.leaf(t(&[2], &[1.0, 2.0]));
    let b = tape.leaf(t(&[1], &[3.0]));
    let c = tape.concat(&[a, b], 0).unwrap();
    assert_eq!(tape.data(c), &[1.0, 2.0, 3.0]);
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap(), &[1.0, 1.0]);
    assert_eq!(g.get(b).unwrap(), &[1.0]);

    let parts: Vec<Var> = (0..4).map(|_| tape.constant(Tensor::zeros(&[400]))).collect();
    let wide = tape.concat(&parts, 0).unwrap();
    assert_eq!(tape.shape(wide), &[1600]);

    let x = tape.constant(Tensor::zeros(&[2, 3]));
    let y = tape.constant(Tensor::zeros(&[3, 3]));
    assert!(matches!(tape.concat(&[x, y], 1), Err(Error::Dimension { .. })));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [rand_t(&mut rng, &[2, 3]), rand_t(&mut rng, &[2, 2])];
    assert!(fd_check(&inputs, &|tp, v| tp.concat(&[v[0], v[1]], 1).unwrap(), 1) < 1e-6);
    let inputs = [rand_t(&mut rng, &[3]), rand_t(&mut rng, &[3])];
    assert!(fd_check(&inputs, &|tp, v| tp.stack(&[v[0], v[1], v[0]]).unwrap(), 2) < 1e-6);
}

#[test]
fn narrow_and_row_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_t(&mut rng, &[3, 4]);
    assert!(fd_check(&[x.clone()], &|tp, v| tp.narrow(v[0], 1, 1, 2).unwrap(), 1) < 1e-6);
    assert!(fd_check(&[x], &|tp, v| tp.row(v[0], 2).unwrap(), 1) < 1e-6);
}

#[test]
fn embedding_lookup_rows_and_accumulation() {
    let mut tape: Tape<f64> = Tape::new();
    let table = tape.leaf(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let first = tape.embedding(table, &[0]).unwrap();
    assert_eq!(tape.data(first), &[1.0, 0.0, 0.0]);

    let rep = tape.embedding(table, &[2, 2]).unwrap();
    let s = tape.sum(rep);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(table).unwrap(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0]);

    match tape.embedding(table, &[3]) {
        Err(Error::Index { index, .. }) => assert_eq!(index, 3),
        other => panic!("expected index error, got {other:?}"),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tab = rand_t(&mut rng, &[5, 3]);
    let err = fd_check(&[tab], &|tp, v| tp.embedding(v[0], &[4, 1, 4, 0]).unwrap(), 2);
    assert!(err < 1e-6);
}

#[test]
fn scatter_add_by_word_merges_mass() {
    let mut tape: Tape<f64> = Tape::new();
    let w = tape.constant(t(&[2], &[0.5, 0.5]));
    let out = tape.scatter_add_by_word(w, &[7, 7], 10).unwrap();
    let mut want = vec![0.0; 10];
    want[7] = 1.0;
    assert_eq!(tape.data(out), want.as_slice());

    let w = tape.constant(t(&[3], &[0.2, 0.3, 0.5]));
    let out = tape.scatter_add_by_word(w, &[1, 2, 1], 4).unwrap();
    assert!((tape.data(out)[1] - 0.7).abs() < 1e-15);
    assert!((tape.data(out)[2] - 0.3).abs() < 1e-15);

    assert!(matches!(
        tape.scatter_add_by_word(w, &[1, 2, 4], 4),
        Err(Error::Index { index: 4, .. })
    ));
}

#[test]
fn scatter_add_conserves_simplex_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let len = rng.random_range(1..200);
        let vocab = rng.random_range(1..50);
        let raw: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f32> = raw.iter().map(|v| (v / total) as f32).collect();
        let words: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        let mut tape: Tape<f32> = Tape::new();
        let w = tape.constant(Tensor::vector(weights));
        let out = tape.scatter_add_by_word(w, &words, vocab).unwrap();
        let mass: f32 = tape.data(out).iter().sum();
        assert!((mass - 1.0).abs() <= 1e-6, "mass {mass}");
    }

    let x = rand_t(&mut rng, &[6]);
    assert!(
        fd_check(
            &[x],
            &|tp, v| tp.scatter_add_by_word(v[0], &[0, 3, 3, 1, 0, 2], 5).unwrap(),
            3
        ) < 1e-6
    );
}

#[test]
fn cross_entropy_values_and_gradient() {
    let mut tape: Tape<f64> = Tape::new();
    let p = tape.constant(t(&[3], &[1.0, 0.0, 0.0]));
    let l = tape.cross_entropy(p, 0).unwrap();
    assert!(tape.item(l).abs() <= 1e-9);
    let u = tape.constant(t(&[4], &[0.25; 4]));
    for target in 0..4 {
        let l = tape.cross_entropy(u, target).unwrap();
        assert!((tape.item(l) - 4f64.ln()).abs() < 1e-10);
    }
    assert!(matches!(tape.cross_entropy(u, 4), Err(Error::Index { .. })));

    // Feed a softmax so the input stays on the simplex under perturbation.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_t(&mut rng, &[5]);
    let build: &Build = &|tp, v| {
        let p = tp.softmax(v[0], 0).unwrap();
        tp.cross_entropy(p, 3).unwrap()
    };
    assert!(fd_check(&[x.clone()], build, 1) < 1e-6);
    let direct: &Build = &|tp, v| {
        let p = tp.sigmoid(v[0]);
        tp.cross_entropy(p, 1).unwrap()
    };
    assert!(fd_check(&[x], direct, 1) < 1e-6);
}

#[test]
fn backward_simple_cases() {
    let mut tape: Tape<f64> = Tape::new();
    let w = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]));
    let s = tape.sum(w);
    assert_eq!(tape.backward(s).unwrap().get(w).unwrap(), &[1.0, 1.0, 1.0]);

    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq);
    assert_eq!(tape.backward(s).unwrap().get(w).unwrap(), &[1.0, -2.0, 4.0]);

    assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
}

#[test]
fn fan_out_accumulates() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(t(&[2], &[0.3, -0.7]));
    let a = tape.tanh(x);
    let b = tape.sigmoid(x);
    let both = tape.add(a, b).unwrap();
    let loss = tape.sum(both);
    let g = tape.backward(loss).unwrap().get(x).unwrap().to_vec();

    let mut t1: Tape<f64> = Tape::new();
    let x1 = t1.leaf(t(&[2], &[0.3, -0.7]));
    let a1 = t1.tanh(x1);
    let l1 = t1.sum(a1);
    let g1 = t1.backward(l1).unwrap().get(x1).unwrap().to_vec();
    let mut t2: Tape<f64> = Tape::new();
    let x2 = t2.leaf(t(&[2], &[0.3, -0.7]));
    let b2 = t2.sigmoid(x2);
    let l2 = t2.sum(b2);
    let g2 = t2.backward(l2).unwrap().get(x2).unwrap().to_vec();
    for i in 0..2 {
        assert!((g[i] - (g1[i] + g2[i])).abs() < 1e-15);
    }
}

#[test]
fn unreachable_leaves_get_no_gradient() {
    let mut tape: Tape<f64> = Tape::new();
    let used = tape.leaf(t(&[2], &[1.0, 2.0]));
    let unused = tape.leaf(t(&[2], &[3.0, 4.0]));
    let l = tape.sum(used);
    let g = tape.backward(l).unwrap();
    assert!(g.get(unused).is_none());
}

#[test]
fn dropout_is_inverted_and_identity_at_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0; 10_000]));
    assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
    let y = tape.dropout(x, 0.3, &mut rng).unwrap();
    let kept = tape.data(y).iter().filter(|&&v| v != 0.0).count();
    assert!((kept as f64 / 10_000.0 - 0.7).abs() < 0.02);
    for &v in tape.data(y) {
        assert!(v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12);
    }
    let mean: f64 = tape.data(y).iter().sum::<f64>() / 10_000.0;
    assert!((mean - 1.0).abs() < 0.05);
}

#[test]
fn mixture_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = [
        rand_t(&mut rng, &[1]),
        rand_t(&mut rng, &[1]),
        rand_t(&mut rng, &[6]),
        rand_t(&mut rng, &[6]),
        rand_t(&mut rng, &[6]),
    ];
    let build: &Build = &|tp, v| tp.mixture(v[0], v[1], v[2], v[3], v[4]).unwrap();
    assert!(fd_check(&inputs, build, 11) < 1e-6);
}

#[test]
fn random_shapes_match_finite_differences() {
    // Composite of every primitive on 50 random shapes/seeds.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for seed in 0..50 {
        let m = rng.random_range(1..5);
        let k = rng.random_range(1..5);
        let n = rng.random_range(1..5);
        let vocab = rng.random_range(2..6);
        let ids: Vec<usize> = (0..m).map(|_| rng.random_range(0..vocab)).collect();
        let words: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
        let inputs = [
            rand_t(&mut rng, &[vocab, k]),
            rand_t(&mut rng, &[k, n]),
            rand_t(&mut rng, &[n]),
        ];
        let build = move |tp: &mut Tape<f64>, v: &[Var]| {
            let e = tp.embedding(v[0], &ids).unwrap();
            let h = tp.matmul(e, v[1]).unwrap();
            let h = tp.add(h, v[2]).unwrap();
            let h = tp.tanh(h);
            let sm = tp.softmax(h, 1).unwrap();
            let r = tp.row(sm, 0).unwrap();
            let sc = tp.scatter_add_by_word(r, &words, vocab).unwrap();
            let sg = tp.sigmoid(v[2]);
            tp.concat(&[sc, sg], 0).unwrap()
        };
        let err = fd_check(&inputs, &build, seed);
        assert!(err < 1e-5, "seed {seed}: rel err {err}");
    }
}

#[test]
fn injected_fault_perturbs_gradient() {
    let mut tape: Tape<f64> = Tape::new();
    tape.inject_fault(OpKind::Tanh);
    let x = tape.leaf(t(&[1], &[0.4]));
    let y = tape.tanh(x);
    let g = tape.backward(y).unwrap().get(x).unwrap()[0];
    let exact = 1.0 - 0.4f64.tanh().powi(2);
    assert!((g - 1.1 * exact).abs() < 1e-12);
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.leaf(Tensor::uniform(&[4, 4], 1.0, &mut rng));
        let b = tape.leaf(Tensor::uniform(&[4], 1.0, &mut rng));
        let c = tape.matmul(a, b).unwrap();
        let d = tape.dropout(c, 0.3, &mut rng).unwrap();
        let s = tape.softmax(d, 0).unwrap();
        let l = tape.cross_entropy(s, 2).unwrap();
        tape.item(l).to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn matmul_t_matches_matmul_with_transposed_operand() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = rand_t(&mut rng, &[3, 4]);
    let b = rand_t(&mut rng, &[5, 4]);
    let mut bt = vec![0.0; 20];
    for i in 0..5 {
        for j in 0..4 {
            bt[j * 5 + i] = b.data()[i * 4 + j];
        }
    }
    let mut tape = Tape::new();
    let (va, vb, vbt) = (
        tape.constant(a.clone()),
        tape.constant(b.clone()),
        tape.constant(t(&[4, 5], &bt)),
    );
    let x = tape.matmul_t(va, vb).unwrap();
    let y = tape.matmul(va, vbt).unwrap();
    for (p, q) in tape.data(x).iter().zip(tape.data(y)) {
        assert!((p - q).abs() < 1e-12);
    }
    let build: &Build = &|tp, v| tp.matmul_t(v[0], v[1]).unwrap();
    assert!(fd_check(&[a, b], build, 4) < 1e-6);
}

#[test]
fn row_batched_mixture_scatter_and_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut simplex_rows = |rows: usize, n: usize| {
        let raw: Vec<f64> = (0..rows * n).map(|_| rng.random_range(0.1..1.0)).collect();
        let mut out = raw.clone();
        for r in 0..rows {
            let s: f64 = raw[r * n..(r + 1) * n].iter().sum();
            out[r * n..(r + 1) * n].iter_mut().for_each(|v| *v /= s);
        }
        t(&[rows, n], &out)
    };
    let (pv, pa, pu) = (simplex_rows(3, 6), simplex_rows(3, 6), simplex_rows(3, 6));
    let alpha = t(&[3, 1], &[0.2, 0.5, 0.9]);
    let beta = t(&[3, 1], &[0.7, 0.1, 0.4]);

    let mut tape = Tape::new();
    let vars: Vec<Var> = [&alpha, &beta, &pv, &pa, &pu]
        .iter()
        .map(|x| tape.constant((*x).clone()))
        .collect();
    let mixed = tape.mixture(vars[0], vars[1], vars[2], vars[3], vars[4]).unwrap();
    for r in 0..3 {
        let (a, b) = (alpha.data()[r], beta.data()[r]);
        for i in 0..6 {
            let k = r * 6 + i;
            let want = a * pv.data()[k] + (1.0 - a) * (b * pa.data()[k] + (1.0 - b) * pu.data()[k]);
            assert!((tape.data(mixed)[k] - want).abs() < 1e-12);
        }
    }
    let build: &Build = &|tp, v| tp.mixture(v[0], v[1], v[2], v[3], v[4]).unwrap();
    let inputs = [alpha, beta, pv.clone(), pa, pu];
    assert!(fd_check(&inputs, build, 5) < 1e-6);

    let words = [4usize, 1, 4, 0, 2, 1];
    let build: &Build = &|tp, v| tp.scatter_add_by_word(v[0], &[4, 1, 4, 0, 2, 1], 5).unwrap();
    assert!(fd_check(std::slice::from_ref(&pv), build, 6) < 1e-6);
    let x = tape.constant(pv.clone());
    let sc = tape.scatter_add_by_word(x, &words, 5).unwrap();
    assert_eq!(tape.shape(sc), &[3, 5]);
    for r in 0..3 {
        let row: f64 = tape.data(sc)[r * 5..(r + 1) * 5].iter().sum();
        assert!((row - 1.0).abs() < 1e-12);
    }

    let targets = [Some(2), None, Some(5)];
    let ce = tape.cross_entropy_rows(x, &targets).unwrap();
    let want = -(pv.data()[2] + 1e-12).ln() - (pv.data()[12 + 5] + 1e-12).ln();
    assert!((tape.item(ce) - want).abs() < 1e-12);
    let build: &Build = &|tp, v| tp.cross_entropy_rows(v[0], &[Some(2), None, Some(5)]).unwrap();
    assert!(fd_check(&[pv], build, 7) < 1e-6);
}
