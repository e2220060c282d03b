use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_params, GradCheckOptions};
use super::*;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Projects a tensor to a scalar with fixed random weights so every output
/// element carries a distinct gradient.
fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(x).to_vec();
    let w = rand_vec(&mut rng, shape.iter().product());
    let w = tape.constant(&shape, w).unwrap();
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

#[test]
fn matmul_identity() {
    let mut t = Tape::<f64>::new();
    let id = t
        .constant(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.])
        .unwrap();
    let m: Vec<f64> = (1..=6).map(f64::from).collect();
    let mv = t.constant(&[3, 2], m.clone()).unwrap();
    let out = t.matmul(id, mv).unwrap();
    assert_eq!(t.value(out), &m[..]);
}

#[test]
fn matmul_hand_example() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
    let b = t.constant(&[2, 1], vec![1., 1.]).unwrap();
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.shape(c), &[2, 1]);
    assert_eq!(t.value(c), &[3., 7.]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(&[2, 3], vec![0.; 6]).unwrap();
    let b = t.constant(&[2, 3], vec![0.; 6]).unwrap();
    assert!(matches!(t.matmul(a, b), Err(crate::Error::Dimension(_))));
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    store.push("a", &[4, 5], rand_vec(&mut rng, 20));
    store.push("b", &[5, 3], rand_vec(&mut rng, 15));
    let report = check_params(
        &store,
        |t, p| {
            let c = t.matmul(p[0], p[1])?;
            Ok(project(t, c, 11))
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn softmax_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&[3], vec![0., 0., 0.]).unwrap();
    let y = t.softmax(x, 0).unwrap();
    for &v in t.value(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = t.constant(&[2], vec![1000., 1000.]).unwrap();
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y), &[0.5, 0.5]);

    // Direct exp-normalize in 64 bits, no max shift.
    let x = t.constant(&[3], vec![1., 2., 3.]).unwrap();
    let y = t.softmax(x, 0).unwrap();
    let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
    for (i, &v) in t.value(y).iter().enumerate() {
        let expect = ((i + 1) as f64).exp() / z;
        assert!((v - expect).abs() < 1e-15, "{v} vs {expect}");
    }
}

#[test]
fn softmax_over_leading_axis() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&[2, 3], vec![1., 2., 3., 1., 2., 3.]).unwrap();
    let y = t.softmax(x, 0).unwrap();
    for &v in t.value(y) {
        assert!((v - 0.5).abs() < 1e-15);
    }
    assert!(t.softmax(x, 2).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::<f64>::new();
    let g = t.constant(&[3], vec![1.; 3]).unwrap();
    let b = t.constant(&[3], vec![0.; 3]).unwrap();
    let x = t.constant(&[1, 3], vec![5., 5., 5.]).unwrap();
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(t.value(y), &[0., 0., 0.]);

    // (x - 2) / sqrt(2/3)
    let x = t.constant(&[1, 3], vec![1., 2., 3.]).unwrap();
    let y = t.layer_norm(x, g, b, 1e-12).unwrap();
    let s = (2.0f64 / 3.0).sqrt();
    let expect = [-1.0 / s, 0.0, 1.0 / s];
    for (v, e) in t.value(y).iter().zip(expect) {
        assert!((v - e).abs() < 1e-9);
    }
    assert!((expect[2] - 1.2247).abs() < 1e-4);
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    store.push("x", &[3, 6], rand_vec(&mut rng, 18));
    store.push("gain", &[6], rand_vec(&mut rng, 6));
    store.push("bias", &[6], rand_vec(&mut rng, 6));
    let report = check_params(
        &store,
        |t, p| {
            let y = t.layer_norm(p[0], p[1], p[2], 1e-5)?;
            Ok(project(t, y, 5))
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn leaky_relu_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&[3], vec![0., -1., 3.5]).unwrap();
    let y = t.leaky_relu(x, 0.2);
    assert_eq!(t.value(y), &[0., -0.2, 3.5]);
}

#[test]
fn dropout_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = Tape::<f64>::new();
    let x = t.constant(&[4], vec![1., 2., 3., 4.]).unwrap();
    assert_eq!(t.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(t.dropout(x, 0.3, false, &mut rng).unwrap(), x);
    assert!(t.dropout(x, 1.0, true, &mut rng).is_err());

    let n = 100_000;
    let big = t.constant(&[n], vec![1.0; n]).unwrap();
    let y = t.dropout(big, 0.3, true, &mut rng).unwrap();
    let survivors = t.value(y).iter().filter(|&&v| v != 0.0).count();
    let frac = survivors as f64 / n as f64;
    assert!((frac - 0.7).abs() < 0.01, "survivor fraction {frac}");
    for &v in t.value(y) {
        assert!(v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12);
    }
}

#[test]
fn dropout_preserves_expectation() {
    // Mean over many draws of one element stays within 3 standard errors.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let trials = 20_000;
    let mut t = Tape::<f64>::new();
    let x = t.constant(&[trials], vec![2.5; trials]).unwrap();
    let y = t.dropout(x, 0.3, true, &mut rng).unwrap();
    let vals = t.value(y);
    let mean = vals.iter().sum::<f64>() / trials as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials as f64 - 1.0);
    let se = (var / trials as f64).sqrt();
    assert!((mean - 2.5).abs() < 3.0 * se, "mean {mean}, se {se}");
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::<f64>::new();
    let l = t.constant(&[1, 2], vec![0., 0.]).unwrap();
    for label in 0..2 {
        let loss = t.cross_entropy(l, &[label]).unwrap();
        assert!((t.value(loss)[0] - 2f64.ln()).abs() < 1e-12);
    }
    let l = t.constant(&[1, 2], vec![100., -100.]).unwrap();
    let loss = t.cross_entropy(l, &[0]).unwrap();
    assert!(t.value(loss)[0].abs() < 1e-12);
    assert!(matches!(t.cross_entropy(l, &[2]), Err(crate::Error::Input(_))));
}

#[test]
fn cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    store.push("logits", &[5, 2], rand_vec(&mut rng, 10));
    let report = check_params(
        &store,
        |t, p| t.cross_entropy(p[0], &[0, 1, 1, 0, 1]),
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn adam_zero_gradient_no_decay_is_noop() {
    let mut store = ParamStore::<f64>::new();
    store.push("w", &[3], vec![1.0, -2.0, 0.5]);
    let before = store.clone();
    let mut adam = AdamState::new(AdamConfig::with_lr(0.1, 0.0), &store);
    adam.step(&mut store, &[vec![0.0; 3]]).unwrap();
    assert_eq!(store, before);
    assert_eq!(adam.step_count(), 1);
}

#[test]
fn adam_first_step_closed_form() {
    // m̂ = g, v̂ = g², so Δθ = lr·g/(|g| + ε).
    let mut store = ParamStore::<f64>::new();
    store.push("w", &[1], vec![0.0]);
    let cfg = AdamConfig::with_lr(0.1, 0.0);
    let mut adam = AdamState::new(cfg, &store);
    adam.step(&mut store, &[vec![1.0]]).unwrap();
    let expected = -0.1 * 1.0 / (1.0 + cfg.epsilon);
    assert!((store.get(0).value[0] - expected).abs() < 1e-15);
}

#[test]
fn adam_weight_decay_direction() {
    let mut store = ParamStore::<f64>::new();
    store.push("w", &[2], vec![2.0, -3.0]);
    let mut adam = AdamState::new(AdamConfig::with_lr(0.01, 0.1), &store);
    adam.step(&mut store, &[vec![0.0, 0.0]]).unwrap();
    let w = &store.get(0).value;
    assert!(w[0] < 2.0 && w[1] > -3.0);
}

#[test]
fn shared_subexpressions_accumulate() {
    // f = sum(x ⊙ x) + sum(x): df/dx = 2x + 1.
    let mut t = Tape::<f64>::new();
    let x = t.variable(&[3], vec![1., -2., 0.5]).unwrap();
    let sq = t.mul(x, x).unwrap();
    let s1 = t.sum(sq);
    let s2 = t.sum(x);
    let f = t.add(s1, s2).unwrap();
    t.backward(f).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[3., -3., 2.]);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::<f64>::new();
        let a = t.variable(&[3, 4], rand_vec(&mut rng, 12)).unwrap();
        let b = t.variable(&[4, 2], rand_vec(&mut rng, 8)).unwrap();
        let c = t.matmul(a, b).unwrap();
        let s = t.softmax(c, 1).unwrap();
        let l = t.cross_entropy(s, &[0, 1, 0]).unwrap();
        t.backward(l).unwrap();
        let first = t.grad(a).unwrap().to_vec();
        t.backward(l).unwrap();
        assert_eq!(first, t.grad(a).unwrap());
        first
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_needs_scalar() {
    let mut t = Tape::<f64>::new();
    let x = t.variable(&[2], vec![1., 2.]).unwrap();
    assert!(t.backward(x).is_err());
}

#[test]
fn masked_softmax_zeroes_masked_entries() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&[2, 3], vec![1., 5., 2., 0., 0., 0.]).unwrap();
    let mask = [true, false, true, false, true, false];
    let y = t.masked_softmax(x, &mask).unwrap();
    let v = t.value(y);
    assert_eq!(v[1], 0.0);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    assert_eq!(&v[3..], &[0.0, 1.0, 0.0]);
    assert!(t.masked_softmax(x, &[false; 6]).is_err());
}

/// Every differentiable op, composed into one small graph.
fn composite(t: &mut Tape<f64>, p: &[Var]) -> crate::Result<Var> {
    let h = t.matmul(p[0], p[1])?; // 4x3
    let h = t.add_row(h, p[2])?;
    let g = t.gelu(h);
    let l = t.leaky_relu(g, 0.2);
    let ht = t.transpose(l)?; // 3x4
    let ht = t.scale(ht, 0.7);
    let o = t.add_outer(p[3], p[4])?; // 3x4
    let s = t.add(ht, o)?;
    let sm = t.softmax(s, 1)?;
    let mask: Vec<bool> = (0..12).map(|i| i % 5 != 1).collect();
    let ms = t.masked_softmax(s, &mask)?;
    let m = t.mul(sm, ms)?;
    let sig = t.sigmoid(p[3]);
    let sr = t.scale_rows(m, sig)?;
    let sl = t.slice_cols(sr, 1, 2)?; // 3x2
    let top = t.slice_rows(sr, 0, 1)?; // 1x4
    let ln = t.layer_norm(top, p[5], p[6], 1e-5)?;
    let cc = t.concat_cols(&[sl, sl])?; // 3x4
    let cr = t.concat_rows(&[cc, ln])?; // 4x4
    let mr = t.mean_rows(cr)?; // 1x4
    let r = t.reshape(mr, &[2, 2])?;
    let mc = t.mul_const(r, vec![1.0, 0.5, 2.0, -1.0])?;
    let ce = t.cross_entropy(mc, &[1, 0])?;
    let s2 = t.sum(cr);
    let s2 = t.scale(s2, 0.1);
    t.add(ce, s2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.push("a", &[4, 5], rand_vec(&mut rng, 20));
        store.push("b", &[5, 3], rand_vec(&mut rng, 15));
        store.push("bias", &[3], rand_vec(&mut rng, 3));
        store.push("col", &[3], rand_vec(&mut rng, 3));
        store.push("row", &[4], rand_vec(&mut rng, 4));
        store.push("gain", &[4], rand_vec(&mut rng, 4));
        store.push("lnb", &[4], rand_vec(&mut rng, 4));
        let report = check_params(&store, composite, GradCheckOptions::default()).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{:?}", report);
    }

    #[test]
    fn softmax_rows_positive_and_normalized(
        vals in proptest::collection::vec(-50.0f64..50.0, 12),
        axis in 0usize..2,
    ) {
        let mut t = Tape::<f64>::new();
        let x = t.constant(&[3, 4], vals).unwrap();
        let y = t.softmax(x, axis).unwrap();
        let v = t.value(y);
        prop_assert!(v.iter().all(|&p| p > 0.0));
        if axis == 1 {
            for r in 0..3 {
                let s: f64 = v[r * 4..r * 4 + 4].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        } else {
            for c in 0..4 {
                let s: f64 = (0..3).map(|r| v[r * 4 + c]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
