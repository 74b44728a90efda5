use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut tape = Tape::new();
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let y = tape.matmul(i, x).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[11.0]);
    assert_eq!(tape.shape(c), &[1, 1]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_gradient_of_sum_is_ones_times_b_transposed() {
    let a_val = t(&[3, 4], &(0..12).map(|i| (i as f64 * 0.3).sin()).collect::<Vec<_>>());
    let b_val = t(&[4, 2], &(0..8).map(|i| (i as f64 * 0.7).cos()).collect::<Vec<_>>());
    let mut tape = Tape::new();
    let a = tape.leaf(a_val);
    let b = tape.leaf(b_val.clone());
    let c = tape.matmul(a, b).unwrap();
    let loss = tape.sum(c);
    tape.backward(loss, &mut ParamStore::new()).unwrap();
    let ga = tape.grad(a).unwrap();
    for i in 0..3 {
        for p in 0..4 {
            let want = b_val.data()[p * 2] + b_val.data()[p * 2 + 1];
            assert!((ga[i * 4 + p] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.softmax(x, None).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(t(&[1], &[5.0]));
    let y = tape.softmax(x, None).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0]);

    // exp(x_i) / Σ exp(x_j) for [1, 2, 3]
    let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.softmax(x, None).unwrap();
    close(tape.value(y).data(), &[0.09003, 0.24473, 0.66524], 1e-5);
}

#[test]
fn softmax_masking() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[1.0, 50.0, 2.0, 3.0, 1.0, -4.0]));
    let mask = [true, false, true, false, true, true];
    let y = tape.softmax(x, Some(&mask)).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[1], 0.0);
    assert_eq!(v[3], 0.0);
    close(&[v[0] + v[2], v[4] + v[5]], &[1.0, 1.0], 1e-12);

    let err = tape.softmax(x, Some(&[true, true, true, false, false, false])).unwrap_err();
    assert!(matches!(err, Error::DegenerateGroup { group: 1 }));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::ones(vec![4]));
    let b = tape.constant(Tensor::zeros(vec![4]));
    let x = tape.constant(Tensor::full(vec![1, 4], 3.5));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let g = tape.constant(Tensor::ones(vec![2]));
    let b = tape.constant(Tensor::zeros(vec![2]));
    let x = tape.constant(t(&[2], &[-1.0, 1.0]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    close(tape.value(y).data(), &[-1.0, 1.0], 1e-9);

    let e = tape.constant(Tensor::zeros(vec![0]));
    let x = tape.constant(Tensor::zeros(vec![3, 0]));
    assert!(matches!(tape.layer_norm(x, e, e, 1e-5), Err(Error::EmptyFeature)));
}

#[test]
fn relu_and_maxpool_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[-2.0, 0.0, 3.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 3.0]);

    let x = tape.constant(t(&[1, 2, 2], &[1.0, 5.0, 4.0, 2.0]));
    let y = tape.maxpool_time(x, &[true, true]).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0, 5.0]);

    let x = tape.constant(t(&[1, 2, 2], &[1.0, 5.0, 9.0, 9.0]));
    let y = tape.maxpool_time(x, &[true, false]).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 5.0]);

    assert!(tape.maxpool_time(x, &[false, false]).is_err());
}

#[test]
fn dropout_modes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(vec![1000]));
    let same = tape.dropout(x, 0.5, None).unwrap();
    assert_eq!(same, x);

    let mut rng = seeded_rng(3);
    let y = tape.dropout(x, 0.25, Some(&mut rng)).unwrap();
    let v = tape.value(y).data();
    let scale = 1.0 / 0.75;
    assert!(v.iter().all(|&e| e == 0.0 || (e - scale).abs() < 1e-12));
    let kept = v.iter().filter(|&&e| e > 0.0).count();
    assert!((650..850).contains(&kept), "{kept}");

    assert!(matches!(tape.dropout(x, 1.0, None), Err(Error::Config(_))));
    assert!(matches!(tape.dropout(x, -0.1, None), Err(Error::Config(_))));
}

#[test]
fn embedding_out_of_range() {
    let mut tape = Tape::<f64>::new();
    let table = tape.constant(Tensor::zeros(vec![4, 2]));
    let err = tape.embedding(table, &[0, 4], &[1, 2]).unwrap_err();
    assert!(matches!(err, Error::Index { index: 4, size: 4, .. }));
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::new();
    let w = store.add("w", t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true).unwrap();
    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let loss = tape.sum(wv);
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(w).grad.as_ref().unwrap().data(), &[1.0; 4]);

    // loss = sum(W·x) → grad(x) = Wᵀ·1
    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let x = tape.leaf(t(&[2, 1], &[0.5, -1.0]));
    let y = tape.matmul(wv, x).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![2]));
    assert!(matches!(
        tape.backward(x, &mut ParamStore::new()),
        Err(Error::NonScalarLoss(s)) if s == vec![2]
    ));
}

#[test]
fn repeated_backward_accumulates_and_zeroing_resets() {
    let mut store = ParamStore::new();
    let w = store.add("w", t(&[3], &[0.2, -0.4, 1.5]), true).unwrap();
    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let sq = tape.mul(wv, wv).unwrap();
    let th = tape.tanh(sq);
    let loss = tape.sum(th);

    tape.backward(loss, &mut store).unwrap();
    let first = store.get(w).grad.clone().unwrap();
    tape.backward(loss, &mut store).unwrap();
    let twice = store.get(w).grad.clone().unwrap();
    for (a, b) in first.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }

    store.zero_grad();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(w).grad.as_ref().unwrap(), &first);
}

#[test]
fn every_reachable_parameter_gets_a_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::<f64>::ones(vec![2, 2]), true).unwrap();
    let b = store.add("b", Tensor::ones(vec![2]), false).unwrap();
    let unused = store.add("unused", Tensor::ones(vec![1]), true).unwrap();
    let mut tape = Tape::new();
    let (av, bv) = (tape.param(&store, a), tape.param(&store, b));
    let y = tape.add_bias(av, bv).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss, &mut store).unwrap();
    assert!(store.get(a).grad.is_some());
    assert_eq!(store.get(b).grad.as_ref().unwrap().data(), &[2.0, 2.0]);
    assert!(store.get(unused).grad.is_none());
    assert_eq!(store.get(a).grad.as_ref().unwrap().shape(), &[2, 2]);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic(
            rows in 1usize..4,
            cols in 1usize..6,
            seed in any::<u64>(),
        ) {
            use rand::Rng;
            let mut rng = seeded_rng(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let mask: Vec<bool> = (0..rows * cols).map(|i| i % cols == 0 || rng.gen_bool(0.6)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![rows, cols], data).unwrap());
            let y = tape.softmax(x, Some(&mask)).unwrap();
            for (r, row) in tape.value(y).data().chunks(cols).enumerate() {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                for (j, &p) in row.iter().enumerate() {
                    prop_assert!(p >= 0.0);
                    if !mask[r * cols + j] {
                        prop_assert_eq!(p, 0.0);
                    }
                }
            }
        }

        #[test]
        fn layer_norm_rows_are_standardized(
            d in 2usize..10,
            seed in any::<u64>(),
        ) {
            use rand::Rng;
            let mut rng = seeded_rng(seed);
            let data: Vec<f64> = (0..3 * d).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![3, d], data).unwrap());
            let g = tape.constant(Tensor::ones(vec![d]));
            let b = tape.constant(Tensor::zeros(vec![d]));
            let y = tape.layer_norm(x, g, b, 1e-9).unwrap();
            for row in tape.value(y).data().chunks(d) {
                let mean: f64 = row.iter().sum::<f64>() / d as f64;
                let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }
}
