// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward semantics, error contracts and properties of the tensor engine.

mod common;

use emotion_steer::tensor::{AdamW, AdamWConfig, Tape, Tensor};
use emotion_steer::Error;
use proptest::prelude::*;

fn m(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_zero_and_shape_errors() {
    let mut tape = Tape::<f64>::new();
    let i = tape.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let a = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let p = tape.matmul(i, a).unwrap();
    assert_eq!(tape.value(p), &m(&[&[1.0, 2.0], &[3.0, 4.0]]));

    let row = tape.constant(m(&[&[1.0, 2.0]]));
    let zeros = tape.constant(m(&[&[0.0], &[0.0]]));
    let p = tape.matmul(row, zeros).unwrap();
    assert_eq!(tape.value(p).data(), &[0.0]);

    let err = tape
        .matmul(zeros, row)
        .map(|_| ())
        .and_then(|_| tape.matmul(zeros, a).map(|_| ()));
    let err = err.unwrap_err().to_string();
    assert!(err.contains("[2, 1]") && err.contains("[2, 2]"), "{err}");
}

#[test]
fn matmul_gradient_is_broadcast_row_sums() {
    let mut r = common::rng(1);
    let a0 = common::random_tensor(&mut r, &[3, 4], 2.0);
    let b0 = common::random_tensor(&mut r, &[4, 5], 2.0);
    let mut tape = Tape::new();
    let a = tape.param(a0.clone());
    let b = tape.constant(b0.clone());
    let p = tape.matmul(a, b).unwrap();
    let s = tape.sum(p).unwrap();
    let grads = tape.backward(s).unwrap();
    let g = grads.wrt(a);
    for i in 0..3 {
        for k in 0..4 {
            let row_sum: f64 = b0.row(k).iter().sum();
            assert!((g.get(i, k) - row_sum).abs() < 1e-12);
        }
    }
    let probes = common::check_gradients(&[a0], 12, 2, common::PRIMITIVE_STEP, |tape, v| {
        let b = tape.constant(b0.clone());
        let p = tape.matmul(v[0], b).unwrap();
        tape.sum(p).unwrap()
    });
    for p in &probes {
        assert!(p.rel_err() <= common::PRIMITIVE_TOLERANCE, "{p:?}");
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(m(&[&[0.0; 4], &[1000.0, 0.0, 0.0, 0.0]]));
    let s = tape.softmax_rows(x).unwrap();
    let v = tape.value(s);
    assert_eq!(v.row(0), &[0.25; 4]);
    assert!((v.get(1, 0) - 1.0).abs() < 1e-9 && v.row(1)[1..].iter().all(|&p| p < 1e-9));
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let uniform = tape.constant(Tensor::zeros(&[3, 8]));
    let l = tape.cross_entropy(uniform, &[0, 5, 7], &[true; 3]).unwrap();
    assert!((tape.value(l).item() - 8f64.ln()).abs() < 1e-12);

    let mut peaked = Tensor::zeros(&[3, 8]);
    for (r, t) in [2, 0, 6].into_iter().enumerate() {
        peaked.data_mut()[r * 8 + t] = 50.0;
    }
    let peaked = tape.constant(peaked);
    let l = tape.cross_entropy(peaked, &[2, 0, 6], &[true; 3]).unwrap();
    assert!(tape.value(l).item() <= 1e-6);

    // −log σ computed by hand for each row.
    let two = tape.constant(m(&[&[1.0, 0.0], &[0.0, 2.0]]));
    let l = tape.cross_entropy(two, &[0, 1], &[true, true]).unwrap();
    let row0 = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    let row1 = -(2f64.exp() / (1.0 + 2f64.exp())).ln();
    assert!((tape.value(l).item() - (row0 + row1) / 2.0).abs() < 1e-12);

    let err = tape.cross_entropy(two, &[0, 1], &[false, false]).unwrap_err();
    assert!(matches!(err, Error::NoSupervisedPositions));
    assert!(err.to_string().contains("no supervised positions"));
    assert!(tape.cross_entropy(two, &[0, 2], &[true, true]).is_err());
    assert!(tape.cross_entropy(two, &[0], &[true]).is_err());
}

#[test]
fn masked_rows_have_identically_zero_gradient() {
    let mut r = common::rng(3);
    let logits = common::random_tensor(&mut r, &[6, 5], 2.0);
    let mask = [true, false, true, false, false, true];
    let mut tape = Tape::new();
    let x = tape.param(logits);
    let l = tape.cross_entropy(x, &[1, 2, 3, 4, 0, 1], &mask).unwrap();
    let g = tape.backward(l).unwrap();
    for (row, &on) in mask.iter().enumerate() {
        let gr = g.wrt(x).row(row);
        assert_eq!(gr.iter().all(|&v| v == 0.0), !on, "row {row}: {gr:?}");
    }
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(&[1], &[3.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(x).data(), &[6.0]);
    // The tape was cleared: old variables are rejected.
    assert!(matches!(tape.sum(x), Err(Error::NotOnTape(_))));

    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap());
    let c = tape.constant(Tensor::scalar(4.0));
    let l = tape.sum(c).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(w).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));

    let mut other = Tape::<f64>::new();
    let foreign = other.param(Tensor::scalar(1.0));
    let mut tape = Tape::<f64>::new();
    assert!(tape.backward(foreign).is_err());
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut r = common::rng(4);
        let mut tape = Tape::<f32>::new();
        let q = tape.constant(common::random_tensor(&mut r, &[7, 8], 2.0).cast());
        let k = tape.constant(common::random_tensor(&mut r, &[7, 8], 2.0).cast());
        let v = tape.constant(common::random_tensor(&mut r, &[7, 8], 2.0).cast());
        let a = tape.causal_attention(q, k, v, &[(0, 3), (3, 4)], 2).unwrap();
        let g = tape.gelu(a).unwrap();
        tape.value(g).clone()
    };
    assert!(run().bit_eq(&run()));
}

#[test]
fn adamw_descends_a_quadratic() {
    let config = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::<f64>::new(config, &[1]);
    let mut w = Tensor::from_f64(&[1], &[0.0]).unwrap();
    for _ in 0..100 {
        let g = Tensor::from_f64(&[1], &[2.0 * (w.data()[0] - 2.0)]).unwrap();
        opt.step(&mut [("w", &mut w)], &[&g], 0.1).unwrap();
    }
    assert!((w.data()[0] - 2.0).abs() < 0.05, "{}", w.data()[0]);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 1..12), 1..6)) {
        let cols = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(cols, 0.0); r }).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        for r in 0..rows.len() {
            let row = tape.value(s).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised(data in prop::collection::vec(-50f64..50.0, 16)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[2, 8], data).unwrap());
        let gain = tape.constant(Tensor::full(&[8], 1.0));
        let bias = tape.constant(Tensor::zeros(&[8]));
        let y = tape.layer_norm(x, gain, bias).unwrap();
        for r in 0..2 {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 8.0;
            prop_assert!(var <= 1.0 + 1e-9);
        }
    }
}
