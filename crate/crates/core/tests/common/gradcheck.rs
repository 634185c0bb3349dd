// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradient checks shared by the gradient test target and the acceptance
//! suite.

use super::*;
use emotion_steer::model::{self, PackedBatch, SteerInput, TransformerParams};
use emotion_steer::steer::{self, SteerBank, SteerInit};
use emotion_steer::tensor::{Tape, Tensor, Var};
use emotion_steer::training::compute_loss;

const SAMPLES: usize = 24;

/// `sum(out ⊙ R)` for a fixed random `R`, so every output coordinate
/// contributes with its own weight.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(random_tensor(&mut rng(seed), &shape, 1.0));
    let weighted = tape.mul(out, r).unwrap();
    tape.sum(weighted).unwrap()
}

fn check_op(name: &str, inputs: Vec<Tensor<f64>>, op: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let probes = check_gradients(&inputs, SAMPLES, 11, PRIMITIVE_STEP, |tape, v| {
        let out = op(tape, v);
        if tape.value(out).shape().is_empty() {
            out
        } else {
            project(tape, out, 99)
        }
    });
    let available: usize = inputs.iter().map(Tensor::numel).sum();
    assert_probes(name, &probes, SAMPLES.min(available), PRIMITIVE_TOLERANCE);
}

fn t(seed: u64, shape: &[usize]) -> Tensor<f64> {
    random_tensor(&mut rng(seed), shape, 2.0)
}

pub fn elementwise_and_matmul() {
    check_op("matmul", vec![t(1, &[4, 5]), t(2, &[5, 3])], |tp, v| {
        tp.matmul(v[0], v[1]).unwrap()
    });
    check_op("add", vec![t(3, &[4, 6]), t(4, &[4, 6])], |tp, v| {
        tp.add(v[0], v[1]).unwrap()
    });
    check_op("mul", vec![t(5, &[4, 6]), t(6, &[4, 6])], |tp, v| {
        tp.mul(v[0], v[1]).unwrap()
    });
    check_op("add_row", vec![t(7, &[5, 6]), t(8, &[6])], |tp, v| {
        tp.add_row(v[0], v[1]).unwrap()
    });
    check_op("scale", vec![t(9, &[5, 6])], |tp, v| tp.scale(v[0], -1.7).unwrap());
    check_op("sum", vec![t(10, &[5, 6])], |tp, v| {
        let s = tp.sum(v[0]).unwrap();
        tp.mul(s, s).unwrap()
    });
    check_op("gelu", vec![random_tensor(&mut rng(12), &[6, 6], 4.0)], |tp, v| {
        tp.gelu(v[0]).unwrap()
    });
}

pub fn normalisation_and_softmax() {
    check_op("layer_norm", vec![t(13, &[5, 8]), t(14, &[8]), t(15, &[8])], |tp, v| {
        tp.layer_norm(v[0], v[1], v[2]).unwrap()
    });
    check_op(
        "softmax_rows",
        vec![random_tensor(&mut rng(16), &[5, 7], 3.0)],
        |tp, v| tp.softmax_rows(v[0]).unwrap(),
    );
    let targets = [0, 6, 3, 3, 1];
    let mask = [true, false, true, true, true];
    check_op(
        "cross_entropy",
        vec![random_tensor(&mut rng(17), &[5, 7], 3.0)],
        |tp, v| tp.cross_entropy(v[0], &targets, &mask).unwrap(),
    );
}

pub fn row_plumbing() {
    check_op("gather_rows", vec![t(18, &[6, 5])], |tp, v| {
        tp.gather_rows(v[0], &[3, 0, 3, 5, 1]).unwrap()
    });
    check_op("scatter_rows", vec![t(19, &[4, 5])], |tp, v| {
        tp.scatter_rows(v[0], &[2, 0, 6, 3], 8).unwrap()
    });
    check_op(
        "concat_rows",
        vec![t(20, &[3, 5]), t(21, &[2, 5]), t(22, &[4, 5])],
        |tp, v| tp.concat_rows(v).unwrap(),
    );
    check_op("slice_rows", vec![t(23, &[7, 5])], |tp, v| {
        tp.slice_rows(v[0], 2, 4).unwrap()
    });
}

pub fn causal_attention() {
    let segments = [(0, 4), (4, 1), (5, 5)];
    check_op(
        "causal_attention",
        vec![t(24, &[10, 8]), t(25, &[10, 8]), t(26, &[10, 8])],
        |tp, v| tp.causal_attention(v[0], v[1], v[2], &segments, 2).unwrap(),
    );
}

pub fn steer_primitive_wrt_hidden_and_projection() {
    check_op(
        "steer",
        vec![t(27, &[5, 6]), t(28, &[6, 6]), t(29, &[6, 6])],
        |tp, v| {
            let bank = steer::BoundSteer {
                weights: vec![v[1], v[2]],
                epsilon: 0.05,
            };
            steer::steer(tp, v[0], 1, 2.5, &bank).unwrap()
        },
    );
    check_op(
        "steer_rows",
        vec![t(30, &[6, 6]), t(31, &[6, 6]), t(32, &[6, 6])],
        |tp, v| {
            let bank = steer::BoundSteer {
                weights: vec![v[1], v[2]],
                epsilon: 0.05,
            };
            steer::steer_rows(tp, v[0], &[vec![0, 4], vec![1, 2, 5]], 1.5, &bank).unwrap()
        },
    );
}

/// Every backbone tensor plus the steering bank, with gradients from one
/// backward pass, checked against `compute_loss`.
pub fn full_model_loss_wrt_backbone_and_steering() {
    let config = tiny_config();
    let mut r = rng(40);
    let layouts: Vec<_> = (0..3).map(|_| random_layout(&mut r, &config)).collect();
    let mut params = TransformerParams::<f64>::init(&config, 3).unwrap();
    // Larger weights than the training init keep gradients well above
    // rounding noise.
    for w in params.weights.refs_mut() {
        let n = w.numel();
        for (i, x) in w.data_mut().iter_mut().enumerate() {
            *x = *x * 10.0 + 0.05 * ((i * 7 + n) % 5) as f64 - 0.1;
        }
    }
    let bank = SteerBank::<f64>::init(
        config.n_emotions,
        config.d_model,
        0.01,
        SteerInit::Gaussian { std: 1.0 },
        4,
    )
    .unwrap();
    let alpha = 2.0;

    let mut tape = Tape::new();
    let weights = params.bind(&mut tape, true);
    let bound = bank.bind(&mut tape, true);
    let batch = PackedBatch::new(&layouts, &config).unwrap();
    let out = model::forward(
        &mut tape,
        &weights,
        &config,
        &batch,
        Some(SteerInput {
            bank: &bound,
            gain: alpha,
        }),
    )
    .unwrap();
    let loss = tape.cross_entropy(out.logits, &batch.targets, &batch.mask).unwrap();
    let grads = tape.backward(loss).unwrap();

    let backbone_vars: Vec<Var> = weights.named().into_iter().map(|(_, v)| *v).collect();
    let backbone: Vec<Tensor<f64>> = params.weights.named().into_iter().map(|(_, t)| t.clone()).collect();
    let backbone_grads: Vec<Tensor<f64>> = backbone_vars.iter().map(|&v| grads.wrt(v).clone()).collect();

    let mut probes = Vec::new();
    for (k, j) in sample_coordinates(&backbone, 3 * SAMPLES, 41) {
        let mut p = params.clone();
        let x = p.weights.refs_mut()[k].data()[j];
        p.weights.refs_mut()[k].data_mut()[j] = x + FD_STEP;
        let up = compute_loss(&p, Some((&bank, alpha)), &layouts).unwrap();
        p.weights.refs_mut()[k].data_mut()[j] = x - FD_STEP;
        let down = compute_loss(&p, Some((&bank, alpha)), &layouts).unwrap();
        probes.push(Probe {
            input: k,
            index: j,
            analytic: backbone_grads[k].data()[j],
            numeric: (up - down) / (2.0 * FD_STEP),
        });
    }
    assert_probes("model backbone", &probes, 3 * SAMPLES, FD_TOLERANCE);

    // Only the emotions present in the batch receive gradient.
    let present: Vec<usize> = (0..config.n_emotions)
        .filter(|e| layouts.iter().any(|l| l.emotion == *e))
        .collect();
    let steer_tensors: Vec<Tensor<f64>> = present.iter().map(|&e| bank.weights()[e].clone()).collect();
    let mut probes = Vec::new();
    for (k, j) in sample_coordinates(&steer_tensors, SAMPLES, 42) {
        let e = present[k];
        let mut b = bank.clone();
        let x = b.weights()[e].data()[j];
        b.weights_mut()[e].data_mut()[j] = x + FD_STEP;
        let up = compute_loss(&params, Some((&b, alpha)), &layouts).unwrap();
        b.weights_mut()[e].data_mut()[j] = x - FD_STEP;
        let down = compute_loss(&params, Some((&b, alpha)), &layouts).unwrap();
        probes.push(Probe {
            input: e,
            index: j,
            analytic: grads.wrt(bound.weights[e]).data()[j],
            numeric: (up - down) / (2.0 * FD_STEP),
        });
    }
    assert_probes("steering projections", &probes, SAMPLES, FD_TOLERANCE);
    for e in (0..config.n_emotions).filter(|e| !present.contains(e)) {
        let g = grads.get(bound.weights[e]);
        assert!(
            g.is_none_or(|g| g.data().iter().all(|&x| x == 0.0)),
            "emotion {e} absent from the batch"
        );
    }
}
