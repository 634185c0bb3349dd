// SPDX-License-Identifier: MIT OR Apache-2.0

//! Oracles shared by the integration tests: central finite differences for
//! gradients and small random fixtures.

#![allow(dead_code)]

pub mod gradcheck;
pub mod invariants;

use emotion_steer::config::RunConfig;
use emotion_steer::model::{ModelConfig, PositionalInit, SequenceLayout};
use emotion_steer::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step and tolerance for whole-model checks.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;
/// Step and tolerance for single primitives.
pub const PRIMITIVE_STEP: f64 = 1e-6;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;

/// Gradients smaller than this are compared absolutely (to
/// `tolerance * GRAD_FLOOR`). A central difference of an O(1) loss carries
/// ~1e-16/step of rounding noise, so structurally zero gradients (key
/// biases, for instance) have no meaningful relative error.
pub const GRAD_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

/// One finite-difference probe.
#[derive(Debug)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_err(&self) -> f64 {
        rel_err(self.analytic, self.numeric)
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences on `samples` coordinates spread over all inputs.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], samples: usize, seed: u64, step: f64, f: F) -> Vec<Probe>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let value = |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).item()
    };
    sample_coordinates(inputs, samples, seed)
        .into_iter()
        .map(|(input, index)| {
            let mut probe = inputs.to_vec();
            let x = probe[input].data()[index];
            probe[input].data_mut()[index] = x + step;
            let up = value(&probe);
            probe[input].data_mut()[index] = x - step;
            let down = value(&probe);
            Probe {
                input,
                index,
                analytic: analytic[input].data()[index],
                numeric: (up - down) / (2.0 * step),
            }
        })
        .collect()
}

/// Distinct `(input, index)` pairs, round-robin over the inputs.
pub fn sample_coordinates(inputs: &[Tensor<f64>], samples: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = rng(seed);
    let mut per_input: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let mut idx: Vec<usize> = (0..t.numel()).collect();
            idx.shuffle(&mut rng);
            idx
        })
        .collect();
    let mut out = Vec::new();
    while out.len() < samples && per_input.iter().any(|v| !v.is_empty()) {
        for (i, idx) in per_input.iter_mut().enumerate() {
            if out.len() < samples {
                if let Some(j) = idx.pop() {
                    out.push((i, j));
                }
            }
        }
    }
    out
}

pub fn assert_probes(what: &str, probes: &[Probe], min_samples: usize, tolerance: f64) {
    assert!(probes.len() >= min_samples, "{what}: only {} probes", probes.len());
    let informative = probes.iter().filter(|p| p.analytic.abs() > GRAD_FLOOR).count();
    assert!(
        2 * informative >= probes.len(),
        "{what}: only {informative} of {} probes have a gradient above the floor",
        probes.len()
    );
    for p in probes {
        assert!(
            p.rel_err() <= tolerance,
            "{what}: input {} index {}: analytic {:e} numeric {:e} (rel err {:e})",
            p.input,
            p.index,
            p.analytic,
            p.numeric,
            p.rel_err()
        );
    }
}

/// Small model for fast exhaustive tests.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        content_vocab: 5,
        speech_vocab: 9,
        n_emotions: 3,
        n_speakers: 2,
        max_seq_len: 40,
        dropout: 0.0,
        positional_init: PositionalInit::Normal,
    }
}

pub fn random_layout(rng: &mut ChaCha8Rng, config: &ModelConfig) -> SequenceLayout {
    let n = rng.random_range(1..=6);
    let m = rng.random_range(1..=8);
    SequenceLayout::full(
        rng.random_range(0..config.n_speakers),
        rng.random_range(0..config.n_emotions),
        (0..n).map(|_| rng.random_range(0..config.content_vocab)).collect(),
        (0..m).map(|_| rng.random_range(0..config.speech_vocab)).collect(),
    )
}

/// A complete run configuration small enough to train in milliseconds.
pub fn small_run_config() -> RunConfig {
    let mut c = RunConfig {
        seed: 21,
        ..RunConfig::default()
    };
    c.corpus.train_scripts = 12;
    c.corpus.dev_scripts = 2;
    c.corpus.test_scripts = 2;
    c.corpus.n_speakers = 2;
    c.corpus.min_script_len = 3;
    c.corpus.max_script_len = 5;
    c.model.n_speakers = 2;
    c.model.d_model = 16;
    c.model.n_layers = 1;
    c.model.n_heads = 2;
    c.model.d_ff = 32;
    c.model.max_seq_len = 24;
    c.train.pretrain.epochs = 2;
    c.train.pretrain.lr = 3e-3;
    c.train.finetune.epochs = 2;
    c.train.batch_size = 8;
    c.eval.max_len = 12;
    c.eval.bayes_samples = 2_000;
    c.validate().unwrap();
    c
}
