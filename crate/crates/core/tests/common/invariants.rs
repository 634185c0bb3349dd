// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causality and loss-mask checks shared by the invariant test target and
//! the acceptance suite.

use super::*;
use emotion_steer::model::{self, ModelConfig, PackedBatch, SequenceLayout, SteerInput, TransformerParams};
use emotion_steer::steer::{SteerBank, SteerInit};
use emotion_steer::tensor::{Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const LAYOUTS: usize = 50;

fn fixture() -> (ModelConfig, TransformerParams<f64>, SteerBank<f64>) {
    let config = tiny_config();
    let params = TransformerParams::init(&config, 5).unwrap();
    let bank = SteerBank::init(
        config.n_emotions,
        config.d_model,
        0.01,
        SteerInit::Gaussian { std: 1.0 },
        6,
    )
    .unwrap();
    (config, params, bank)
}

/// Logits of `layout` with random noise added to the input embeddings of
/// every position after `cut`.
fn logits_with_future_noise(
    params: &TransformerParams<f64>,
    bank: &SteerBank<f64>,
    layout: &SequenceLayout,
    cut: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<f64> {
    let config = &params.config;
    let mut tape = Tape::new();
    let weights = params.bind(&mut tape, false);
    let bound = bank.bind(&mut tape, false);
    let batch = PackedBatch::new(std::slice::from_ref(layout), config).unwrap();
    let emb = model::embed(&mut tape, &weights, config, &batch).unwrap();
    let mut noise = Tensor::zeros(&[layout.len(), config.d_model]);
    for x in &mut noise.data_mut()[(cut + 1) * config.d_model..] {
        *x = rng.random_range(-3.0..3.0);
    }
    let noise = tape.constant(noise);
    let emb = tape.add(emb, noise).unwrap();
    let steer = Some(SteerInput {
        bank: &bound,
        gain: 2.0,
    });
    let out = model::forward_embedded(&mut tape, &weights, config, emb, &batch, steer, None).unwrap();
    tape.value(out.logits).clone()
}

/// The same layout with every token after `cut` resampled within its kind.
fn resample_future(layout: &SequenceLayout, cut: usize, config: &ModelConfig, rng: &mut ChaCha8Rng) -> SequenceLayout {
    let mut out = layout.clone();
    let text_start = 4;
    for (j, x) in out.script.iter_mut().enumerate() {
        if text_start + j > cut {
            *x = (*x + rng.random_range(1..config.content_vocab)) % config.content_vocab;
        }
    }
    let speech_start = layout.boundaries().turn + 1;
    for (k, y) in out.speech.iter_mut().enumerate() {
        if speech_start + k > cut {
            *y = (*y + rng.random_range(1..config.speech_vocab)) % config.speech_vocab;
        }
    }
    if cut < 1 {
        out.speaker = (out.speaker + 1) % config.n_speakers;
    }
    if cut < 2 {
        out.emotion = (out.emotion + 1) % config.n_emotions;
    }
    out
}

fn rows_equal(a: &Tensor<f64>, b: &Tensor<f64>, rows: usize) -> bool {
    let c = a.cols();
    a.data()[..rows * c]
        .iter()
        .zip(&b.data()[..rows * c])
        .all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn future_positions_never_reach_the_past() {
    let (config, params, bank) = fixture();
    let mut rng = rng(100);
    for _ in 0..LAYOUTS {
        let layout = random_layout(&mut rng, &config);
        let base = model::logits_for(&params, &layout, Some((&bank, 2.0))).unwrap();
        for cut in 0..layout.len() {
            let noisy = logits_with_future_noise(&params, &bank, &layout, cut, &mut rng);
            assert!(
                rows_equal(&base, &noisy, cut + 1),
                "embedding noise after {cut} leaked into {layout:?}"
            );
            if cut + 1 < layout.len() {
                assert!(
                    !rows_equal(&base, &noisy, layout.len()),
                    "noise after {cut} had no effect at all"
                );
            }
            // Resampled tokens keep the packed shapes, so the rows before
            // the cut must be reproduced exactly.
            let other = resample_future(&layout, cut, &config, &mut rng);
            let moved = model::logits_for(&params, &other, Some((&bank, 2.0))).unwrap();
            assert!(
                rows_equal(&base, &moved, cut + 1),
                "tokens after {cut} leaked into {layout:?}"
            );
        }
    }
}

pub fn packed_sequences_do_not_interact() {
    let (config, params, bank) = fixture();
    let mut rng = rng(101);
    for _ in 0..LAYOUTS {
        let layouts: Vec<_> = (0..3).map(|_| random_layout(&mut rng, &config)).collect();
        let mut tape = Tape::new();
        let weights = params.bind(&mut tape, false);
        let bound = bank.bind(&mut tape, false);
        let batch = PackedBatch::new(&layouts, &config).unwrap();
        let steer = Some(SteerInput {
            bank: &bound,
            gain: 2.0,
        });
        let out = model::forward(&mut tape, &weights, &config, &batch, steer).unwrap();
        let packed = tape.value(out.logits);
        for (layout, &(start, len)) in layouts.iter().zip(&batch.segments) {
            let alone = model::logits_for(&params, layout, Some((&bank, 2.0))).unwrap();
            let c = alone.cols();
            let got = &packed.data()[start * c..(start + len) * c];
            // Packing changes GEMM blocking, so equality is to rounding.
            for (x, y) in got.iter().zip(alone.data()) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
            }
        }
    }
}

pub fn unsupervised_positions_get_exactly_zero_gradient() {
    let (config, params, bank) = fixture();
    let mut rng = rng(102);
    for _ in 0..LAYOUTS {
        let layouts: Vec<_> = (0..2).map(|_| random_layout(&mut rng, &config)).collect();
        let mut tape = Tape::new();
        let weights = params.bind(&mut tape, true);
        let bound = bank.bind(&mut tape, true);
        let batch = PackedBatch::new(&layouts, &config).unwrap();
        let emb = model::embed(&mut tape, &weights, &config, &batch).unwrap();
        tape.retain_grad(emb).unwrap();
        let steer = Some(SteerInput {
            bank: &bound,
            gain: 2.0,
        });
        let out = model::forward_embedded(&mut tape, &weights, &config, emb, &batch, steer, None).unwrap();
        tape.retain_grad(out.logits).unwrap();
        let loss = tape.cross_entropy(out.logits, &batch.targets, &batch.mask).unwrap();
        let grads = tape.backward(loss).unwrap();

        let g_logits = grads.wrt(out.logits);
        for (r, &supervised) in batch.mask.iter().enumerate() {
            let row = g_logits.row(r);
            if supervised {
                assert!(row.iter().any(|&x| x != 0.0), "supervised row {r} has no gradient");
            } else {
                assert!(
                    row.iter().all(|&x| x == 0.0),
                    "unsupervised row {r} has gradient {row:?}"
                );
            }
        }
        // The Ⓔ input only feeds its own (unsupervised) output row, and
        // nothing after it exists to attend to it.
        let g_emb = grads.wrt(emb);
        for &(start, len) in &batch.segments {
            let last = g_emb.row(start + len - 1);
            assert!(last.iter().all(|&x| x == 0.0), "Ⓔ embedding received gradient {last:?}");
            assert!(g_emb.row(start).iter().any(|&x| x != 0.0));
        }
    }
}

pub fn targets_of_unsupervised_rows_do_not_change_the_loss() {
    let (config, params, bank) = fixture();
    let mut rng = rng(103);
    for _ in 0..LAYOUTS {
        let layout = random_layout(&mut rng, &config);
        let batch = PackedBatch::new(std::slice::from_ref(&layout), &config).unwrap();
        let loss = |targets: &[usize]| {
            let mut tape = Tape::new();
            let weights = params.bind(&mut tape, false);
            let bound = bank.bind(&mut tape, false);
            let steer = Some(SteerInput {
                bank: &bound,
                gain: 2.0,
            });
            let out = model::forward(&mut tape, &weights, &config, &batch, steer).unwrap();
            let l = tape.cross_entropy(out.logits, targets, &batch.mask).unwrap();
            tape.value(l).item()
        };
        let mut scrambled = batch.targets.clone();
        for (t, &m) in scrambled.iter_mut().zip(&batch.mask) {
            if !m {
                *t = rng.random_range(0..config.output_vocab());
            }
        }
        assert_eq!(loss(&batch.targets).to_bits(), loss(&scrambled).to_bits());
    }
}
