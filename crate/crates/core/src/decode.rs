// SPDX-License-Identifier: MIT OR Apache-2.0

//! Incremental decoding with per-sequence key/value caches.
//!
//! [`Decoder`] feeds one position per sequence per step, so sampling `m`
//! tokens costs `O(m)` row evaluations instead of re-running the whole
//! prefix. Several sequences advance together to keep the matrix products
//! reasonably sized. Arithmetic mirrors the tape forward pass operation by
//! operation; results agree with it up to matrix-product rounding.

use crate::error::{Error, Result};
use crate::model::{self, Generation, Sampling, SequenceLayout, Special, TransformerParams, N_SPECIAL};
use crate::rng::{self, Rng};
use crate::steer::SteerBank;
use crate::tensor::{gelu, Scalar, Tensor, LAYER_NORM_EPS};

/// One row fed to [`Decoder::step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepInput {
    pub seq: usize,
    /// Row of the combined `[tokens; speakers; emotions]` input table.
    pub row: usize,
    /// Emotion whose steering matrix applies at this position, if any.
    pub steer: Option<usize>,
    pub want_logits: bool,
}

struct LayerCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

pub struct Decoder<'a, T> {
    params: &'a TransformerParams<T>,
    steering: Option<(&'a SteerBank<T>, f64)>,
    caches: Vec<LayerCache<T>>,
    lens: Vec<usize>,
}

fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let n = x.cols();
    let nf = T::from_f64(n as f64);
    let eps = T::from_f64(LAYER_NORM_EPS);
    let (g, b) = (gain.data(), bias.data());
    let mut out = Vec::with_capacity(x.numel());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + eps).sqrt();
        out.extend((0..n).map(|c| (row[c] - mean) * is * g[c] + b[c]));
    }
    Tensor::new(x.shape(), out).expect("shape preserved")
}

fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = x.matmul(w)?;
    let n = y.cols();
    let bd = b.data();
    for row in y.data_mut().chunks_mut(n) {
        for (v, &bb) in row.iter_mut().zip(bd) {
            *v = *v + bb;
        }
    }
    Ok(y)
}

fn add_in_place<T: Scalar>(x: &mut Tensor<T>, y: &Tensor<T>) {
    for (a, &b) in x.data_mut().iter_mut().zip(y.data()) {
        *a = *a + b;
    }
}

impl<'a, T: Scalar> Decoder<'a, T> {
    pub fn new(
        params: &'a TransformerParams<T>,
        steering: Option<(&'a SteerBank<T>, f64)>,
        batch: usize,
    ) -> Result<Self> {
        if let Some((bank, gain)) = steering {
            if !(gain >= 0.0 && gain.is_finite()) {
                return Err(Error::Config(format!(
                    "steering gain must be finite and >= 0, got {gain}"
                )));
            }
            if bank.d_model() != params.config.d_model || bank.n_emotions() != params.config.n_emotions {
                return Err(Error::Shape(format!(
                    "steering bank is {} × {}², model has {} emotions and d_model {}",
                    bank.n_emotions(),
                    bank.d_model(),
                    params.config.n_emotions,
                    params.config.d_model
                )));
            }
        }
        let cap = params.config.max_seq_len * params.config.d_model;
        let caches = (0..params.config.n_layers)
            .map(|_| LayerCache {
                keys: (0..batch).map(|_| Vec::with_capacity(cap)).collect(),
                values: (0..batch).map(|_| Vec::with_capacity(cap)).collect(),
            })
            .collect();
        Ok(Decoder {
            params,
            steering,
            caches,
            lens: vec![0; batch],
        })
    }

    /// Number of positions already fed for `seq`.
    pub fn len(&self, seq: usize) -> usize {
        self.lens[seq]
    }

    /// Feeds the next position of each listed sequence and returns the
    /// logits of the rows that asked for them, in input order.
    pub fn step(&mut self, inputs: &[StepInput]) -> Result<Vec<Option<Vec<T>>>> {
        let config = &self.params.config;
        let w = &self.params.weights;
        let d = config.d_model;
        let table_rows = config.token_rows() + config.n_speakers + config.n_emotions;
        for (i, inp) in inputs.iter().enumerate() {
            if inp.seq >= self.lens.len() {
                return Err(Error::OutOfRange {
                    what: "sequence",
                    index: inp.seq,
                    limit: self.lens.len(),
                });
            }
            if inputs[..i].iter().any(|o| o.seq == inp.seq) {
                return Err(Error::Layout(format!("sequence {} fed twice in one step", inp.seq)));
            }
            if inp.row >= table_rows {
                return Err(Error::OutOfRange {
                    what: "input row",
                    index: inp.row,
                    limit: table_rows,
                });
            }
            if self.lens[inp.seq] >= config.max_seq_len {
                return Err(Error::Layout(format!("sequence {} is at max_seq_len", inp.seq)));
            }
        }
        if inputs.is_empty() {
            return Ok(Vec::new());
        }

        let b = inputs.len();
        let mut x = Vec::with_capacity(b * d);
        let (spk_base, emo_base) = (config.token_rows(), config.token_rows() + config.n_speakers);
        for inp in inputs {
            let emb = if inp.row < spk_base {
                w.tok_emb.row(inp.row)
            } else if inp.row < emo_base {
                w.spk_emb.row(inp.row - spk_base)
            } else {
                w.emo_emb.row(inp.row - emo_base)
            };
            let pos = w.pos_emb.row(self.lens[inp.seq]);
            x.extend(emb.iter().zip(pos).map(|(&a, &p)| a + p));
        }
        let mut x = Tensor::new(&[b, d], x)?;

        let heads = config.n_heads;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        for (layer, cache) in w.layers.iter().zip(&mut self.caches) {
            let h = layer_norm(&x, &layer.ln1_gain, &layer.ln1_bias);
            let q = linear(&h, &layer.wq, &layer.bq)?;
            let k = linear(&h, &layer.wk, &layer.bk)?;
            let v = linear(&h, &layer.wv, &layer.bv)?;
            let mut attn = vec![T::zero(); b * d];
            for (r, inp) in inputs.iter().enumerate() {
                let keys = &mut cache.keys[inp.seq];
                let values = &mut cache.values[inp.seq];
                keys.extend_from_slice(k.row(r));
                values.extend_from_slice(v.row(r));
                let len = keys.len() / d;
                let qr = q.row(r);
                let mut p = vec![T::zero(); len];
                for hh in 0..heads {
                    let cols = hh * dh..(hh + 1) * dh;
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = &keys[j * d + cols.start..j * d + cols.end];
                        *pj = scale * qr[cols.clone()].iter().zip(kj).map(|(&a, &c)| a * c).sum::<T>();
                    }
                    crate::tensor::softmax_in_place(&mut p);
                    let out = &mut attn[r * d + cols.start..r * d + cols.end];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &values[j * d + cols.start..j * d + cols.end];
                        for (o, &vv) in out.iter_mut().zip(vj) {
                            *o = *o + pj * vv;
                        }
                    }
                }
            }
            let attn = Tensor::new(&[b, d], attn)?;
            let a = linear(&attn, &layer.wo, &layer.bo)?;
            add_in_place(&mut x, &a);

            let h = layer_norm(&x, &layer.ln2_gain, &layer.ln2_bias);
            let mut f = linear(&h, &layer.w1, &layer.b1)?;
            f.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
            let f = linear(&f, &layer.w2, &layer.b2)?;
            add_in_place(&mut x, &f);
        }
        for inp in inputs {
            self.lens[inp.seq] += 1;
        }

        let mut hidden = layer_norm(&x, &w.lnf_gain, &w.lnf_bias);
        if let Some((bank, gain)) = self.steering {
            let c = T::from_f64(gain * bank.epsilon());
            for (r, inp) in inputs.iter().enumerate() {
                let Some(e) = inp.steer else { continue };
                let we = bank.weight(e)?;
                let row = Tensor::new(&[1, d], hidden.row(r).to_vec())?;
                let shift = row.matmul(we)?;
                let dst = &mut hidden.data_mut()[r * d..(r + 1) * d];
                for (o, &s) in dst.iter_mut().zip(shift.data()) {
                    *o = *o + s * c;
                }
            }
        }

        let wanted: Vec<usize> = (0..b).filter(|&r| inputs[r].want_logits).collect();
        let mut out = vec![None; b];
        if wanted.is_empty() {
            return Ok(out);
        }
        let rows: Vec<T> = wanted.iter().flat_map(|&r| hidden.row(r).iter().copied()).collect();
        let rows = Tensor::new(&[wanted.len(), d], rows)?;
        let logits = linear(&rows, &w.head_w, &w.head_b)?;
        for (i, &r) in wanted.iter().enumerate() {
            out[r] = Some(logits.row(i).to_vec());
        }
        Ok(out)
    }
}

/// Samples continuations for several conditioning layouts at once.
///
/// Sequence `i` draws from its own stream derived from `seeds[i]`, so each
/// result is the same as a single-sequence call with that seed.
pub fn generate_batch<T: Scalar>(
    params: &TransformerParams<T>,
    conds: &[SequenceLayout],
    steering: Option<(&SteerBank<T>, f64)>,
    seeds: &[u64],
    sampling: Sampling,
) -> Result<Vec<Generation>> {
    if conds.len() != seeds.len() {
        return Err(Error::Shape(format!(
            "{} layouts but {} seeds",
            conds.len(),
            seeds.len()
        )));
    }
    if !(sampling.temperature >= 0.0 && sampling.temperature.is_finite()) {
        return Err(Error::Config(format!(
            "temperature {} must be >= 0",
            sampling.temperature
        )));
    }
    let config = &params.config;
    for cond in conds {
        if cond.terminated || !cond.speech.is_empty() {
            return Err(Error::Layout("generation must start from a layout ending at Ⓣ".into()));
        }
        cond.validate(config)?;
    }

    let prompts: Vec<Vec<usize>> = conds.iter().map(|c| c.input_rows(config)).collect();
    let budgets: Vec<usize> = conds
        .iter()
        .map(|c| sampling.max_len.min(config.max_seq_len + 1 - c.len()))
        .collect();
    let mut rngs: Vec<Rng> = seeds.iter().map(|&s| rng::stream(s, "generate", 0)).collect();
    let mut out: Vec<Generation> = conds
        .iter()
        .map(|_| Generation {
            tokens: Vec::new(),
            terminated: false,
        })
        .collect();
    let mut done: Vec<bool> = budgets.iter().map(|&b| b == 0).collect();
    let mut decoder = Decoder::new(params, steering, conds.len())?;

    loop {
        let mut inputs = Vec::new();
        for (i, prompt) in prompts.iter().enumerate() {
            if done[i] {
                continue;
            }
            let pos = decoder.len(i);
            let turn = prompt.len() - 1;
            let row = match prompt.get(pos) {
                Some(&r) => r,
                None => N_SPECIAL + *out[i].tokens.last().expect("generated token"),
            };
            let speech = pos >= turn;
            inputs.push(StepInput {
                seq: i,
                row,
                steer: speech.then_some(conds[i].emotion),
                want_logits: speech,
            });
        }
        if inputs.is_empty() {
            break;
        }
        let logits = decoder.step(&inputs)?;
        for (inp, l) in inputs.iter().zip(logits) {
            let Some(l) = l else { continue };
            let i = inp.seq;
            let mut scores: Vec<f64> = l.iter().map(|x| x.as_f64()).collect();
            for s in [Special::Start, Special::EndPrompt, Special::Turn] {
                scores[s.id()] = f64::NEG_INFINITY;
            }
            let next = if sampling.temperature == 0.0 {
                model::argmax(&scores)
            } else {
                model::sample(&scores, sampling.temperature, &mut rngs[i])
            };
            if next == Special::End.id() {
                out[i].terminated = true;
                done[i] = true;
                continue;
            }
            out[i].tokens.push(next - N_SPECIAL);
            if out[i].tokens.len() >= budgets[i] {
                done[i] = true;
            }
        }
    }
    Ok(out)
}
