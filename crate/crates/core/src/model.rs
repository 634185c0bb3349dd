// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small decoder-only transformer over the conditional sequence layout
//!
//! ```text
//! [Ⓢ, s, q, Ⓟ, x_1 … x_n, Ⓣ, y_1 … y_m, Ⓔ]
//! ```
//!
//! `s` is a speaker embedding, `q` an emotion-prompt embedding, `x_j` text
//! (content) tokens and `y_k` speech tokens. The LM head predicts over the
//! four special tokens followed by the speech vocabulary. Steering, when
//! requested, is applied to the final-layer hidden rows from the Ⓣ position
//! onwards, after the final layer norm and right before the LM head.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::steer::{self, BoundSteer, SteerBank};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const N_SPECIAL: usize = 4;

/// Boundary tokens of the layout. The discriminant is both the input and
/// the output id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Special {
    Start = 0,
    EndPrompt = 1,
    Turn = 2,
    End = 3,
}

impl Special {
    pub fn id(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Text (content) vocabulary.
    pub content_vocab: usize,
    /// Speech vocabulary: content-image tokens followed by prosody tokens.
    pub speech_vocab: usize,
    pub n_emotions: usize,
    pub n_speakers: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub positional_init: PositionalInit,
}

/// Starting values of the (learned) positional table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalInit {
    /// Unit-amplitude sine/cosine pairs at geometric frequencies.
    #[default]
    Sinusoidal,
    /// `N(0, 0.02)`, like every other embedding table.
    Normal,
}

fn sinusoidal<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for p in 0..len {
        for j in 0..d {
            let freq = 10_000f64.powf(-((j / 2 * 2) as f64) / d as f64);
            let angle = p as f64 * freq;
            data.push(T::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(&[len, d], data).expect("shape matches data")
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            content_vocab: 16,
            speech_vocab: 32,
            n_emotions: 5,
            n_speakers: 4,
            max_seq_len: 128,
            dropout: 0.0,
            positional_init: PositionalInit::Sinusoidal,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return fail("n_layers and d_ff must be positive".into());
        }
        if self.content_vocab < 2 || self.speech_vocab < 2 {
            return fail("vocabulary sizes must be at least 2".into());
        }
        if self.n_emotions < 2 {
            return fail(format!("need at least 2 emotions, got {}", self.n_emotions));
        }
        if self.n_speakers == 0 {
            return fail("need at least one speaker".into());
        }
        if self.max_seq_len < N_SPECIAL + 3 {
            return fail(format!("max_seq_len {} is too short", self.max_seq_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Output vocabulary: specials then speech tokens.
    pub fn output_vocab(&self) -> usize {
        N_SPECIAL + self.speech_vocab
    }

    /// Rows of the token embedding table: specials, speech, text.
    pub fn token_rows(&self) -> usize {
        N_SPECIAL + self.speech_vocab + self.content_vocab
    }

    pub fn speech_output_id(&self, speech_token: usize) -> usize {
        N_SPECIAL + speech_token
    }
}

/// One position of a layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputToken {
    Special(Special),
    Speaker(usize),
    Emotion(usize),
    Text(usize),
    Speech(usize),
}

/// Conditioning structure of one utterance.
///
/// A layout built with [`SequenceLayout::conditioning`] ends at Ⓣ and is the
/// starting point of generation; [`SequenceLayout::full`] appends the speech
/// tokens and the terminal Ⓔ for teacher forcing.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SequenceLayout {
    pub speaker: usize,
    pub emotion: usize,
    pub script: Vec<usize>,
    pub speech: Vec<usize>,
    pub terminated: bool,
}

/// Positions of the boundary tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Boundaries {
    pub start: usize,
    pub end_prompt: usize,
    pub turn: usize,
    pub end: Option<usize>,
}

impl SequenceLayout {
    pub fn conditioning(speaker: usize, emotion: usize, script: Vec<usize>) -> Self {
        SequenceLayout {
            speaker,
            emotion,
            script,
            speech: Vec::new(),
            terminated: false,
        }
    }

    pub fn full(speaker: usize, emotion: usize, script: Vec<usize>, speech: Vec<usize>) -> Self {
        SequenceLayout {
            speaker,
            emotion,
            script,
            speech,
            terminated: true,
        }
    }

    pub fn len(&self) -> usize {
        N_SPECIAL + 1 + self.script.len() + self.speech.len() + usize::from(self.terminated)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn boundaries(&self) -> Boundaries {
        let turn = 4 + self.script.len();
        Boundaries {
            start: 0,
            end_prompt: 3,
            turn,
            end: self.terminated.then(|| turn + 1 + self.speech.len()),
        }
    }

    pub fn tokens(&self) -> Vec<InputToken> {
        let mut out = Vec::with_capacity(self.len());
        out.push(InputToken::Special(Special::Start));
        out.push(InputToken::Speaker(self.speaker));
        out.push(InputToken::Emotion(self.emotion));
        out.push(InputToken::Special(Special::EndPrompt));
        out.extend(self.script.iter().map(|&x| InputToken::Text(x)));
        out.push(InputToken::Special(Special::Turn));
        out.extend(self.speech.iter().map(|&y| InputToken::Speech(y)));
        if self.terminated {
            out.push(InputToken::Special(Special::End));
        }
        out
    }

    /// Parses a token sequence back into a layout.
    pub fn from_tokens(tokens: &[InputToken]) -> Result<Self> {
        use InputToken as I;
        let bad = |what: &str| Err(Error::Layout(what.to_string()));
        let (speaker, emotion) = match tokens {
            [I::Special(Special::Start), I::Speaker(s), I::Emotion(e), I::Special(Special::EndPrompt), ..] => (*s, *e),
            _ => return bad("layout must open with Ⓢ, speaker, emotion prompt, Ⓟ"),
        };
        let mut rest = &tokens[4..];
        let mut script = Vec::new();
        while let [I::Text(x), tail @ ..] = rest {
            script.push(*x);
            rest = tail;
        }
        let [I::Special(Special::Turn), tail @ ..] = rest else {
            return bad("text must be followed by Ⓣ");
        };
        rest = tail;
        let mut speech = Vec::new();
        while let [I::Speech(y), tail @ ..] = rest {
            speech.push(*y);
            rest = tail;
        }
        let terminated = match rest {
            [] => false,
            [I::Special(Special::End)] => true,
            _ => return bad("speech may only be followed by a terminal Ⓔ"),
        };
        Ok(SequenceLayout {
            speaker,
            emotion,
            script,
            speech,
            terminated,
        })
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let range = |what, index, limit| {
            if index >= limit {
                Err(Error::OutOfRange { what, index, limit })
            } else {
                Ok(())
            }
        };
        range("speaker", self.speaker, config.n_speakers)?;
        range("emotion", self.emotion, config.n_emotions)?;
        for &x in &self.script {
            range("text token", x, config.content_vocab)?;
        }
        for &y in &self.speech {
            range("speech token", y, config.speech_vocab)?;
        }
        if self.len() > config.max_seq_len {
            return Err(Error::Layout(format!(
                "sequence of length {} exceeds max_seq_len {}",
                self.len(),
                config.max_seq_len
            )));
        }
        Ok(())
    }

    /// Rows of the combined input table `[tokens; speakers; emotions]`.
    pub(crate) fn input_rows(&self, config: &ModelConfig) -> Vec<usize> {
        let speech_base = N_SPECIAL;
        let text_base = N_SPECIAL + config.speech_vocab;
        let speaker_base = config.token_rows();
        let emotion_base = speaker_base + config.n_speakers;
        self.tokens()
            .into_iter()
            .map(|t| match t {
                InputToken::Special(s) => s.id(),
                InputToken::Speech(y) => speech_base + y,
                InputToken::Text(x) => text_base + x,
                InputToken::Speaker(s) => speaker_base + s,
                InputToken::Emotion(e) => emotion_base + e,
            })
            .collect()
    }

    /// Teacher-forcing targets and loss mask: row `t` predicts position
    /// `t + 1`, supervised from Ⓣ through the position predicting Ⓔ.
    pub fn targets(&self, config: &ModelConfig) -> (Vec<usize>, Vec<bool>) {
        let len = self.len();
        let mut targets = vec![0; len];
        let mut mask = vec![false; len];
        let turn = self.boundaries().turn;
        for (k, &y) in self.speech.iter().enumerate() {
            targets[turn + k] = config.speech_output_id(y);
            mask[turn + k] = true;
        }
        if self.terminated {
            let last = turn + self.speech.len();
            targets[last] = Special::End.id();
            mask[last] = true;
        }
        (targets, mask)
    }
}

/// Several layouts packed row-wise for one forward pass.
#[derive(Clone, Debug)]
pub struct PackedBatch {
    pub segments: Vec<(usize, usize)>,
    pub input_rows: Vec<usize>,
    pub positions: Vec<usize>,
    /// `steer_rows[e]`: packed rows at or after Ⓣ of sequences with emotion `e`.
    pub steer_rows: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl PackedBatch {
    pub fn new(layouts: &[SequenceLayout], config: &ModelConfig) -> Result<Self> {
        if layouts.is_empty() {
            return Err(Error::Layout("empty batch".into()));
        }
        let mut batch = PackedBatch {
            segments: Vec::with_capacity(layouts.len()),
            input_rows: Vec::new(),
            positions: Vec::new(),
            steer_rows: vec![Vec::new(); config.n_emotions],
            targets: Vec::new(),
            mask: Vec::new(),
        };
        for layout in layouts {
            layout.validate(config)?;
            let start = batch.input_rows.len();
            let len = layout.len();
            batch.segments.push((start, len));
            batch.input_rows.extend(layout.input_rows(config));
            batch.positions.extend(0..len);
            let turn = layout.boundaries().turn;
            batch.steer_rows[layout.emotion].extend(start + turn..start + len);
            let (t, m) = layout.targets(config);
            batch.targets.extend(t);
            batch.mask.extend(m);
        }
        Ok(batch)
    }

    pub fn rows(&self) -> usize {
        self.input_rows.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<W> {
    pub ln1_gain: W,
    pub ln1_bias: W,
    pub wq: W,
    pub bq: W,
    pub wk: W,
    pub bk: W,
    pub wv: W,
    pub bv: W,
    pub wo: W,
    pub bo: W,
    pub ln2_gain: W,
    pub ln2_bias: W,
    pub w1: W,
    pub b1: W,
    pub w2: W,
    pub b2: W,
}

impl<W> LayerWeights<W> {
    fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a W) -> U) -> LayerWeights<U> {
        let mut g = |name: &str, w: &'a W| f(&format!("{prefix}.{name}"), w);
        LayerWeights {
            ln1_gain: g("ln1.gain", &self.ln1_gain),
            ln1_bias: g("ln1.bias", &self.ln1_bias),
            wq: g("attn.wq", &self.wq),
            bq: g("attn.bq", &self.bq),
            wk: g("attn.wk", &self.wk),
            bk: g("attn.bk", &self.bk),
            wv: g("attn.wv", &self.wv),
            bv: g("attn.bv", &self.bv),
            wo: g("attn.wo", &self.wo),
            bo: g("attn.bo", &self.bo),
            ln2_gain: g("ln2.gain", &self.ln2_gain),
            ln2_bias: g("ln2.bias", &self.ln2_bias),
            w1: g("ff.w1", &self.w1),
            b1: g("ff.b1", &self.b1),
            w2: g("ff.w2", &self.w2),
            b2: g("ff.b2", &self.b2),
        }
    }

    fn refs_mut(&mut self) -> [&mut W; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// All backbone weights, generic over storage (`Tensor` or tape [`Var`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<W> {
    pub tok_emb: W,
    pub pos_emb: W,
    pub spk_emb: W,
    pub emo_emb: W,
    pub layers: Vec<LayerWeights<W>>,
    pub lnf_gain: W,
    pub lnf_bias: W,
    pub head_w: W,
    pub head_b: W,
}

impl<W> Weights<W> {
    /// Applies `f` to every weight in canonical order, passing its name.
    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a W) -> U) -> Weights<U> {
        let tok_emb = f("tok_emb", &self.tok_emb);
        let pos_emb = f("pos_emb", &self.pos_emb);
        let spk_emb = f("spk_emb", &self.spk_emb);
        let emo_emb = f("emo_emb", &self.emo_emb);
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.map(&format!("layers.{i}"), &mut f))
            .collect();
        Weights {
            tok_emb,
            pos_emb,
            spk_emb,
            emo_emb,
            layers,
            lnf_gain: f("lnf.gain", &self.lnf_gain),
            lnf_bias: f("lnf.bias", &self.lnf_bias),
            head_w: f("head.w", &self.head_w),
            head_b: f("head.b", &self.head_b),
        }
    }

    pub fn named(&self) -> Vec<(String, &W)> {
        let mut out = Vec::new();
        self.map(|name, w| out.push((name.to_string(), w)));
        out
    }

    /// Mutable references in the same order as [`Weights::named`].
    pub fn refs_mut(&mut self) -> Vec<&mut W> {
        let mut out = vec![
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.spk_emb,
            &mut self.emo_emb,
        ];
        for l in &mut self.layers {
            out.extend(l.refs_mut());
        }
        out.extend([
            &mut self.lnf_gain,
            &mut self.lnf_bias,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }
}

/// Backbone parameters together with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams<T> {
    pub config: ModelConfig,
    pub weights: Weights<Tensor<T>>,
}

/// Final-layer outputs of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Final hidden rows after layer norm and steering, `N × d`.
    pub hidden: Var,
}

/// Steering applied during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SteerInput<'a> {
    pub bank: &'a BoundSteer,
    pub gain: f64,
}

const INIT_STD: f64 = 0.02;

impl<T: Scalar> TransformerParams<T> {
    /// Random initialisation: `N(0, 0.02)` matrices and embeddings (the
    /// positional table follows [`PositionalInit`]), zero biases, unit
    /// layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut counter = 0u64;
        let mut randn = |shape: &[usize]| {
            let mut r = rng::stream(seed, "model-init", counter);
            counter += 1;
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| T::from_f64(normal.sample(&mut r))).collect())
        };
        let (d, f) = (config.d_model, config.d_ff);
        let zeros = |n: usize| Tensor::zeros(&[n]);
        let ones = |n: usize| Tensor::full(&[n], T::one());
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_gain: ones(d),
                ln1_bias: zeros(d),
                wq: randn(&[d, d])?,
                bq: zeros(d),
                wk: randn(&[d, d])?,
                bk: zeros(d),
                wv: randn(&[d, d])?,
                bv: zeros(d),
                wo: randn(&[d, d])?,
                bo: zeros(d),
                ln2_gain: ones(d),
                ln2_bias: zeros(d),
                w1: randn(&[d, f])?,
                b1: zeros(f),
                w2: randn(&[f, d])?,
                b2: zeros(d),
            });
        }
        let weights = Weights {
            tok_emb: randn(&[config.token_rows(), d])?,
            pos_emb: match config.positional_init {
                PositionalInit::Sinusoidal => sinusoidal(config.max_seq_len, d),
                PositionalInit::Normal => randn(&[config.max_seq_len, d])?,
            },
            spk_emb: randn(&[config.n_speakers, d])?,
            emo_emb: randn(&[config.n_emotions, d])?,
            layers,
            lnf_gain: ones(d),
            lnf_bias: zeros(d),
            head_w: randn(&[d, config.output_vocab()])?,
            head_b: zeros(config.output_vocab()),
        };
        Ok(TransformerParams {
            config: config.clone(),
            weights,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every weight on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Weights<Var> {
        self.weights.map(|_, t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    pub fn cast<U: Scalar>(&self) -> TransformerParams<U> {
        TransformerParams {
            config: self.config.clone(),
            weights: self.weights.map(|_, t| t.cast()),
        }
    }
}

/// Input embeddings: token/speaker/prompt row plus positional row.
pub fn embed<T: Scalar>(
    tape: &mut Tape<T>,
    weights: &Weights<Var>,
    config: &ModelConfig,
    batch: &PackedBatch,
) -> Result<Var> {
    if let Some(&p) = batch.positions.iter().max() {
        if p >= config.max_seq_len {
            return Err(Error::Layout(format!(
                "position {p} exceeds max_seq_len {}",
                config.max_seq_len
            )));
        }
    }
    let table = tape.concat_rows(&[weights.tok_emb, weights.spk_emb, weights.emo_emb])?;
    let tokens = tape.gather_rows(table, &batch.input_rows)?;
    let positions = tape.gather_rows(weights.pos_emb, &batch.positions)?;
    tape.add(tokens, positions)
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, rate: f64, rng: Option<&mut Rng>) -> Result<Var> {
    let Some(rng) = rng else {
        return Ok(x);
    };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).numel();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let mask = tape.constant(Tensor::new(&shape, mask)?);
    tape.mul(x, mask)
}

/// Transformer stack on precomputed embeddings.
///
/// `dropout_rng` enables dropout (training only).
pub fn forward_embedded<T: Scalar>(
    tape: &mut Tape<T>,
    weights: &Weights<Var>,
    config: &ModelConfig,
    embeddings: Var,
    batch: &PackedBatch,
    steering: Option<SteerInput<'_>>,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<ForwardOutput> {
    let mut x = embeddings;
    for layer in &weights.layers {
        let h = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias)?;
        let q = linear(tape, h, layer.wq, layer.bq)?;
        let k = linear(tape, h, layer.wk, layer.bk)?;
        let v = linear(tape, h, layer.wv, layer.bv)?;
        let a = tape.causal_attention(q, k, v, &batch.segments, config.n_heads)?;
        let a = linear(tape, a, layer.wo, layer.bo)?;
        let a = dropout(tape, a, config.dropout, dropout_rng.as_deref_mut())?;
        x = tape.add(x, a)?;

        let h = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias)?;
        let f = linear(tape, h, layer.w1, layer.b1)?;
        let f = tape.gelu(f)?;
        let f = linear(tape, f, layer.w2, layer.b2)?;
        let f = dropout(tape, f, config.dropout, dropout_rng.as_deref_mut())?;
        x = tape.add(x, f)?;
    }
    let mut hidden = tape.layer_norm(x, weights.lnf_gain, weights.lnf_bias)?;
    if let Some(s) = steering {
        if batch.steer_rows.len() > s.bank.weights.len() {
            return Err(Error::OutOfRange {
                what: "emotion",
                index: batch.steer_rows.len() - 1,
                limit: s.bank.weights.len(),
            });
        }
        hidden = steer::steer_rows(tape, hidden, &batch.steer_rows, s.gain, s.bank)?;
    }
    let logits = linear(tape, hidden, weights.head_w, weights.head_b)?;
    Ok(ForwardOutput { logits, hidden })
}

/// Embedding plus transformer stack.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    weights: &Weights<Var>,
    config: &ModelConfig,
    batch: &PackedBatch,
    steering: Option<SteerInput<'_>>,
) -> Result<ForwardOutput> {
    let emb = embed(tape, weights, config, batch)?;
    forward_embedded(tape, weights, config, emb, batch, steering, None)
}

/// Logits of a single layout with all weights held constant.
pub fn logits_for<T: Scalar>(
    params: &TransformerParams<T>,
    layout: &SequenceLayout,
    steering: Option<(&SteerBank<T>, f64)>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let weights = params.bind(&mut tape, false);
    let bound = steering.map(|(bank, gain)| (bank.bind(&mut tape, false), gain));
    let batch = PackedBatch::new(std::slice::from_ref(layout), &params.config)?;
    let steer = bound.as_ref().map(|(bank, gain)| SteerInput { bank, gain: *gain });
    let out = forward(&mut tape, &weights, &params.config, &batch, steer)?;
    Ok(tape.value(out.logits).clone())
}

/// Decoding controls for [`generate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sampling {
    /// `0` selects greedy argmax decoding.
    pub temperature: f64,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Generated speech tokens, without the terminal Ⓔ.
    pub tokens: Vec<usize>,
    /// `false` when `max_len` (or the context limit) was hit before Ⓔ.
    pub terminated: bool,
}

/// Autoregressive sampling after Ⓣ.
///
/// Ⓢ, Ⓟ and Ⓣ are never emitted. Greedy ties resolve to the lowest id.
/// The budget is `max_len`, further capped by the context length.
pub fn generate<T: Scalar>(
    params: &TransformerParams<T>,
    cond: &SequenceLayout,
    steering: Option<(&SteerBank<T>, f64)>,
    seed: u64,
    sampling: Sampling,
) -> Result<Generation> {
    let mut out = crate::decode::generate_batch(params, std::slice::from_ref(cond), steering, &[seed], sampling)?;
    Ok(out.remove(0))
}

pub(crate) fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn sample(scores: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|&s| ((s - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    // Rounding left a sliver past the last bucket.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}
