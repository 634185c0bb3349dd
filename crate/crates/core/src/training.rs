// SPDX-License-Identifier: MIT OR Apache-2.0

//! Teacher-forced training for the four regimes.
//!
//! | regime      | starts from | trains          | corpus           |
//! |-------------|-------------|-----------------|------------------|
//! | `pretrain`  | random init | whole backbone  | smoothed (`π̃_e`) |
//! | `sft`       | `pretrain`  | whole backbone  | emotional        |
//! | `emoshift`  | `pretrain`  | steering only   | emotional        |
//! | `sft-shift` | `sft`       | steering only   | emotional        |
//!
//! The loss is the mean negative log-likelihood of the speech tokens and
//! the terminal Ⓔ under teacher forcing. Everything else is masked.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::backbone_hash;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, PackedBatch, SequenceLayout, SteerInput, TransformerParams};
use crate::rng;
use crate::steer::{self, SteerBank, SteerInit};
use crate::synthdata::{Corpus, CorpusKind, Utterance};
use crate::tensor::{AdamW, AdamWConfig, Gradients, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Pretrain,
    Sft,
    Emoshift,
    SftShift,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Pretrain, Regime::Sft, Regime::Emoshift, Regime::SftShift];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Pretrain => "pretrain",
            Regime::Sft => "sft",
            Regime::Emoshift => "emoshift",
            Regime::SftShift => "sft-shift",
        }
    }

    pub fn trains_backbone(self) -> bool {
        matches!(self, Regime::Pretrain | Regime::Sft)
    }

    pub fn has_steering(self) -> bool {
        matches!(self, Regime::Emoshift | Regime::SftShift)
    }

    /// Regime of the checkpoint this one must start from.
    pub fn parent(self) -> Option<Regime> {
        match self {
            Regime::Pretrain => None,
            Regime::Sft | Regime::Emoshift => Some(Regime::Pretrain),
            Regime::SftShift => Some(Regime::Sft),
        }
    }

    pub fn corpus_kind(self) -> CorpusKind {
        match self {
            Regime::Pretrain => CorpusKind::Pretraining,
            _ => CorpusKind::Emotional,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL.into_iter().find(|r| r.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown regime {s:?}; expected pretrain, sft, emoshift or sft-shift"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub epsilon: f64,
    /// Pretraining smoothing `λ` the corpus was generated with.
    pub smoothing: f64,
    pub clip_norm: f64,
    pub optimizer: AdamWConfig,
    pub steer_init: SteerInit,
    /// The steering matrices train at `lr · steer_lr_multiplier` with weight
    /// decay divided by the same factor, so the per-step decay is unchanged.
    pub steer_lr_multiplier: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("{}: learning rate must be > 0, got {}", self.regime, self.lr));
        }
        if self.epochs == 0 {
            return fail(format!("{}: epochs must be >= 1", self.regime));
        }
        if self.batch_size == 0 {
            return fail("batch size must be >= 1".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return fail(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return fail(format!("clip norm must be > 0, got {}", self.clip_norm));
        }
        if !(self.steer_lr_multiplier > 0.0 && self.steer_lr_multiplier.is_finite()) {
            return fail(format!(
                "steer lr multiplier must be > 0, got {}",
                self.steer_lr_multiplier
            ));
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            return fail(format!("smoothing {} outside [0, 1]", self.smoothing));
        }
        Ok(())
    }
}

/// The checkpoint a run was initialised from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lineage {
    pub regime: Regime,
    pub backbone_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub regime: Regime,
    pub train: TrainConfig,
    pub lineage: Option<Lineage>,
    pub backbone_hash: String,
    /// Mean training loss of each epoch.
    pub train_losses: Vec<f64>,
    /// Dev loss before training and after each epoch.
    pub dev_losses: Vec<f64>,
    pub trainable_params: usize,
    pub run_config: Option<RunConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedCheckpoint {
    pub params: TransformerParams<f32>,
    pub steer: Option<SteerBank<f32>>,
    pub meta: CheckpointMeta,
}

impl TrainedCheckpoint {
    pub fn final_dev_loss(&self) -> f64 {
        self.meta.dev_losses.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_train_loss(&self) -> f64 {
        self.meta.train_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: Option<f64>,
    pub dev_loss: f64,
    /// Seconds since the run started; diagnostic only.
    pub wall_clock: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: TrainedCheckpoint,
    pub log: Vec<EpochRecord>,
}

/// Where a run starts.
#[derive(Clone, Copy, Debug)]
pub enum Init<'a> {
    Fresh(&'a ModelConfig),
    From(&'a TrainedCheckpoint),
}

pub fn layout_of(u: &Utterance) -> SequenceLayout {
    SequenceLayout::full(u.speaker, u.emotion, u.script.clone(), u.speech.clone())
}

fn check_supervised(layouts: &[SequenceLayout]) -> Result<()> {
    for l in layouts {
        if !l.terminated || l.speech.is_empty() {
            return Err(Error::Layout(
                "training layouts need speech tokens and a terminal Ⓔ".into(),
            ));
        }
    }
    Ok(())
}

/// Teacher-forced loss of a batch with all weights held constant.
pub fn compute_loss<T: Scalar>(
    params: &TransformerParams<T>,
    steering: Option<(&SteerBank<T>, f64)>,
    layouts: &[SequenceLayout],
) -> Result<f64> {
    check_supervised(layouts)?;
    let mut tape = Tape::new();
    let weights = params.bind(&mut tape, false);
    let bound = steering.map(|(bank, gain)| (bank.bind(&mut tape, false), gain));
    let batch = PackedBatch::new(layouts, &params.config)?;
    let steer = bound.as_ref().map(|(bank, gain)| SteerInput { bank, gain: *gain });
    let out = model::forward(&mut tape, &weights, &params.config, &batch, steer)?;
    let loss = tape.cross_entropy(out.logits, &batch.targets, &batch.mask)?;
    Ok(tape.value(loss).item().as_f64())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    let coef = max_norm / (norm + 1e-6);
    if coef < 1.0 {
        let c = T::from_f64(coef);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * c);
        }
    }
    norm
}

fn check_corpus(regime: Regime, corpus: &Corpus, config: &ModelConfig) -> Result<()> {
    if corpus.meta.kind != regime.corpus_kind() {
        return Err(Error::Regime(format!(
            "{regime} trains on the {:?} corpus, got {:?}",
            regime.corpus_kind(),
            corpus.meta.kind
        )));
    }
    let codec = corpus.codec();
    let c = &corpus.meta.config;
    if codec.speech_vocab() != config.speech_vocab
        || c.content_vocab != config.content_vocab
        || corpus.meta.spec.n_emotions() != config.n_emotions
        || c.n_speakers != config.n_speakers
    {
        return Err(Error::Config(format!(
            "corpus (content {}, speech {}, emotions {}, speakers {}) does not fit the model \
             (content {}, speech {}, emotions {}, speakers {})",
            c.content_vocab,
            codec.speech_vocab(),
            corpus.meta.spec.n_emotions(),
            c.n_speakers,
            config.content_vocab,
            config.speech_vocab,
            config.n_emotions,
            config.n_speakers
        )));
    }
    if corpus.train.is_empty() || corpus.dev.is_empty() {
        return Err(Error::Config("corpus has an empty train or dev split".into()));
    }
    Ok(())
}

/// Final hidden rows of a frozen backbone at the supervised positions.
struct FrozenFeatures {
    /// Per utterance: rows from Ⓣ to the position predicting Ⓔ.
    hidden: Vec<Tensor<f32>>,
    targets: Vec<Vec<usize>>,
    emotions: Vec<usize>,
}

const FEATURE_CHUNK: usize = 64;

impl FrozenFeatures {
    fn extract(params: &TransformerParams<f32>, layouts: &[SequenceLayout]) -> Result<Self> {
        let mut out = FrozenFeatures {
            hidden: Vec::with_capacity(layouts.len()),
            targets: Vec::with_capacity(layouts.len()),
            emotions: Vec::with_capacity(layouts.len()),
        };
        for chunk in layouts.chunks(FEATURE_CHUNK) {
            let mut tape = Tape::new();
            let weights = params.bind(&mut tape, false);
            let batch = PackedBatch::new(chunk, &params.config)?;
            let fwd = model::forward(&mut tape, &weights, &params.config, &batch, None)?;
            let hidden = tape.value(fwd.hidden);
            for (layout, &(start, len)) in chunk.iter().zip(&batch.segments) {
                let turn = layout.boundaries().turn;
                let rows: Vec<f32> = (start + turn..start + len)
                    .flat_map(|r| hidden.row(r).iter().copied())
                    .collect();
                out.hidden.push(Tensor::new(&[len - turn, hidden.cols()], rows)?);
                out.targets.push(batch.targets[start + turn..start + len].to_vec());
                out.emotions.push(layout.emotion);
            }
        }
        Ok(out)
    }

    /// Builds a tape computing the loss of `indices` from cached features.
    /// Returns `(loss, number of supervised rows)`.
    fn loss(
        &self,
        tape: &mut Tape<f32>,
        params: &TransformerParams<f32>,
        bound: &steer::BoundSteer,
        indices: &[usize],
    ) -> Result<(Var, usize)> {
        let d = params.config.d_model;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut by_emotion = vec![Vec::new(); bound.weights.len()];
        for &i in indices {
            let start = rows.len() / d;
            let h = &self.hidden[i];
            rows.extend_from_slice(h.data());
            targets.extend_from_slice(&self.targets[i]);
            by_emotion[self.emotions[i]].extend(start..start + h.rows());
        }
        let n = targets.len();
        let h = tape.constant(Tensor::new(&[n, d], rows)?);
        let h = steer::steer_rows(tape, h, &by_emotion, 1.0, bound)?;
        let head_w = tape.constant(params.weights.head_w.clone());
        let head_b = tape.constant(params.weights.head_b.clone());
        let logits = tape.matmul(h, head_w)?;
        let logits = tape.add_row(logits, head_b)?;
        let loss = tape.cross_entropy(logits, &targets, &vec![true; n])?;
        Ok((loss, n))
    }
}

/// What the optimizer updates in a run.
struct Trainables {
    backbone: Option<AdamW<f32>>,
    steer: Option<AdamW<f32>>,
}

fn gradient_list(grads: &Gradients<f32>, vars: &[Var]) -> Vec<Tensor<f32>> {
    vars.iter().map(|&v| grads.wrt(v).clone()).collect()
}

pub fn run_regime(config: &TrainConfig, corpus: &Corpus, init: Init<'_>) -> Result<TrainOutcome> {
    run_regime_with(config, corpus, init, |_| {})
}

/// [`run_regime`] with a callback invoked after every log record.
pub fn run_regime_with(
    config: &TrainConfig,
    corpus: &Corpus,
    init: Init<'_>,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let regime = config.regime;
    let clock = Instant::now();

    // Regime/init compatibility is settled before any work.
    let (mut params, mut bank, lineage) = match (regime.parent(), init) {
        (None, Init::Fresh(model_config)) => (TransformerParams::<f32>::init(model_config, config.seed)?, None, None),
        (None, Init::From(ckpt)) => {
            return Err(Error::Regime(format!(
                "{regime} starts from scratch but an initial {} checkpoint was given",
                ckpt.meta.regime
            )))
        }
        (Some(parent), Init::Fresh(_)) => {
            return Err(Error::Regime(format!("{regime} needs an initial {parent} checkpoint")));
        }
        (Some(parent), Init::From(ckpt)) => {
            if ckpt.meta.regime != parent {
                return Err(Error::Regime(format!(
                    "{regime} must start from a {parent} checkpoint, got {}",
                    ckpt.meta.regime
                )));
            }
            let bank = if regime.has_steering() {
                let c = &ckpt.params.config;
                Some(SteerBank::init(
                    c.n_emotions,
                    c.d_model,
                    config.epsilon,
                    config.steer_init,
                    config.seed,
                )?)
            } else {
                None
            };
            let lineage = Lineage {
                regime: parent,
                backbone_hash: ckpt.meta.backbone_hash.clone(),
            };
            (ckpt.params.clone(), bank, Some(lineage))
        }
    };
    check_corpus(regime, corpus, &params.config)?;
    let initial_hash = backbone_hash(&params);

    let train_layouts: Vec<SequenceLayout> = corpus.train.iter().map(layout_of).collect();
    let dev_layouts: Vec<SequenceLayout> = corpus.dev.iter().map(layout_of).collect();
    check_supervised(&train_layouts)?;
    for l in train_layouts.iter().chain(&dev_layouts) {
        l.validate(&params.config)?;
    }

    let backbone_sizes: Vec<usize> = params.weights.named().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = Trainables {
        backbone: regime
            .trains_backbone()
            .then(|| AdamW::new(config.optimizer, &backbone_sizes)),
        steer: bank.as_ref().map(|b| {
            let steer_config = AdamWConfig {
                weight_decay: config.optimizer.weight_decay / config.steer_lr_multiplier,
                ..config.optimizer
            };
            AdamW::new(steer_config, &vec![b.d_model() * b.d_model(); b.n_emotions()])
        }),
    };
    let trainable_params = if regime.trains_backbone() {
        params.param_count()
    } else {
        0
    } + bank.as_ref().map_or(0, SteerBank::param_count);

    // A frozen backbone maps each utterance to fixed final hidden rows, so
    // steering-only regimes train on features extracted once.
    let frozen = if regime.trains_backbone() {
        None
    } else {
        Some((
            FrozenFeatures::extract(&params, &train_layouts)?,
            FrozenFeatures::extract(&params, &dev_layouts)?,
        ))
    };

    let dev_loss = |params: &TransformerParams<f32>, bank: Option<&SteerBank<f32>>| -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        match (&frozen, bank) {
            (Some((_, dev)), Some(bank)) => {
                let indices: Vec<usize> = (0..dev_layouts.len()).collect();
                for chunk in indices.chunks(FEATURE_CHUNK) {
                    let mut tape = Tape::new();
                    let bound = bank.bind(&mut tape, false);
                    let (loss, n) = dev.loss(&mut tape, params, &bound, chunk)?;
                    total += tape.value(loss).item().as_f64() * n as f64;
                    count += n;
                }
            }
            _ => {
                for chunk in dev_layouts.chunks(FEATURE_CHUNK) {
                    let n = chunk.iter().map(|l| l.speech.len() + 1).sum::<usize>();
                    total += compute_loss(params, bank.map(|b| (b, 1.0)), chunk)? * n as f64;
                    count += n;
                }
            }
        }
        Ok(total / count as f64)
    };

    let mut log = Vec::with_capacity(config.epochs + 1);
    let mut dev_losses = vec![dev_loss(&params, bank.as_ref())?];
    let mut train_losses = Vec::with_capacity(config.epochs);
    let record = EpochRecord {
        epoch: 0,
        step: 0,
        train_loss: None,
        dev_loss: dev_losses[0],
        wall_clock: clock.elapsed().as_secs_f64(),
    };
    observe(&record);
    log.push(record);

    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train_layouts.len()).collect();
    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(config.seed, "shuffle", epoch as u64));
        let mut losses = Vec::new();
        for (b, indices) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound_bank = bank.as_ref().map(|b| b.bind(&mut tape, true));
            let (loss, backbone_vars) = match &frozen {
                Some((train, _)) => {
                    let bound = bound_bank.as_ref().expect("frozen regimes carry steering");
                    (train.loss(&mut tape, &params, bound, indices)?.0, None)
                }
                None => {
                    let weights = params.bind(&mut tape, true);
                    let layouts: Vec<SequenceLayout> = indices.iter().map(|&i| train_layouts[i].clone()).collect();
                    let batch = PackedBatch::new(&layouts, &params.config)?;
                    let steer = bound_bank.as_ref().map(|bank| SteerInput { bank, gain: 1.0 });
                    let mut dropout_rng = rng::stream(config.seed, "dropout", step);
                    let emb = model::embed(&mut tape, &weights, &params.config, &batch)?;
                    let out = model::forward_embedded(
                        &mut tape,
                        &weights,
                        &params.config,
                        emb,
                        &batch,
                        steer,
                        Some(&mut dropout_rng),
                    )?;
                    let loss = tape.cross_entropy(out.logits, &batch.targets, &batch.mask)?;
                    let vars: Vec<Var> = weights.named().into_iter().map(|(_, v)| *v).collect();
                    (loss, Some(vars))
                }
            };
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("{regime} loss at epoch {epoch}, batch {b}")));
            }
            losses.push(value);
            let grads = tape.backward(loss)?;

            let mut backbone_grads = backbone_vars
                .as_ref()
                .map(|v| gradient_list(&grads, v))
                .unwrap_or_default();
            let mut steer_grads = bound_bank
                .as_ref()
                .map(|b| gradient_list(&grads, &b.weights))
                .unwrap_or_default();
            let n_backbone = backbone_grads.len();
            let mut all: Vec<Tensor<f32>> = backbone_grads.drain(..).chain(steer_grads.drain(..)).collect();
            clip_grad_norm(&mut all, config.clip_norm);
            let steer_grads = all.split_off(n_backbone);
            let backbone_grads = all;

            if let Some(adam) = &mut opt.backbone {
                let names: Vec<String> = params.weights.named().into_iter().map(|(n, _)| n).collect();
                let mut slots: Vec<(&str, &mut Tensor<f32>)> = names
                    .iter()
                    .map(String::as_str)
                    .zip(params.weights.refs_mut())
                    .collect();
                let g: Vec<&Tensor<f32>> = backbone_grads.iter().collect();
                adam.step(&mut slots, &g, config.lr)?;
            }
            if let (Some(adam), Some(bank)) = (&mut opt.steer, &mut bank) {
                let names: Vec<String> = (0..bank.n_emotions()).map(|e| format!("steer.W.{e}")).collect();
                let mut slots: Vec<(&str, &mut Tensor<f32>)> = names
                    .iter()
                    .map(String::as_str)
                    .zip(bank.weights_mut().iter_mut())
                    .collect();
                let g: Vec<&Tensor<f32>> = steer_grads.iter().collect();
                adam.step(&mut slots, &g, config.lr * config.steer_lr_multiplier)?;
            }
            step += 1;
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        train_losses.push(train_loss);
        dev_losses.push(dev_loss(&params, bank.as_ref())?);
        let record = EpochRecord {
            epoch,
            step,
            train_loss: Some(train_loss),
            dev_loss: *dev_losses.last().expect("pushed"),
            wall_clock: clock.elapsed().as_secs_f64(),
        };
        observe(&record);
        log.push(record);
    }

    let final_hash = backbone_hash(&params);
    if !regime.trains_backbone() && final_hash != initial_hash {
        return Err(Error::Invariant(format!(
            "{regime} changed the frozen backbone ({initial_hash} -> {final_hash})"
        )));
    }
    Ok(TrainOutcome {
        checkpoint: TrainedCheckpoint {
            params,
            steer: bank,
            meta: CheckpointMeta {
                regime,
                train: config.clone(),
                lineage,
                backbone_hash: final_hash,
                train_losses,
                dev_losses,
                trainable_params,
                run_config: None,
            },
        },
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regime_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(r.as_str().parse::<Regime>().unwrap(), r);
            assert_eq!(serde_json::to_string(&r).unwrap(), format!("\"{r}\""));
        }
        assert!("finetune".parse::<Regime>().is_err());
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut g = vec![
            Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap(),
            Tensor::from_f64(&[1], &[12.0]).unwrap(),
        ];
        let norm = clip_grad_norm(&mut g, 1.0);
        assert!((norm - 13.0).abs() < 1e-12);
        let after: f64 = g.iter().flat_map(|t| t.to_f64_vec()).map(|x| x * x).sum::<f64>().sqrt();
        assert!(after <= 1.0 + 1e-6);
        assert!((g[0].data()[1] / g[0].data()[0] - 4.0 / 3.0).abs() < 1e-12);

        let mut small = vec![Tensor::<f64>::from_f64(&[2], &[0.3, 0.4]).unwrap()];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].to_f64_vec(), vec![0.3, 0.4]);
    }
}
