// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: one TOML document covering the model, corpus,
//! training and evaluation. Every field has a default, unknown keys are
//! rejected.
//!
//! ```
//! use emotion_steer::config::RunConfig;
//!
//! let config = RunConfig::from_toml_str("seed = 7\n[train.finetune]\nepochs = 2\n").unwrap();
//! assert_eq!(config.seed, 7);
//! assert_eq!(config.train.finetune.epochs, 2);
//! assert_eq!(config.train.finetune.lr, 1e-4);
//!
//! let err = RunConfig::from_toml_str("[model]\nwidth = 3\n").unwrap_err();
//! assert!(err.to_string().contains("width"));
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::steer::SteerInit;
use crate::synthdata::{CorpusConfig, EmotionSpec, SpeechCodec, DEFAULT_LABELS};
use crate::tensor::AdamWConfig;
use crate::training::{Regime, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub emotions: EmotionConfig,
    pub corpus: CorpusConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            emotions: EmotionConfig::default(),
            corpus: CorpusConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Prosody distributions, either peaked (the default) or given explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmotionConfig {
    pub labels: Vec<String>,
    pub n_prosody: usize,
    /// Mass on prosody token `3e`.
    pub peak: f64,
    /// Mass on prosody token `3e + 1`.
    pub shoulder: f64,
    /// Pretraining smoothing toward the neutral distribution.
    pub smoothing: f64,
    /// Explicit distributions; overrides `n_prosody`, `peak` and `shoulder`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prosody: Option<Vec<Vec<f64>>>,
}

impl Default for EmotionConfig {
    fn default() -> Self {
        EmotionConfig {
            labels: DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
            n_prosody: 16,
            peak: 0.6,
            shoulder: 0.2,
            smoothing: 0.5,
            prosody: None,
        }
    }
}

impl EmotionConfig {
    pub fn spec(&self) -> Result<EmotionSpec> {
        match &self.prosody {
            Some(prosody) => {
                let spec = EmotionSpec {
                    labels: self.labels.clone(),
                    prosody: prosody.clone(),
                    smoothing: self.smoothing,
                };
                spec.validate()?;
                Ok(spec)
            }
            None => {
                let labels: Vec<&str> = self.labels.iter().map(String::as_str).collect();
                EmotionSpec::peaked(&labels, self.n_prosody, self.peak, self.shoulder, self.smoothing)
            }
        }
    }
}

/// Learning rate and epoch budget of one training stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub lr: f64,
    pub epochs: usize,
}

impl Schedule {
    pub const PRETRAIN: Schedule = Schedule { lr: 1e-3, epochs: 10 };
    pub const FINETUNE: Schedule = Schedule { lr: 1e-4, epochs: 5 };
}

/// A schedule table in which either key may be omitted.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialSchedule {
    lr: Option<f64>,
    epochs: Option<usize>,
}

fn schedule_or<'de, D: serde::Deserializer<'de>>(d: D, base: Schedule) -> std::result::Result<Schedule, D::Error> {
    let p = PartialSchedule::deserialize(d)?;
    Ok(Schedule {
        lr: p.lr.unwrap_or(base.lr),
        epochs: p.epochs.unwrap_or(base.epochs),
    })
}

fn pretrain_schedule<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Schedule, D::Error> {
    schedule_or(d, Schedule::PRETRAIN)
}

fn finetune_schedule<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Schedule, D::Error> {
    schedule_or(d, Schedule::FINETUNE)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub clip_norm: f64,
    pub epsilon: f64,
    pub steer_init: SteerInit,
    /// Learning-rate multiplier for the steering matrices (their weight
    /// decay is divided by it). `W_e` enters the model scaled by `ε`, so at
    /// the base rate it would barely move within the fine-tuning budget.
    pub steer_lr_multiplier: f64,
    pub optimizer: AdamWConfig,
    #[serde(deserialize_with = "pretrain_schedule")]
    pub pretrain: Schedule,
    #[serde(deserialize_with = "finetune_schedule")]
    pub finetune: Schedule,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 32,
            clip_norm: 1.0,
            epsilon: 0.001,
            steer_init: SteerInit::Zeros,
            steer_lr_multiplier: 30.0,
            optimizer: AdamWConfig::default(),
            pretrain: Schedule::PRETRAIN,
            finetune: Schedule::FINETUNE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Gain used by `eval` for checkpoints that carry steering.
    pub alpha: f64,
    pub temperature: f64,
    /// Generation budget in speech tokens.
    pub max_len: usize,
    pub sweep_alphas: Vec<f64>,
    /// Extra gain evaluated to expose large-perturbation breakdown.
    pub breakdown_alpha: f64,
    pub bayes_samples: usize,
    /// Utterances decoded together.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alpha: 1.0,
            temperature: 1.0,
            max_len: 64,
            sweep_alphas: (0..7).map(|i| 1.0 + 0.5 * i as f64).collect(),
            breakdown_alpha: 32.0,
            bayes_samples: 100_000,
            batch_size: 64,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn codec(&self) -> SpeechCodec {
        SpeechCodec {
            content_vocab: self.corpus.content_vocab,
            n_prosody: self
                .emotions
                .prosody
                .as_ref()
                .map_or(self.emotions.n_prosody, |p| p.first().map_or(0, Vec::len)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        let spec = self.emotions.spec()?;
        let fail = |m: String| Err(Error::Config(m));
        let m = &self.model;
        if m.n_emotions != spec.n_emotions() {
            return fail(format!(
                "model.n_emotions is {} but {} emotion labels are configured",
                m.n_emotions,
                spec.n_emotions()
            ));
        }
        if m.content_vocab != self.corpus.content_vocab {
            return fail(format!(
                "model.content_vocab {} differs from corpus.content_vocab {}",
                m.content_vocab, self.corpus.content_vocab
            ));
        }
        if m.speech_vocab != self.corpus.content_vocab + spec.n_prosody() {
            return fail(format!(
                "model.speech_vocab must be content_vocab + prosody tokens = {}",
                self.corpus.content_vocab + spec.n_prosody()
            ));
        }
        if m.n_speakers != self.corpus.n_speakers {
            return fail(format!(
                "model.n_speakers {} differs from corpus.n_speakers {}",
                m.n_speakers, self.corpus.n_speakers
            ));
        }
        let longest = crate::model::N_SPECIAL + 2 + 3 * self.corpus.max_script_len;
        if longest > m.max_seq_len {
            return fail(format!(
                "longest training sequence ({longest}) exceeds model.max_seq_len {}",
                m.max_seq_len
            ));
        }
        for regime in Regime::ALL {
            self.train_config(regime).validate()?;
        }
        let e = &self.eval;
        if !(e.alpha >= 0.0 && e.alpha.is_finite()) {
            return fail(format!("eval.alpha must be >= 0, got {}", e.alpha));
        }
        if !(e.temperature >= 0.0 && e.temperature.is_finite()) {
            return fail(format!("eval.temperature must be >= 0, got {}", e.temperature));
        }
        if e.max_len == 0 || e.batch_size == 0 || e.bayes_samples == 0 {
            return fail("eval.max_len, eval.batch_size and eval.bayes_samples must be positive".into());
        }
        crate::evaluation::check_alphas(&e.sweep_alphas)?;
        if !(e.breakdown_alpha >= 0.0 && e.breakdown_alpha.is_finite()) {
            return fail(format!("eval.breakdown_alpha must be >= 0, got {}", e.breakdown_alpha));
        }
        Ok(())
    }

    /// Training settings for one regime.
    pub fn train_config(&self, regime: Regime) -> TrainConfig {
        let t = &self.train;
        let schedule = match regime {
            Regime::Pretrain => t.pretrain,
            _ => t.finetune,
        };
        TrainConfig {
            regime,
            lr: schedule.lr,
            epochs: schedule.epochs,
            batch_size: t.batch_size,
            seed: self.seed,
            epsilon: t.epsilon,
            smoothing: self.emotions.smoothing,
            clip_norm: t.clip_norm,
            optimizer: t.optimizer,
            steer_init: t.steer_init,
            steer_lr_multiplier: t.steer_lr_multiplier,
        }
    }
}
