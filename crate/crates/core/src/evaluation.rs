// SPDX-License-Identifier: MIT OR Apache-2.0

//! Emotion accuracy, content fidelity and gain sweeps.
//!
//! Every test utterance is regenerated from its conditioning (speaker,
//! emotion, script) and the generated prosody positions are classified by
//! the exact Bayes classifier. The conditioning emotion id is never shown
//! to the classifier.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decode::generate_batch;
use crate::error::{Error, Result};
use crate::model::{Sampling, SequenceLayout};
use crate::rng;
use crate::synthdata::{content_error_rate, BayesClassifier, EmotionSpec, SpeechCodec, Utterance};
use crate::training::TrainedCheckpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub model: String,
    /// Steering gain; `None` for checkpoints without steering.
    pub alpha: Option<f64>,
    pub labels: Vec<String>,
    /// Percent correct per conditioning emotion.
    pub per_emotion: Vec<f64>,
    /// Unweighted mean of `per_emotion`.
    pub overall: f64,
    /// Mean content error rate over all generations.
    pub content_error_rate: f64,
    /// Fraction of generations that hit the length budget before Ⓔ.
    pub unterminated: f64,
    pub trainable_params: usize,
    pub seed: u64,
    pub counts: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub alpha: f64,
    pub overall: f64,
    pub content_error_rate: f64,
    pub unterminated: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepResult {
    pub model: String,
    pub seed: u64,
    pub points: Vec<SweepPoint>,
}

/// Decoding settings shared by every evaluation in a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub seed: u64,
    pub temperature: f64,
    pub max_len: usize,
    pub batch_size: usize,
}

/// Test split plus the emotion model used to score it.
#[derive(Clone, Copy, Debug)]
pub struct TestSet<'a> {
    pub utterances: &'a [Utterance],
    pub spec: &'a EmotionSpec,
    pub codec: SpeechCodec,
}

/// Stream seed of the `index`-th test utterance.
pub fn utterance_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, "eval-utterance", index as u64)
}

/// Rejects empty, negative, non-finite or non-increasing gain lists.
pub fn check_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() {
        return Err(Error::Config("alpha list is empty".into()));
    }
    for &a in alphas {
        if !(a >= 0.0 && a.is_finite()) {
            return Err(Error::Config(format!("alpha {a} must be finite and >= 0")));
        }
    }
    if alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("alphas {alphas:?} are not strictly increasing")));
    }
    Ok(())
}

/// Parses `start:stop:step` (inclusive) or a comma-separated list.
///
/// ```
/// use emotion_steer::evaluation::parse_alphas;
///
/// assert_eq!(parse_alphas("1:4:0.5").unwrap(), vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]);
/// assert_eq!(parse_alphas("0,1,32").unwrap(), vec![0.0, 1.0, 32.0]);
/// assert!(parse_alphas("3:1:0.5").is_err());
/// ```
pub fn parse_alphas(text: &str) -> Result<Vec<f64>> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("bad alpha value {s:?}")))
    };
    let alphas = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let [start, stop, step] = parts[..] else {
            return Err(Error::Config(format!("expected start:stop:step, got {text:?}")));
        };
        let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
        if step.is_nan() || step <= 0.0 || stop < start {
            return Err(Error::Config(format!("empty alpha range {text:?}")));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| start + step * i as f64).collect()
    } else {
        text.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    check_alphas(&alphas)?;
    Ok(alphas)
}

struct Tally {
    correct: Vec<usize>,
    counts: Vec<usize>,
    cer_sum: f64,
    unterminated: usize,
}

impl Tally {
    fn new(n_emotions: usize) -> Self {
        Tally {
            correct: vec![0; n_emotions],
            counts: vec![0; n_emotions],
            cer_sum: 0.0,
            unterminated: 0,
        }
    }

    fn into_report(
        self,
        model: String,
        alpha: Option<f64>,
        labels: &[String],
        trainable_params: usize,
        seed: u64,
    ) -> EvalReport {
        let per_emotion: Vec<f64> = self
            .correct
            .iter()
            .zip(&self.counts)
            .map(|(&c, &n)| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 })
            .collect();
        let present: Vec<f64> = per_emotion
            .iter()
            .zip(&self.counts)
            .filter(|(_, &n)| n > 0)
            .map(|(&a, _)| a)
            .collect();
        let total: usize = self.counts.iter().sum();
        EvalReport {
            model,
            alpha,
            labels: labels.to_vec(),
            overall: present.iter().sum::<f64>() / present.len().max(1) as f64,
            per_emotion,
            content_error_rate: self.cer_sum / total.max(1) as f64,
            unterminated: self.unterminated as f64 / total.max(1) as f64,
            trainable_params,
            seed,
            counts: self.counts,
        }
    }
}

/// Regenerates every test utterance and scores the generations.
///
/// `alpha` is the steering gain. It must be `None` for checkpoints without
/// steering; for steered checkpoints `None` means the training gain `1`.
pub fn evaluate(
    ckpt: &TrainedCheckpoint,
    test: TestSet<'_>,
    alpha: Option<f64>,
    model: &str,
    options: EvalOptions,
) -> Result<EvalReport> {
    let steering = match (&ckpt.steer, alpha) {
        (None, Some(a)) => {
            return Err(Error::Config(format!(
                "alpha {a} given for a {} checkpoint without steering",
                ckpt.meta.regime
            )))
        }
        (None, None) => None,
        (Some(bank), a) => {
            let a = a.unwrap_or(1.0);
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("alpha {a} must be finite and >= 0")));
            }
            Some((bank, a))
        }
    };
    if options.batch_size == 0 {
        return Err(Error::Config("evaluation batch size must be positive".into()));
    }
    let classifier = BayesClassifier::new(test.spec, test.codec)?;
    let sampling = Sampling {
        temperature: options.temperature,
        max_len: options.max_len,
    };
    let mut tally = Tally::new(test.spec.n_emotions());
    let indexed: Vec<(usize, &Utterance)> = test.utterances.iter().enumerate().collect();
    for chunk in indexed.chunks(options.batch_size) {
        let conds: Vec<SequenceLayout> = chunk
            .iter()
            .map(|(_, u)| SequenceLayout::conditioning(u.speaker, u.emotion, u.script.clone()))
            .collect();
        let seeds: Vec<u64> = chunk.iter().map(|&(i, _)| utterance_seed(options.seed, i)).collect();
        let gens = generate_batch(&ckpt.params, &conds, steering, &seeds, sampling)?;
        for ((_, u), g) in chunk.iter().zip(gens) {
            tally.counts[u.emotion] += 1;
            if classifier.classify(&g.tokens).emotion == u.emotion {
                tally.correct[u.emotion] += 1;
            }
            tally.cer_sum += content_error_rate(&g.tokens, &u.script, test.codec)?;
            tally.unterminated += usize::from(!g.terminated);
        }
    }
    Ok(tally.into_report(
        model.to_string(),
        steering.map(|(_, a)| a),
        &test.spec.labels,
        ckpt.meta.trainable_params,
        options.seed,
    ))
}

/// Scores the ground-truth speech tokens themselves.
pub fn evaluate_oracle(test: TestSet<'_>, model: &str) -> Result<EvalReport> {
    let classifier = BayesClassifier::new(test.spec, test.codec)?;
    let mut tally = Tally::new(test.spec.n_emotions());
    for u in test.utterances {
        tally.counts[u.emotion] += 1;
        if classifier.classify(&u.speech).emotion == u.emotion {
            tally.correct[u.emotion] += 1;
        }
        tally.cer_sum += content_error_rate(&u.speech, &u.script, test.codec)?;
    }
    Ok(tally.into_report(model.to_string(), None, &test.spec.labels, 0, 0))
}

/// One [`evaluate`] per gain, all with the same seed.
pub fn alpha_sweep(
    ckpt: &TrainedCheckpoint,
    test: TestSet<'_>,
    alphas: &[f64],
    model: &str,
    options: EvalOptions,
) -> Result<SweepResult> {
    if ckpt.steer.is_none() {
        return Err(Error::Config(format!(
            "cannot sweep alpha on a {} checkpoint without steering",
            ckpt.meta.regime
        )));
    }
    check_alphas(alphas)?;
    let points = alphas
        .iter()
        .map(|&a| {
            let r = evaluate(ckpt, test, Some(a), model, options)?;
            Ok(SweepPoint {
                alpha: a,
                overall: r.overall,
                content_error_rate: r.content_error_rate,
                unterminated: r.unterminated,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        model: model.to_string(),
        seed: options.seed,
        points,
    })
}

/// Two-column CSV `alpha,overall_accuracy`.
pub fn sweep_csv(sweep: &SweepResult) -> String {
    let mut out = String::from("alpha,overall_accuracy\n");
    for p in &sweep.points {
        let _ = writeln!(out, "{},{}", p.alpha, p.overall);
    }
    out
}

/// Aligned text table, one row per report in the given order.
pub fn compare_table(reports: &[EvalReport]) -> Result<String> {
    let Some(first) = reports.first() else {
        return Err(Error::Config("no reports to tabulate".into()));
    };
    let mut header = vec!["model".to_string(), "alpha".into(), "params".into(), "CER".into()];
    header.extend(first.labels.iter().cloned());
    header.push("overall".into());
    header.push("unterm".into());
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![
                r.model.clone(),
                r.alpha.map_or("-".into(), |a| format!("{a}")),
                r.trainable_params.to_string(),
                format!("{:.4}", r.content_error_rate),
            ];
            row.extend(r.per_emotion.iter().map(|a| format!("{a:.2}")));
            row.push(format!("{:.2}", r.overall));
            row.push(format!("{:.3}", r.unterminated));
            row
        })
        .collect();
    let columns = rows.iter().map(Vec::len).chain([header.len()]).max().unwrap_or(0);
    let widths: Vec<usize> = (0..columns)
        .map(|c| {
            rows.iter()
                .chain([&header])
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i == 0 {
                    format!("{s:<w$}", w = widths[i])
                } else {
                    format!("{s:>w$}", w = widths[i])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&header);
    for row in &rows {
        line(row);
    }
    Ok(out)
}

pub fn reports_to_json(reports: &[EvalReport]) -> Result<String> {
    serde_json::to_string_pretty(reports)
        .map(|s| s + "\n")
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn reports_from_json(text: &str) -> Result<Vec<EvalReport>> {
    serde_json::from_str(text).map_err(|e| Error::Format(format!("reports: {e}")))
}
