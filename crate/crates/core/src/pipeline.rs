// SPDX-License-Identifier: MIT OR Apache-2.0

//! The end-to-end experiment: corpora, the four training regimes, their
//! evaluation, a gain sweep and the comparison table, all written under one
//! output directory.
//!
//! ```text
//! <out>/config.toml
//! <out>/data/{emotional,pretraining}/{train,dev,test}.jsonl, meta.json
//! <out>/checkpoints/<regime>.emsh, <regime>.log.jsonl
//! <out>/reports/<model>.json, reports.json, table.txt
//! <out>/sweep.json, sweep.csv, summary.json
//! <out>/timings.json
//! ```
//!
//! Everything except the training logs' `wall_clock` field and
//! `timings.json` is a pure function of the configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{
    alpha_sweep, compare_table, evaluate, evaluate_oracle, reports_to_json, sweep_csv, EvalOptions, EvalReport,
    SweepResult, TestSet,
};
use crate::synthdata::{expected_bayes_accuracy, gen_corpus, write_corpus, Corpus, CorpusKind, EmotionSpec};
use crate::training::{run_regime_with, EpochRecord, Init, Regime, TrainOutcome, TrainedCheckpoint};

/// Minimum allowed excess of an evaluated accuracy over the Bayes ceiling,
/// in points.
pub const CEILING_SLACK: f64 = 2.0;

/// Allowed excess over the ceiling for an accuracy measured on `n`
/// utterances: [`CEILING_SLACK`] or three binomial standard errors,
/// whichever is larger.
pub fn ceiling_slack(ceiling: f64, n: usize) -> f64 {
    let p = (ceiling / 100.0).clamp(0.0, 1.0);
    let se = 100.0 * (p * (1.0 - p) / n.max(1) as f64).sqrt();
    CEILING_SLACK.max(3.0 * se)
}

/// Fails with [`Error::Invariant`] when `accuracy` beats the ceiling by
/// more than sampling noise allows.
pub fn check_ceiling(what: &str, accuracy: f64, ceiling: f64, n: usize) -> Result<()> {
    let slack = ceiling_slack(ceiling, n);
    if accuracy > ceiling + slack {
        return Err(Error::Invariant(format!(
            "{what}: accuracy {accuracy:.2} exceeds the Bayes ceiling {ceiling:.2} by more than {slack:.2} points"
        )));
    }
    Ok(())
}

/// Row order of the comparison table.
pub const TABLE_ORDER: [Regime; 4] = [Regime::Pretrain, Regime::Sft, Regime::SftShift, Regime::Emoshift];

/// Report tag of a regime's checkpoint.
pub fn model_tag(regime: Regime) -> &'static str {
    match regime {
        Regime::Pretrain => "backbone",
        other => other.as_str(),
    }
}

pub fn corpus_dir(out: &Path, kind: CorpusKind) -> PathBuf {
    out.join("data").join(match kind {
        CorpusKind::Emotional => "emotional",
        CorpusKind::Pretraining => "pretraining",
    })
}

pub fn checkpoint_path(out: &Path, regime: Regime) -> PathBuf {
    out.join("checkpoints").join(format!("{regime}.emsh"))
}

/// The training log that accompanies a checkpoint file.
pub fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("log.jsonl")
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// One JSON object per line: epoch, step, train loss, dev loss, wall clock.
pub fn write_training_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for record in log {
        text += &serde_json::to_string(record).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
    }
    write_text(path, &text)
}

/// Both corpora of a run, generated from the run seed.
pub fn make_corpora(config: &RunConfig) -> Result<(Corpus, Corpus)> {
    let spec = config.emotions.spec()?;
    let emotional = gen_corpus(&spec, &config.corpus, CorpusKind::Emotional, config.seed)?;
    let pretraining = gen_corpus(&spec, &config.corpus, CorpusKind::Pretraining, config.seed)?;
    Ok((emotional, pretraining))
}

/// Trains one regime and records the run configuration in the checkpoint.
pub fn train(
    config: &RunConfig,
    regime: Regime,
    corpus: &Corpus,
    init: Init<'_>,
    observe: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut outcome = run_regime_with(&config.train_config(regime), corpus, init, observe)?;
    outcome.checkpoint.meta.run_config = Some(config.clone());
    Ok(outcome)
}

/// Saves a checkpoint together with its training log.
pub fn save_outcome(outcome: &TrainOutcome, path: &Path) -> Result<()> {
    checkpoint::save(&outcome.checkpoint, path)?;
    write_training_log(&log_path(path), &outcome.log)
}

pub fn eval_options(config: &RunConfig) -> EvalOptions {
    EvalOptions {
        seed: config.seed,
        temperature: config.eval.temperature,
        max_len: config.eval.max_len,
        batch_size: config.eval.batch_size,
    }
}

/// Monte-Carlo Bayes accuracy of the configured emotions, in percent.
pub fn bayes_ceiling(config: &RunConfig, spec: &EmotionSpec) -> Result<f64> {
    let lengths = (config.corpus.min_script_len, config.corpus.max_script_len);
    Ok(100.0 * expected_bayes_accuracy(spec, lengths, config.eval.bayes_samples, config.seed)?)
}

/// Internal consistency of a report, and the accuracy ceiling.
pub fn check_report(report: &EvalReport, ceiling: Option<f64>) -> Result<()> {
    let fail = |m: String| Err(Error::Invariant(format!("report {}: {m}", report.model)));
    let n = report.labels.len();
    if report.per_emotion.len() != n || report.counts.len() != n {
        return fail("per-emotion columns do not match the labels".into());
    }
    let in_range = |x: f64| (0.0..=100.0).contains(&x);
    if !report.per_emotion.iter().copied().chain([report.overall]).all(in_range) {
        return fail("accuracy outside [0, 100]".into());
    }
    if !(report.content_error_rate >= 0.0 && (0.0..=1.0).contains(&report.unterminated)) {
        return fail("negative content error rate or unterminated fraction outside [0, 1]".into());
    }
    let mean = report.per_emotion.iter().sum::<f64>() / n as f64;
    if (mean - report.overall).abs() > 1e-9 {
        return fail(format!("overall {} is not the per-emotion mean {mean}", report.overall));
    }
    match ceiling {
        Some(ceiling) => check_ceiling(
            &format!("report {}", report.model),
            report.overall,
            ceiling,
            report.counts.iter().sum(),
        ),
        None => Ok(()),
    }
}

/// Deterministic results of a full run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSummary {
    pub seed: u64,
    /// Monte-Carlo Bayes accuracy of the emotion distributions, percent.
    pub bayes_ceiling: f64,
    /// The Bayes classifier on the ground-truth test tokens.
    pub ground_truth: EvalReport,
    pub trainable_params: Vec<(String, usize)>,
    /// Trainable parameters of emoshift over sft.
    pub param_ratio: f64,
    /// Table rows: backbone, sft, sft-shift, emoshift.
    pub reports: Vec<EvalReport>,
    pub sweep: SweepResult,
    /// Emoshift at the breakdown gain.
    pub breakdown: EvalReport,
    pub backbone_hash: String,
}

/// Wall-clock seconds per stage; not reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
    pub total: f64,
}

impl Timings {
    pub fn get(&self, stage: &str) -> Option<f64> {
        self.stages.iter().find(|(s, _)| s == stage).map(|&(_, t)| t)
    }
}

pub struct RunOutput {
    pub summary: PipelineSummary,
    pub checkpoints: Vec<TrainedCheckpoint>,
    pub timings: Timings,
}

/// Runs every stage and writes all artifacts under `out`.
///
/// `progress` receives one line per finished stage.
pub fn run_all(config: &RunConfig, out: &Path, mut progress: impl FnMut(&str)) -> Result<RunOutput> {
    config.validate()?;
    let clock = Instant::now();
    let mut timings = Timings::default();
    let mut lap = Instant::now();
    let mut stage = |name: &str, detail: String, progress: &mut dyn FnMut(&str)| {
        let secs = lap.elapsed().as_secs_f64();
        lap = Instant::now();
        timings.stages.push((name.to_string(), secs));
        progress(&format!("{name:<10} {secs:>8.1}s  {detail}"));
    };

    write_text(&out.join("config.toml"), &config.to_toml())?;
    let spec = config.emotions.spec()?;
    let (emotional, pretraining) = make_corpora(config)?;
    write_corpus(&emotional, &corpus_dir(out, CorpusKind::Emotional))?;
    write_corpus(&pretraining, &corpus_dir(out, CorpusKind::Pretraining))?;
    stage(
        "data",
        format!(
            "{}/{}/{} utterances",
            emotional.train.len(),
            emotional.dev.len(),
            emotional.test.len()
        ),
        &mut progress,
    );

    let run = |regime: Regime, corpus: &Corpus, init: Init<'_>| -> Result<TrainedCheckpoint> {
        let outcome = train(config, regime, corpus, init, |_| {})?;
        save_outcome(&outcome, &checkpoint_path(out, regime))?;
        Ok(outcome.checkpoint)
    };
    let pretrain = run(Regime::Pretrain, &pretraining, Init::Fresh(&config.model))?;
    stage(
        "pretrain",
        format!("dev loss {:.4}", pretrain.final_dev_loss()),
        &mut progress,
    );
    let sft = run(Regime::Sft, &emotional, Init::From(&pretrain))?;
    stage("sft", format!("dev loss {:.4}", sft.final_dev_loss()), &mut progress);
    let emoshift = run(Regime::Emoshift, &emotional, Init::From(&pretrain))?;
    stage(
        "emoshift",
        format!("dev loss {:.4}", emoshift.final_dev_loss()),
        &mut progress,
    );
    let sft_shift = run(Regime::SftShift, &emotional, Init::From(&sft))?;
    stage(
        "sft-shift",
        format!("dev loss {:.4}", sft_shift.final_dev_loss()),
        &mut progress,
    );

    let test = TestSet {
        utterances: &emotional.test,
        spec: &spec,
        codec: emotional.codec(),
    };
    let options = eval_options(config);
    let ceiling = bayes_ceiling(config, &spec)?;
    let ground_truth = evaluate_oracle(test, "ground-truth")?;
    check_report(&ground_truth, None)?;
    let checkpoints = [pretrain, sft, emoshift, sft_shift];
    let by_regime = |r: Regime| {
        checkpoints
            .iter()
            .find(|c| c.meta.regime == r)
            .expect("every regime was trained")
    };
    let mut reports = Vec::new();
    for regime in TABLE_ORDER {
        let ckpt = by_regime(regime);
        let alpha = ckpt.steer.as_ref().map(|_| config.eval.alpha);
        let report = evaluate(ckpt, test, alpha, model_tag(regime), options)?;
        check_report(&report, Some(ceiling))?;
        write_json(
            &out.join("reports").join(format!("{}.json", model_tag(regime))),
            &report,
        )?;
        reports.push(report);
    }
    write_text(&out.join("reports.json"), &reports_to_json(&reports)?)?;
    let table = compare_table(&reports)?;
    write_text(&out.join("table.txt"), &table)?;
    stage("eval", format!("Bayes ceiling {ceiling:.2}"), &mut progress);

    let emoshift = by_regime(Regime::Emoshift);
    let sweep = alpha_sweep(emoshift, test, &config.eval.sweep_alphas, "emoshift", options)?;
    for p in &sweep.points {
        check_ceiling(
            &format!("sweep at alpha {}", p.alpha),
            p.overall,
            ceiling,
            test.utterances.len(),
        )?;
    }
    write_json(&out.join("sweep.json"), &sweep)?;
    write_text(&out.join("sweep.csv"), &sweep_csv(&sweep))?;
    let breakdown = evaluate(emoshift, test, Some(config.eval.breakdown_alpha), "emoshift", options)?;
    check_report(&breakdown, Some(ceiling))?;
    stage(
        "sweep",
        format!("{} gains + breakdown", sweep.points.len()),
        &mut progress,
    );

    let count = |r: Regime| by_regime(r).meta.trainable_params;
    let summary = PipelineSummary {
        seed: config.seed,
        bayes_ceiling: ceiling,
        ground_truth,
        trainable_params: Regime::ALL.iter().map(|&r| (r.to_string(), count(r))).collect(),
        param_ratio: count(Regime::Emoshift) as f64 / count(Regime::Sft) as f64,
        reports,
        sweep,
        breakdown,
        backbone_hash: by_regime(Regime::Pretrain).meta.backbone_hash.clone(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    timings.total = clock.elapsed().as_secs_f64();
    write_json(&out.join("timings.json"), &timings)?;
    progress(&table);
    Ok(RunOutput {
        summary,
        checkpoints: checkpoints.into(),
        timings,
    })
}
