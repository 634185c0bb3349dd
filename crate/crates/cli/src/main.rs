// SPDX-License-Identifier: MIT OR Apache-2.0

//! `emotion-steer`: corpus generation, training, generation, evaluation,
//! gain sweeps and comparison tables from the command line.
//!
//! Exit codes: 0 on success, 1 for usage, configuration and input errors,
//! 2 when a runtime invariant is violated.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use emotion_steer::checkpoint;
use emotion_steer::config::RunConfig;
use emotion_steer::evaluation::{
    alpha_sweep, compare_table, evaluate, evaluate_oracle, parse_alphas, reports_from_json, reports_to_json, sweep_csv,
    EvalReport, TestSet,
};
use emotion_steer::model::{generate, Sampling, SequenceLayout};
use emotion_steer::pipeline::{self, checkpoint_path, corpus_dir, model_tag};
use emotion_steer::synthdata::{read_corpus, write_corpus, BayesClassifier, Corpus, CorpusKind};
use emotion_steer::training::{Init, Regime, TrainedCheckpoint};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "emotion-steer",
    version,
    about = "Per-emotion activation steering experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the emotional and pretraining corpora.
    Data {
        #[command(flatten)]
        common: Common,
        /// Output directory (defaults to the configured out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one regime and write its checkpoint and training log.
    Train {
        #[command(flatten)]
        common: Common,
        /// pretrain, sft, emoshift or sft-shift.
        #[arg(long)]
        regime: Regime,
        /// Checkpoint to start from (required for every regime but pretrain).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Corpus directory (defaults to <out_dir>/data/<kind>).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint path (defaults to <out_dir>/checkpoints/<regime>.emsh).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate speech tokens for one conditioning and classify them.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Emotion label or index.
        #[arg(long)]
        emotion: String,
        #[arg(long, default_value_t = 0)]
        speaker: usize,
        /// Content tokens, comma separated.
        #[arg(long)]
        script: String,
        /// Steering gain; only valid for checkpoints with steering.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "oracle")]
        ckpt: Option<PathBuf>,
        /// Score the ground-truth test tokens instead of a checkpoint.
        #[arg(long, conflicts_with_all = ["ckpt", "alpha"])]
        oracle: bool,
        /// Steering gain (defaults to eval.alpha for steered checkpoints).
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Report tag (defaults to the checkpoint's regime).
        #[arg(long)]
        model: Option<String>,
        /// Emotional corpus directory (defaults to <out_dir>/data/emotional).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report path (defaults to <out_dir>/reports/<model>.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a steered checkpoint over a list of gains.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// `start:stop:step` or a comma-separated list (defaults to eval.sweep_alphas).
        #[arg(long)]
        alphas: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output prefix; writes <prefix>.csv and <prefix>.json (defaults to <out_dir>/sweep).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate report files in the given order.
    Table {
        /// Report files, each holding one report or a list of reports.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the text table here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the combined reports as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Data, all four regimes, evaluation, sweep and table in one go.
    RunAll {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<Option<RunConfig>> {
    common
        .config
        .as_deref()
        .map(|p| RunConfig::load(p).map_err(Into::into))
        .transpose()
}

/// The explicit config, else the one recorded in the checkpoint, else defaults.
fn config_for(common: &Common, ckpt: &TrainedCheckpoint) -> Result<RunConfig> {
    Ok(match load_config(common)? {
        Some(c) => c,
        None => ckpt.meta.run_config.clone().unwrap_or_default(),
    })
}

fn load_corpus(dir: &Path, kind: CorpusKind) -> Result<Corpus> {
    let corpus = read_corpus(dir).with_context(|| {
        format!(
            "cannot read the corpus in {} (run `emotion-steer data` first)",
            dir.display()
        )
    })?;
    if corpus.meta.kind != kind {
        bail!(
            "{} holds a {:?} corpus, expected {kind:?}",
            dir.display(),
            corpus.meta.kind
        );
    }
    Ok(corpus)
}

fn load_checkpoint(path: &Path) -> Result<TrainedCheckpoint> {
    checkpoint::load(path).map_err(Into::into)
}

fn parse_script(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .with_context(|| format!("bad script token {s:?}"))
        })
        .collect()
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    pipeline::write_json(path, report)?;
    Ok(())
}

fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        Ok(reports_from_json(&text)?)
    } else {
        let report: EvalReport =
            serde_json::from_str(&text).with_context(|| format!("{} is not a report", path.display()))?;
        Ok(vec![report])
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Data { common, out } => {
            let config = load_config(&common)?.unwrap_or_default();
            let out = out.unwrap_or_else(|| config.out_dir.clone());
            let (emotional, pretraining) = pipeline::make_corpora(&config)?;
            for corpus in [&emotional, &pretraining] {
                let dir = corpus_dir(&out, corpus.meta.kind);
                write_corpus(corpus, &dir)?;
                println!(
                    "{}: {}/{}/{} utterances",
                    dir.display(),
                    corpus.train.len(),
                    corpus.dev.len(),
                    corpus.test.len()
                );
            }
        }
        Command::Train {
            common,
            regime,
            init,
            data,
            out,
        } => {
            let init = init.as_deref().map(load_checkpoint).transpose()?;
            let config = match (load_config(&common)?, &init) {
                (Some(c), _) => c,
                (None, Some(ckpt)) => ckpt.meta.run_config.clone().unwrap_or_default(),
                (None, None) => RunConfig::default(),
            };
            let data = data.unwrap_or_else(|| corpus_dir(&config.out_dir, regime.corpus_kind()));
            let out = out.unwrap_or_else(|| checkpoint_path(&config.out_dir, regime));
            let corpus = load_corpus(&data, regime.corpus_kind())?;
            let init = match &init {
                Some(ckpt) => Init::From(ckpt),
                None => Init::Fresh(&config.model),
            };
            let outcome = pipeline::train(&config, regime, &corpus, init, |r| {
                eprintln!(
                    "epoch {:>3}  step {:>6}  train {}  dev {:.5}",
                    r.epoch,
                    r.step,
                    r.train_loss.map_or("-".into(), |l| format!("{l:.5}")),
                    r.dev_loss
                );
            })?;
            pipeline::save_outcome(&outcome, &out)?;
            println!(
                "{}: {regime}, {} trainable parameters, dev loss {:.5}",
                out.display(),
                outcome.checkpoint.meta.trainable_params,
                outcome.checkpoint.final_dev_loss()
            );
        }
        Command::Generate {
            common,
            ckpt,
            emotion,
            speaker,
            script,
            alpha,
            seed,
            temperature,
            max_len,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let config = config_for(&common, &ckpt)?;
            let spec = config.emotions.spec()?;
            let emotion = spec.resolve(&emotion)?;
            if let Some(a) = alpha {
                if ckpt.steer.is_none() {
                    bail!(
                        "--alpha {a} given for a {} checkpoint without steering",
                        ckpt.meta.regime
                    );
                }
                if !(a >= 0.0 && a.is_finite()) {
                    bail!("--alpha must be finite and >= 0, got {a}");
                }
            }
            let steering = ckpt
                .steer
                .as_ref()
                .map(|bank| (bank, alpha.unwrap_or(config.eval.alpha)));
            let cond = SequenceLayout::conditioning(speaker, emotion, parse_script(&script)?);
            let sampling = Sampling {
                temperature: temperature.unwrap_or(config.eval.temperature),
                max_len: max_len.unwrap_or(config.eval.max_len),
            };
            let generation = generate(&ckpt.params, &cond, steering, seed, sampling)?;
            let decision = BayesClassifier::new(&spec, config.codec())?.classify(&generation.tokens);
            let posterior: serde_json::Map<String, serde_json::Value> = spec
                .labels
                .iter()
                .zip(&decision.posterior)
                .map(|(l, &p)| (l.clone(), p.into()))
                .collect();
            let doc = serde_json::json!({
                "tokens": generation.tokens,
                "terminated": generation.terminated,
                "emotion": spec.labels[emotion],
                "alpha": steering.map(|(_, a)| a),
                "classified": spec.labels[decision.emotion],
                "posterior": posterior,
            });
            println!("{doc}");
        }
        Command::Eval {
            common,
            ckpt,
            oracle,
            alpha,
            seed,
            model,
            data,
            out,
        } => {
            let ckpt = ckpt.as_deref().map(load_checkpoint).transpose()?;
            let config = match &ckpt {
                Some(ckpt) => config_for(&common, ckpt)?,
                None => load_config(&common)?.unwrap_or_default(),
            };
            let corpus = load_corpus(
                &data.unwrap_or_else(|| corpus_dir(&config.out_dir, CorpusKind::Emotional)),
                CorpusKind::Emotional,
            )?;
            let spec = config.emotions.spec()?;
            let test = TestSet {
                utterances: &corpus.test,
                spec: &spec,
                codec: corpus.codec(),
            };
            let mut options = pipeline::eval_options(&config);
            options.seed = seed.unwrap_or(options.seed);
            let (report, model) = match &ckpt {
                Some(ckpt) => {
                    let alpha = alpha.or(ckpt.steer.as_ref().map(|_| config.eval.alpha));
                    let model = model.unwrap_or_else(|| model_tag(ckpt.meta.regime).to_string());
                    (evaluate(ckpt, test, alpha, &model, options)?, model)
                }
                None => {
                    debug_assert!(oracle);
                    let model = model.unwrap_or_else(|| "ground-truth".into());
                    (evaluate_oracle(test, &model)?, model)
                }
            };
            pipeline::check_report(&report, Some(pipeline::bayes_ceiling(&config, &spec)?))?;
            let out = out.unwrap_or_else(|| config.out_dir.join("reports").join(format!("{model}.json")));
            write_report(&out, &report)?;
            print!("{}", compare_table(std::slice::from_ref(&report))?);
        }
        Command::Sweep {
            common,
            ckpt,
            alphas,
            seed,
            data,
            out,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let config = config_for(&common, &ckpt)?;
            let alphas = match alphas {
                Some(text) => parse_alphas(&text)?,
                None => config.eval.sweep_alphas.clone(),
            };
            let corpus = load_corpus(
                &data.unwrap_or_else(|| corpus_dir(&config.out_dir, CorpusKind::Emotional)),
                CorpusKind::Emotional,
            )?;
            let spec = config.emotions.spec()?;
            let test = TestSet {
                utterances: &corpus.test,
                spec: &spec,
                codec: corpus.codec(),
            };
            let mut options = pipeline::eval_options(&config);
            options.seed = seed.unwrap_or(options.seed);
            let sweep = alpha_sweep(&ckpt, test, &alphas, model_tag(ckpt.meta.regime), options)?;
            let ceiling = pipeline::bayes_ceiling(&config, &spec)?;
            for p in &sweep.points {
                pipeline::check_ceiling(
                    &format!("sweep at alpha {}", p.alpha),
                    p.overall,
                    ceiling,
                    corpus.test.len(),
                )?;
            }
            let prefix = out.unwrap_or_else(|| config.out_dir.join("sweep"));
            let csv = sweep_csv(&sweep);
            pipeline::write_text(&prefix.with_extension("csv"), &csv)?;
            pipeline::write_json(&prefix.with_extension("json"), &sweep)?;
            print!("{csv}");
        }
        Command::Table { reports, out, json } => {
            let mut all = Vec::new();
            for path in &reports {
                all.extend(read_reports(path)?);
            }
            let table = compare_table(&all)?;
            if let Some(path) = out {
                pipeline::write_text(&path, &table)?;
            }
            if let Some(path) = json {
                pipeline::write_text(&path, &reports_to_json(&all)?)?;
            }
            print!("{table}");
        }
        Command::RunAll { common, out } => {
            let config = load_config(&common)?.unwrap_or_default();
            let out = out.unwrap_or_else(|| config.out_dir.clone());
            let output = pipeline::run_all(&config, &out, |line| eprintln!("{line}"))?;
            let s = &output.summary;
            println!(
                "Bayes ceiling {:.2}, ground truth {:.2}",
                s.bayes_ceiling, s.ground_truth.overall
            );
            for (regime, count) in &s.trainable_params {
                println!("trainable {regime:<10} {count}");
            }
            println!("emoshift/sft parameter ratio {:.4}", s.param_ratio);
            println!("artifacts in {} ({:.1}s)", out.display(), output.timings.total);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let invariant = e.downcast_ref::<emotion_steer::Error>().is_some_and(|e| {
                matches!(
                    e,
                    emotion_steer::Error::Invariant(_) | emotion_steer::Error::NonFinite(_)
                )
            });
            ExitCode::from(if invariant { 2 } else { 1 })
        }
    }
}
