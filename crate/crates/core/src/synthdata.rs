// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic emotional corpus with a fully known emotion signal.
//!
//! Every utterance pairs a script of content tokens with a speech sequence
//! of length `2n` that alternates the content image of `x_j` with a prosody
//! token drawn from the emotion's categorical distribution `π_e`:
//!
//! ```text
//! speech = [img(x_1), p_1, img(x_2), p_2, …, img(x_n), p_n],   p_j ~ π_e
//! ```
//!
//! Because `π_e` is known exactly, the Bayes-optimal emotion classifier is
//! available in closed form and stands in for a learned emotion recogniser.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_LABELS: [&str; 5] = ["neutral", "angry", "happy", "sad", "surprise"];

/// Probability floor applied before classification.
const PROB_FLOOR: f64 = 1e-9;

/// Per-emotion prosody distributions plus pretraining smoothing `λ`.
///
/// Emotion 0 is the neutral reference used by smoothing:
/// `π̃_e = (1 − λ)·π_e + λ·π_0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmotionSpec {
    pub labels: Vec<String>,
    pub prosody: Vec<Vec<f64>>,
    pub smoothing: f64,
}

impl EmotionSpec {
    /// Emotion `e` puts `peak` on prosody token `3e`, `shoulder` on `3e + 1`
    /// and spreads the remainder uniformly over the other tokens.
    pub fn peaked(labels: &[&str], n_prosody: usize, peak: f64, shoulder: f64, smoothing: f64) -> Result<Self> {
        let n_emotions = labels.len();
        if n_emotions == 0 || 3 * (n_emotions - 1) + 1 >= n_prosody {
            return Err(Error::Config(format!(
                "{n_prosody} prosody tokens cannot hold {n_emotions} peaked emotions"
            )));
        }
        let rest = (1.0 - peak - shoulder) / (n_prosody - 2) as f64;
        let prosody = (0..n_emotions)
            .map(|e| {
                let mut p = vec![rest; n_prosody];
                p[3 * e] = peak;
                p[3 * e + 1] = shoulder;
                p
            })
            .collect();
        let spec = EmotionSpec {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            prosody,
            smoothing,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.labels.len() != self.prosody.len() || self.labels.len() < 2 {
            return fail(format!(
                "{} labels for {} prosody distributions (need at least 2)",
                self.labels.len(),
                self.prosody.len()
            ));
        }
        let p = self.prosody[0].len();
        if p < 2 {
            return fail("need at least 2 prosody tokens".into());
        }
        for (e, dist) in self.prosody.iter().enumerate() {
            if dist.len() != p {
                return fail(format!(
                    "prosody distribution {e} has {} entries, expected {p}",
                    dist.len()
                ));
            }
            if dist.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return fail(format!("prosody distribution {e} has a negative or non-finite entry"));
            }
            let total: f64 = dist.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return fail(format!("prosody distribution {e} sums to {total}"));
            }
        }
        for a in 0..self.prosody.len() {
            for b in a + 1..self.prosody.len() {
                if self.prosody[a] == self.prosody[b] {
                    return fail(format!("emotions {a} and {b} share a prosody distribution"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            return fail(format!("smoothing {} outside [0, 1]", self.smoothing));
        }
        Ok(())
    }

    pub fn n_emotions(&self) -> usize {
        self.labels.len()
    }

    pub fn n_prosody(&self) -> usize {
        self.prosody[0].len()
    }

    /// Distribution used to sample prosody for `kind`.
    pub fn sampling_distribution(&self, emotion: usize, kind: CorpusKind) -> Vec<f64> {
        let lambda = match kind {
            CorpusKind::Emotional => 0.0,
            CorpusKind::Pretraining => self.smoothing,
        };
        self.prosody[emotion]
            .iter()
            .zip(&self.prosody[0])
            .map(|(&pe, &pn)| (1.0 - lambda) * pe + lambda * pn)
            .collect()
    }

    /// Resolves an emotion given by label or by index.
    pub fn resolve(&self, name: &str) -> Result<usize> {
        if let Some(i) = self.labels.iter().position(|l| l.eq_ignore_ascii_case(name)) {
            return Ok(i);
        }
        match name.parse::<usize>() {
            Ok(i) if i < self.labels.len() => Ok(i),
            _ => Err(Error::Config(format!(
                "unknown emotion {name:?}; expected one of {:?} or an index",
                self.labels
            ))),
        }
    }
}

/// Which prosody distributions a corpus is sampled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    /// Full-strength `π_e`.
    Emotional,
    /// Smoothed `π̃_e`, used to pretrain the backbone.
    Pretraining,
}

/// Mapping between content/prosody symbols and speech token ids.
///
/// Speech ids `0..content_vocab` are the content images (the identity map on
/// content tokens); prosody token `p` is speech id `content_vocab + p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeechCodec {
    pub content_vocab: usize,
    pub n_prosody: usize,
}

impl SpeechCodec {
    pub fn speech_vocab(&self) -> usize {
        self.content_vocab + self.n_prosody
    }

    pub fn content_image(&self, x: usize) -> usize {
        x
    }

    pub fn prosody_token(&self, p: usize) -> usize {
        self.content_vocab + p
    }

    pub fn decode_content(&self, y: usize) -> Option<usize> {
        (y < self.content_vocab).then_some(y)
    }

    pub fn decode_prosody(&self, y: usize) -> Option<usize> {
        (self.content_vocab..self.speech_vocab())
            .contains(&y)
            .then(|| y - self.content_vocab)
    }

    /// Clean speech encoding of a script with the given prosody symbols.
    pub fn encode(&self, script: &[usize], prosody: &[usize]) -> Vec<usize> {
        script
            .iter()
            .zip(prosody)
            .flat_map(|(&x, &p)| [self.content_image(x), self.prosody_token(p)])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub script_id: usize,
    pub speaker: usize,
    pub emotion: usize,
    pub script: Vec<usize>,
    pub speech: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub train_scripts: usize,
    pub dev_scripts: usize,
    pub test_scripts: usize,
    pub n_speakers: usize,
    pub min_script_len: usize,
    pub max_script_len: usize,
    pub content_vocab: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_scripts: 300,
            dev_scripts: 20,
            test_scripts: 30,
            n_speakers: 4,
            min_script_len: 8,
            max_script_len: 16,
            content_vocab: 16,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_scripts == 0 || self.dev_scripts == 0 || self.test_scripts == 0 {
            return Err(Error::Config("every split needs at least one script".into()));
        }
        if self.n_speakers == 0 {
            return Err(Error::Config("need at least one speaker".into()));
        }
        if self.min_script_len == 0 || self.min_script_len > self.max_script_len {
            return Err(Error::Config(format!(
                "script length range {}..={} is empty",
                self.min_script_len, self.max_script_len
            )));
        }
        if self.content_vocab < 2 {
            return Err(Error::Config("content vocabulary needs at least 2 tokens".into()));
        }
        Ok(())
    }
}

/// Metadata stored next to the split files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusMeta {
    pub seed: u64,
    pub kind: CorpusKind,
    pub spec: EmotionSpec,
    pub config: CorpusConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn codec(&self) -> SpeechCodec {
        SpeechCodec {
            content_vocab: self.meta.config.content_vocab,
            n_prosody: self.meta.spec.n_prosody(),
        }
    }
}

/// Generates a corpus: every script is instantiated for every
/// (speaker, emotion) pair inside its split.
pub fn gen_corpus(spec: &EmotionSpec, config: &CorpusConfig, kind: CorpusKind, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    config.validate()?;
    let codec = SpeechCodec {
        content_vocab: config.content_vocab,
        n_prosody: spec.n_prosody(),
    };
    let samplers = (0..spec.n_emotions())
        .map(|e| WeightedIndex::new(spec.sampling_distribution(e, kind)).map_err(|err| Error::Config(err.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let prosody_purpose = match kind {
        CorpusKind::Emotional => "prosody",
        CorpusKind::Pretraining => "prosody-pretrain",
    };

    let n_scripts = config.train_scripts + config.dev_scripts + config.test_scripts;
    let mut splits = [Vec::new(), Vec::new(), Vec::new()];
    let mut utterance_index = 0u64;
    for script_id in 0..n_scripts {
        let mut r = rng::stream(seed, "script", script_id as u64);
        let len = r.random_range(config.min_script_len..=config.max_script_len);
        let script: Vec<usize> = (0..len).map(|_| r.random_range(0..config.content_vocab)).collect();
        let split = if script_id < config.train_scripts {
            0
        } else if script_id < config.train_scripts + config.dev_scripts {
            1
        } else {
            2
        };
        for speaker in 0..config.n_speakers {
            for (emotion, sampler) in samplers.iter().enumerate() {
                let mut pr = rng::stream(seed, prosody_purpose, utterance_index);
                utterance_index += 1;
                let prosody: Vec<usize> = (0..len).map(|_| sampler.sample(&mut pr)).collect();
                splits[split].push(Utterance {
                    script_id,
                    speaker,
                    emotion,
                    speech: codec.encode(&script, &prosody),
                    script: script.clone(),
                });
            }
        }
    }
    let [train, dev, test] = splits;
    Ok(Corpus {
        meta: CorpusMeta {
            seed,
            kind,
            spec: spec.clone(),
            config: config.clone(),
        },
        train,
        dev,
        test,
    })
}

const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl` and `meta.json`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, split) in SPLITS.iter().zip([&corpus.train, &corpus.dev, &corpus.test]) {
        let path = dir.join(format!("{name}.jsonl"));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for u in split {
            let line = serde_json::to_string(u).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("meta.json");
    let meta = serde_json::to_string_pretty(&corpus.meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, meta + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CorpusMeta =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut splits = Vec::new();
    for name in SPLITS {
        let path = dir.join(format!("{name}.jsonl"));
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let u: Utterance =
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
            out.push(u);
        }
        splits.push(out);
    }
    let test = splits.pop().unwrap_or_default();
    let dev = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(Corpus { meta, train, dev, test })
}

/// Output of [`BayesClassifier::classify`].
#[derive(Clone, Debug, PartialEq)]
pub struct BayesDecision {
    pub emotion: usize,
    pub posterior: Vec<f64>,
    /// No usable prosody evidence; the posterior is uniform.
    pub degenerate: bool,
}

/// Exact posterior over emotions from prosody tokens under a uniform prior.
#[derive(Clone, Debug)]
pub struct BayesClassifier {
    log_prob: Vec<Vec<f64>>,
    codec: SpeechCodec,
}

impl BayesClassifier {
    pub fn new(spec: &EmotionSpec, codec: SpeechCodec) -> Result<Self> {
        spec.validate()?;
        if codec.n_prosody != spec.n_prosody() {
            return Err(Error::Config(format!(
                "codec has {} prosody tokens, spec {}",
                codec.n_prosody,
                spec.n_prosody()
            )));
        }
        let log_prob = spec
            .prosody
            .iter()
            .map(|dist| {
                let floored: Vec<f64> = dist.iter().map(|&p| p.max(PROB_FLOOR)).collect();
                let total: f64 = floored.iter().sum();
                floored.iter().map(|p| (p / total).ln()).collect()
            })
            .collect();
        Ok(BayesClassifier { log_prob, codec })
    }

    /// Classifies a speech sequence from its prosody positions (odd indices).
    ///
    /// Tokens at prosody positions that are not prosody tokens carry no
    /// evidence. Ties go to the lowest emotion id.
    pub fn classify(&self, speech: &[usize]) -> BayesDecision {
        let counts = self.prosody_counts(speech);
        self.classify_counts(&counts)
    }

    fn prosody_counts(&self, speech: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.codec.n_prosody];
        for &y in speech.iter().skip(1).step_by(2) {
            if let Some(p) = self.codec.decode_prosody(y) {
                counts[p] += 1;
            }
        }
        counts
    }

    pub(crate) fn classify_counts(&self, counts: &[usize]) -> BayesDecision {
        let n_emotions = self.log_prob.len();
        if counts.iter().all(|&c| c == 0) {
            return BayesDecision {
                emotion: 0,
                posterior: vec![1.0 / n_emotions as f64; n_emotions],
                degenerate: true,
            };
        }
        let scores: Vec<f64> = self
            .log_prob
            .iter()
            .map(|lp| counts.iter().zip(lp).map(|(&c, &l)| c as f64 * l).sum())
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let posterior = weights.iter().map(|w| w / total).collect();
        // First index attaining the maximum score.
        let emotion = scores.iter().position(|&s| s == max).unwrap_or(0);
        BayesDecision {
            emotion,
            posterior,
            degenerate: false,
        }
    }
}

/// Convenience wrapper around [`BayesClassifier`].
pub fn bayes_classify(speech: &[usize], spec: &EmotionSpec, codec: SpeechCodec) -> Result<BayesDecision> {
    Ok(BayesClassifier::new(spec, codec)?.classify(speech))
}

/// Monte-Carlo estimate of the Bayes classifier's accuracy on utterances
/// drawn from the full-strength distributions with uniform emotion prior
/// and script lengths uniform in `len_range`.
pub fn expected_bayes_accuracy(
    spec: &EmotionSpec,
    len_range: (usize, usize),
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let codec = SpeechCodec {
        content_vocab: 1,
        n_prosody: spec.n_prosody(),
    };
    let classifier = BayesClassifier::new(spec, codec)?;
    let samplers = (0..spec.n_emotions())
        .map(|e| WeightedIndex::new(&spec.prosody[e]).map_err(|err| Error::Config(err.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut r = rng::stream(seed, "bayes-monte-carlo", 0);
    let mut correct = 0usize;
    let mut counts = vec![0usize; spec.n_prosody()];
    for _ in 0..samples {
        let emotion = r.random_range(0..spec.n_emotions());
        let len = r.random_range(len_range.0..=len_range.1);
        counts.iter_mut().for_each(|c| *c = 0);
        for _ in 0..len {
            counts[samplers[emotion].sample(&mut r)] += 1;
        }
        if classifier.classify_counts(&counts).emotion == emotion {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples as f64)
}

/// Levenshtein distance between two sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance between the decoded content positions (even indices) of
/// `speech` and `script`, divided by the script length.
///
/// Tokens at content positions that are not content images decode to a
/// sentinel that matches nothing.
pub fn content_error_rate(speech: &[usize], script: &[usize], codec: SpeechCodec) -> Result<f64> {
    if script.is_empty() {
        return Err(Error::Config("content error rate of an empty script".into()));
    }
    let decoded: Vec<usize> = speech
        .iter()
        .step_by(2)
        .map(|&y| codec.decode_content(y).unwrap_or(usize::MAX))
        .collect();
    Ok(edit_distance(&decoded, script) as f64 / script.len() as f64)
}
