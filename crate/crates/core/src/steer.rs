// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-emotion steering layer.
//!
//! Each emotion `e` owns a `d × d` projection `W_e`. A hidden row `h` is
//! shifted along the emotion-dependent direction `h · W_e`:
//!
//! ```text
//! h' = h + α · ε · (h · W_e)
//! ```
//!
//! `ε` is a small fixed base scale and `α` an inference-time gain. Training
//! always runs at `α = 1`; raising `α` at inference amplifies the learned
//! offset, `α = 0` recovers the unsteered model exactly.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Initialisation scheme for the projection matrices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", deny_unknown_fields)]
pub enum SteerInit {
    #[default]
    Zeros,
    Gaussian {
        std: f64,
    },
}

/// The bank of per-emotion projections plus the base scale `ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct SteerBank<T> {
    weights: Vec<Tensor<T>>,
    epsilon: f64,
}

impl<T: Scalar> SteerBank<T> {
    pub fn new(weights: Vec<Tensor<T>>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "steering epsilon must be positive, got {epsilon}"
            )));
        }
        let Some(first) = weights.first() else {
            return Err(Error::Config("steering bank needs at least one emotion".into()));
        };
        let d = first.rows();
        for (e, w) in weights.iter().enumerate() {
            if w.shape() != [d, d] {
                return Err(Error::Shape(format!(
                    "steering matrix {e} has shape {:?}, expected [{d}, {d}]",
                    w.shape()
                )));
            }
        }
        Ok(SteerBank { weights, epsilon })
    }

    pub fn init(n_emotions: usize, d_model: usize, epsilon: f64, init: SteerInit, seed: u64) -> Result<Self> {
        let weights = match init {
            SteerInit::Zeros => (0..n_emotions).map(|_| Tensor::zeros(&[d_model, d_model])).collect(),
            SteerInit::Gaussian { std } => {
                if !(std > 0.0 && std.is_finite()) {
                    return Err(Error::Config(format!(
                        "gaussian steering init needs std > 0, got {std}"
                    )));
                }
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n_emotions)
                    .map(|e| {
                        let mut r = rng::stream(seed, "steer-init", e as u64);
                        let data = (0..d_model * d_model)
                            .map(|_| T::from_f64(normal.sample(&mut r)))
                            .collect();
                        Tensor::new(&[d_model, d_model], data)
                    })
                    .collect::<Result<_>>()?
            }
        };
        Self::new(weights, epsilon)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn n_emotions(&self) -> usize {
        self.weights.len()
    }

    pub fn d_model(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn weight(&self, emotion: usize) -> Result<&Tensor<T>> {
        self.weights.get(emotion).ok_or(Error::OutOfRange {
            what: "emotion",
            index: emotion,
            limit: self.weights.len(),
        })
    }

    pub fn weights(&self) -> &[Tensor<T>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.weights
    }

    /// Trainable parameter count, `E · d²`.
    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.data().iter().all(|x| *x == T::zero()))
    }

    /// Registers the projections on a tape.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundSteer {
        let weights = self
            .weights
            .iter()
            .map(|w| {
                if trainable {
                    tape.param(w.clone())
                } else {
                    tape.constant(w.clone())
                }
            })
            .collect();
        BoundSteer {
            weights,
            epsilon: self.epsilon,
        }
    }
}

/// A [`SteerBank`] registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundSteer {
    pub weights: Vec<Var>,
    pub epsilon: f64,
}

fn check_gain(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!(
            "steering gain must be finite and >= 0, got {alpha}"
        )));
    }
    Ok(())
}

/// `h + α·ε·(h·W_e)` applied to every row of `h`.
pub fn steer<T: Scalar>(tape: &mut Tape<T>, h: Var, emotion: usize, alpha: f64, bank: &BoundSteer) -> Result<Var> {
    check_gain(alpha)?;
    let w = *bank.weights.get(emotion).ok_or(Error::OutOfRange {
        what: "emotion",
        index: emotion,
        limit: bank.weights.len(),
    })?;
    let offset = tape.matmul(h, w)?;
    let offset = tape.scale(offset, alpha * bank.epsilon)?;
    tape.add(h, offset)
}

/// Steers selected rows of `h`, each with its own emotion.
///
/// `rows_by_emotion[e]` lists the rows steered by `W_e`; rows not listed
/// pass through unchanged.
pub fn steer_rows<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    rows_by_emotion: &[Vec<usize>],
    alpha: f64,
    bank: &BoundSteer,
) -> Result<Var> {
    check_gain(alpha)?;
    if rows_by_emotion.len() > bank.weights.len() {
        return Err(Error::OutOfRange {
            what: "emotion",
            index: rows_by_emotion.len() - 1,
            limit: bank.weights.len(),
        });
    }
    let n_rows = tape.value(h).rows();
    let mut total: Option<Var> = None;
    for (e, rows) in rows_by_emotion.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let picked = tape.gather_rows(h, rows)?;
        let shifted = tape.matmul(picked, bank.weights[e])?;
        let placed = tape.scatter_rows(shifted, rows, n_rows)?;
        total = Some(match total {
            Some(t) => tape.add(t, placed)?,
            None => placed,
        });
    }
    let Some(total) = total else {
        return Ok(h);
    };
    let offset = tape.scale(total, alpha * bank.epsilon)?;
    tape.add(h, offset)
}

/// Untracked convenience form of [`steer`].
pub fn steer_tensor<T: Scalar>(h: &Tensor<T>, emotion: usize, alpha: f64, bank: &SteerBank<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let bound = bank.bind(&mut tape, false);
    let out = steer(&mut tape, hv, emotion, alpha, &bound)?;
    Ok(tape.value(out).clone())
}
