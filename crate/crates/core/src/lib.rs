// SPDX-License-Identifier: MIT OR Apache-2.0

//! Emotion-conditioned token generation with a trainable per-emotion
//! steering layer.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode gradient tape and AdamW.
//! - [`model`]: the conditional sequence layout and a small decoder-only
//!   transformer with autoregressive sampling.
//! - [`steer`]: the steering bank `W_e` and `h' = h + α·ε·(h·W_e)`.
//! - [`synthdata`]: a synthetic emotional corpus with an exact Bayes
//!   emotion classifier and a content error rate.
//! - [`training`]: teacher-forced training for the four regimes
//!   (`pretrain`, `sft`, `emoshift`, `sft-shift`).
//! - [`evaluation`]: per-emotion accuracy reports, gain sweeps and tables.
//! - [`config`] and [`checkpoint`]: run configuration and on-disk formats.
//! - [`pipeline`]: the end-to-end experiment and its artifact layout.

pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod steer;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Compiles and runs the guide's code snippets as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/steering.md")]
    mod steering {}
    #[doc = include_str!("../../../book/src/synthdata.md")]
    mod synthdata {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/results.md")]
    mod results {}
}
