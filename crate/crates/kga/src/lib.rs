//! Machine unlearning by knowledge-gap alignment.
//!
//! The crate removes the influence of a forget set from a trained model by
//! aligning two "knowledge gaps": the output-distribution distance between
//! the deployed model and a helper trained only on the forget set is driven
//! toward the distance the deployed model shows against a helper trained on
//! fresh, never-seen data. Exact baselines (full retraining, sharded
//! retraining) and an approximate baseline (random-teacher distillation)
//! are included for comparison, along with the divergence metrics, task
//! metrics, and a black-box membership-inference harness used to audit
//! forgetting.
//!
//! Module map:
//!
//! - [`gradkit`] — reverse-mode autodiff over dense f64 arrays + Adam
//! - [`models`] — desk-scale text classifier and seq2seq models
//! - [`data`] — corpora, synthetic generators, forget/retain splits
//! - [`unlearn`] — gap alignment, retraining, sharded and random-teacher baselines
//! - [`eval`] — divergence/task metrics and the membership-inference attack
//! - [`harness`] — experiment configs, presets, reports, and the CLI surface
//!
//! See the crate `examples/` directory for one runnable walkthrough per
//! capability; `cargo run --example unlearn_classification` is a good start.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradkit;
pub mod harness;
pub mod models;
pub mod unlearn;
pub mod util;

pub use error::{Error, Result};
