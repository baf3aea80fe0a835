//! Reasoning-trace hallucination analytics.
//!
//! The crate turns exported transformer activations into step-level reasoning
//! scores (mean Jensen–Shannon divergence between late-layer logit-lens
//! distributions and the final-layer distribution), derives the three
//! hallucination-pattern features, fits and applies the composite detector,
//! and computes potential-based shaped rewards for GRPO-style training.
//!
//! Module map:
//!
//! - [`trace_store`]: on-disk bundle format, validation, compaction
//! - [`segmentation`]: two-stage step splitting
//! - [`reasoning_score`]: logit lens, JSD, per-step scores
//! - [`pattern_metrics`]: CV, attention score, perplexity, PCC, triples
//! - [`rhd_detector`]: feature vectors, composite score, grid-search fitting
//! - [`eval_harness`]: AUC, PCC, MC1/MC2/MC3, hallucination-step locator
//! - [`grpo_shaping`]: clipped potentials, shaped rewards, advantages, invariance checks
//! - [`synthgen`]: seeded synthetic bundles with planted patterns
//! - [`cli`]: the `rhd` command-line front end

pub mod cli;
pub mod error;
pub mod eval_harness;
pub mod grpo_shaping;
pub mod pattern_metrics;
pub mod reasoning_score;
pub mod rhd_detector;
pub mod segmentation;
pub mod stats;
pub mod synthgen;
pub mod trace_store;

pub use error::{Error, Result};
pub use segmentation::{StepBoundaries, StepRange};
pub use trace_store::{open_bundle, write_bundle, TraceBundle, TraceLabel};
