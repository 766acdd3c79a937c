//! Attention-regularized visual question answering on a synthetic
//! changing-priors benchmark.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffcore`]: dense `f64` arrays, tape-based reverse-mode differentiation, Adam.
//! - [`synthdata`]: benchmark generation, soft targets, JSON-lines splits.
//! - [`model`]: GRU question encoder, top-down attention, product-fusion predictor.
//! - [`attreg`]: key-object identification, ignored-object localization,
//!   curated (masked) samples and the combined training loss.
//! - [`faitheval`]: occlusion sweeps, region TVD curves, gradient saliency.
//! - [`train`]: the minibatch loop shared by every training regime.
//! - [`harness`]: pretraining, evaluation, baselines, experiments and reports.

pub mod attreg;
pub mod diffcore;
pub mod error;
pub mod faitheval;
pub mod harness;
pub mod model;
pub mod rng;
pub mod synthdata;
pub mod train;

pub use error::{DiffError, Error, Result};
