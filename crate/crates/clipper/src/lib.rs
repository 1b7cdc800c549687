//! clipper: training-free coreset selection for instruction-tuning datasets.
//!
//! The pipeline runs in two inference-only stages against a target model.
//! Stage one performs zero-shot inference over every sample and splits the
//! dataset into parameter knowledge (answered correctly) and world knowledge
//! (answered incorrectly). Stage two uses each parameter-knowledge sample as
//! a one-shot demonstration for R randomly drawn world-knowledge queries and
//! records how often the demonstration guides the model to a correct answer.
//! The resulting four-way partition (ICL_C / ICL_IC over PK, W2C / WW over WK)
//! feeds coreset combinations for downstream fine-tuning, alongside random and
//! mid-perplexity baselines and perplexity-distribution reports.

pub mod backend;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod judge;
pub mod manifest;
pub mod perplexity;
pub mod report;
pub mod selector;

/// Scalar type used for perplexities, histogram mass, and distances.
/// The math in [`perplexity`] is generic over `num_traits::Float`; the
/// pipeline instantiates it with this alias.
pub type Scalar = f64;

/// Tool version recorded in manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
