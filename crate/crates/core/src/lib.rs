//! Conformal factuality filtering for retrieval-augmented LLM outputs.
//!
//! A response is split into atomic claims, each claim gets a score, and a
//! threshold calibrated on labeled data removes the low-scoring claims so
//! that, with probability at least `1 - alpha`, everything left is factual.
//!
//! * [`model`]: records, claims, thresholds and their JSONL formats.
//! * [`conformal`]: candidate thresholds, calibration and filtering.
//! * [`scorers`]: entailment, model-confidence and synthetic scorers.
//! * [`metrics`]: factuality and informativeness metrics.
//! * [`robustness`]: distribution shift, distractors and simulation.
//! * [`flops`]: inference cost accounting.
//! * [`prompts`]: the prompt templates and reply parsing.

pub mod conformal;
pub mod error;
pub mod flops;
pub mod metrics;
pub mod model;
pub mod prompts;
pub mod rng;
pub mod robustness;
pub mod scorers;

pub use error::{Error, Result};
