//! Conformal factuality pipeline: model clients with caching and cost
//! accounting, the per-record stages, and experiment orchestration.

pub mod cache;
pub mod config;
pub mod experiment;
pub mod http;
pub mod ledger;
pub mod llm;
pub mod nli;
pub mod scoring;
pub mod stages;
