//! Zero-shot emotion detection and emotional reasoning over text corpora.
//!
//! - [`backend`]: text-generation and token-embedding backends, response cache
//! - [`prompts`]: prompt templates and rendering
//! - [`pipeline`]: contexts, per-context classification, voting, reasoning samples
//! - [`selection`]: output parsing, similarity and top-k label/explanation selection
//! - [`corpus`]: datasets, augmented output, metrics, annotation

pub mod backend;
pub mod corpus;
pub mod pipeline;
pub mod prompts;
pub mod selection;
