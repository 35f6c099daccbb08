//! MetaEOL: training-free sentence embeddings from meta-task prompts.
//!
//! A sentence is wrapped in several task prompts, each ending in a one-word
//! answer cue; the last-token hidden state of a causal language model is read
//! for every prompt and the vectors are aggregated into one embedding.

pub mod backend;
pub mod config;
pub mod embed;
pub mod error;
pub mod experiments;
pub mod probe;
pub mod prompts;
pub mod storage;
pub mod sts;
pub mod transfer;
