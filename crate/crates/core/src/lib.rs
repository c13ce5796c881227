//! Desk-scale neural re-ranking pipeline.
//!
//! A BM25 first stage feeds a small transformer re-ranker. Between language
//! pre-training and relevance fine-tuning the encoder can be coarse-tuned on
//! query–document pairs mined from click logs, jointly predicting masked
//! tokens and whether the pair co-occurred. Everything runs on a single
//! machine: dense f64 tensors, a define-by-run autodiff graph rebuilt per
//! step, and deterministic seeded runs end to end.

pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod rankeval;
pub mod retrieval;
pub mod rng;
pub mod tokenizer;
pub mod train;

pub use error::Error;
