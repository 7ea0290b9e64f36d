//! Diagnostics and postprocessing for rogue dimensions in contextual
//! embedding spaces.
//!
//! The crate reads per-layer token embeddings (EMB1) and prediction
//! distributions (DST1), decomposes cosine similarity into per-dimension
//! contributions, measures how much a few dimensions dominate similarity,
//! and evaluates postprocessing transforms against word-similarity data.

pub mod behavior;
pub mod config;
pub mod decomp;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod geometry;
pub mod informativity;
pub mod postprocess;
mod reduce;
pub mod report;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
pub use store::{EmbeddingCorpus, PairSample, TokenMeta};
