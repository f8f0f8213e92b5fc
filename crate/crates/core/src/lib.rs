//! Corpus synthesis and transfer experiments for small masked language models.
//!
//! The crate covers the whole loop: token laws ([`vocab`]), synthetic corpora
//! ([`corpusgen`]) and their statistics ([`corpusstats`]), a transformer MLM
//! encoder with hand-written gradients ([`model`]), the training regimes and
//! embedding surgery ([`training`]), downstream tasks and metrics ([`eval`]),
//! and config-driven orchestration ([`cli`]).

pub mod artifact;
pub mod cli;
pub mod corpusgen;
pub mod corpusstats;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
