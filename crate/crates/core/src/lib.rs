//! Workbench for fused task-oriented (TOD) and open-domain (ODD) dialogs.
//!
//! The crate is organised around the life cycle of a fused corpus:
//!
//! - [`corpus`]: data model, MultiWOZ-style ingestion, delexicalization, JSONL
//!   persistence and corpus statistics.
//! - [`backends`]: pluggable generation backends (scripted stubs, an HTTP
//!   adapter, and a small trainable sequence model).
//! - [`intent`]: the TOD/ODD intent detector used to gate inserted chitchat.
//! - [`synthesis`]: enrichment of TOD dialogs with simulated ODD snippets.
//! - [`knowledge`]: database lookup and web-search routing.
//! - [`pivot`]: the unified `mode:query` state task, training examples and
//!   the interactive inference turn.
//! - [`evalkit`]: BLEU, Inform/Success, mode accuracy and the full-task metrics.
//! - [`fixtures`]: a deterministic synthetic MultiWOZ-like world used by tests,
//!   demos and the acceptance suite.

pub mod backends;
pub mod corpus;
pub mod evalkit;
pub mod fixtures;
pub mod intent;
pub mod knowledge;
pub mod pivot;
pub mod synthesis;
pub mod text;
