//! Causal link discovery among events extracted from disaster tweets.
//!
//! The pipeline reads annotated tweets ([`ingest`]), turns every event into a
//! fused semantic/temporal/spatial vector ([`features`]), groups tweets into
//! fixed time windows and builds one heterogeneous graph per window
//! ([`graph`]), trains a two-layer multi-head graph attention network with a
//! focal-loss pair classifier ([`model`]) and scores the result ([`eval`]).
//! [`synth`] produces corpora with planted causal structure and [`pipeline`]
//! wires the stages into reproducible runs.

pub mod error;
pub mod eval;
pub mod features;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
pub use par::Exec;
