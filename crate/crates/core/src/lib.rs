//! Retrieval-augmented intent classification with label refinement.
//!
//! The pipeline: embed a query, retrieve its nearest train examples, ask a
//! chat backend to rewrite ambiguous intent names for just those examples,
//! classify against the rewritten names, and map the answer back to the
//! original label space for scoring.

pub mod classify;
pub mod config;
pub mod corpus;
pub mod embed;
pub mod eval;
pub mod gateway;
pub mod pipeline;
pub mod refine;
