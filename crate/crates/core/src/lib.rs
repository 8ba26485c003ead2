//! Facet-learning prompt optimizer.
//!
//! A task prompt is kept as titled sections. An expert model proposes section
//! edits from the failures of one cluster of training data at a time, and a
//! small beam keeps the best candidates by accuracy.

pub mod accuracy;
pub mod cli;
pub mod clustering;
pub mod data;
pub mod evaluator;
pub mod feedback;
pub mod gateway;
pub mod optimizer;
pub mod probe;
pub mod prompt;
pub mod rng;
pub mod synth;
pub mod templates;
