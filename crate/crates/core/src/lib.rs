//! Checkpoint-merging engine and contextual-grid toolkit for toy generative
//! recommenders: task-vector arithmetic, TIES/DARE subspace merging,
//! base-model replacement, temporal interpolation with recency-driven
//! lambda prediction, and an end-to-end synthetic grid pipeline.

pub mod counter_rng;
pub mod error;
pub mod eval;
pub mod grid;
pub mod merge;
pub mod pipeline;
pub mod recipe;
pub mod synth;
pub mod temporal;
pub mod tensor_store;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
