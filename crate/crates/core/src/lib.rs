//! Temporal knowledge graph completion with Gumbel boxes and Bernstein-polynomial
//! time embeddings.

pub mod box_algebra;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod evaluator;
pub mod grad;
pub mod model;
pub mod quad_store;
pub mod synthetic;
pub mod time_codec;
pub mod trainer;
