pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod explain;
pub mod extract;
pub mod gat;
pub mod graph;
mod nn;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod vit;
pub mod volume;

pub use error::{Error, Result};
