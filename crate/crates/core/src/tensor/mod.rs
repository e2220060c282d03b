//! Dense tensors with reverse-mode differentiation, the Adam optimizer and
//! the cross-entropy loss.

mod adam;
pub mod gradcheck;
mod params;
mod scalar;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use params::{Param, ParamStore};
pub use scalar::Scalar;
pub use tape::{Tape, TensorNode, Var};

#[cfg(test)]
mod tests;
