//! Minimal dense-tensor engine: tensors, a reverse-mode tape, Adam, a
//! seeded generator and the "P23D" tensor segment format.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod rng;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{read_segment, write_segment, ParamSet};
pub use graph::{Gradients, Graph, Var};
pub use rng::{Rng, RNG_ALGORITHM};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
