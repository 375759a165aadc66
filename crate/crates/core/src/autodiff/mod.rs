//! Minimal reverse-mode tensor engine.

mod graph;
mod optim;
mod real;
mod tensor;

pub use graph::{BatchStats, Gradients, Graph, NormMode, Var};
pub use optim::{Adam, AdamConfig};
pub use real::Real;
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};

#[cfg(test)]
mod tests;
