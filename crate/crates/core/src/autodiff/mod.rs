//! Reverse-mode differentiation over whole-array ops.

pub mod gradcheck;
mod graph;
mod ops;
mod param;

pub use graph::{BinaryKind, Gradients, Graph, OpKind, UnaryKind, Var};
pub use param::{ParamId, ParamStore, Parameter};


#[cfg(test)]
mod tests;
