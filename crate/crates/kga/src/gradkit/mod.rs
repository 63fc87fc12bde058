//! Minimal reverse-mode automatic differentiation over dense f64 arrays,
//! plus the Adam optimizer used by every training and unlearning loop.
//!
//! Graphs are built explicitly (shapes checked at construction), evaluated
//! with [`forward`], and differentiated with [`backward`]. Everything is
//! single-threaded and deterministic; arrays and graphs are immutable after
//! construction.

mod adam;
mod array;
mod graph;

pub use adam::{adam_step, AdamConfig, AdamState, Schedule, StepOutcome};
pub use array::DenseArray;
pub use graph::{backward, forward, grad_check, Evaluation, GradMap, Graph, Inputs, NodeId, ParamSet};
