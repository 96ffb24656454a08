//! Deterministic differentiable-computation substrate.

pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod matrix;
pub mod nn;
pub mod optim;
pub mod params;

pub use graph::{GradientReport, Graph, Mask, Var};
pub use matrix::{Mat, Matrix, Scalar};
pub use params::{Init, ParamId, ParamStore};
