pub mod backbone;
pub mod config;
pub mod connector;
pub mod envsuite;
pub mod error;
pub mod evaluator;
pub mod heads;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
