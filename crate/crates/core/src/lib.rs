//! Codebook-factorized soft prompts for a small frozen transformer.

pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod factorization;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod prompt;
pub mod taskbench;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
