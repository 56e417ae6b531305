//! Laboratory for compositional two-hop reasoning in weight-shared
//! transformers: synthetic knowledge graphs, a small reverse-mode tensor
//! engine, a recurrent-depth transformer, logit-lens circuit probing, and the
//! training loop that ties them together.

pub mod encoding;
pub mod error;
pub mod experiments;
pub mod kg;
pub mod model;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
