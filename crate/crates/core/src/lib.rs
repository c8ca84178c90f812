//! Mixed-precision quantization search where each (edge, bit-width) pair is
//! a player in a cooperative game and architecture parameters follow
//! momentum-smoothed Monte-Carlo Shapley estimates.

pub mod analysis;
pub mod cli;
pub mod cost;
pub mod data;
pub mod error;
pub mod game;
pub mod nn;
pub mod quant;
pub mod search;
pub mod seed;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
