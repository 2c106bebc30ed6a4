pub mod backbone;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod persist;
pub mod pipeline;
pub mod rng;
pub mod scorer;
pub mod tensor;
pub mod trainer;
pub mod transfer;
pub mod vae;

pub use error::{Error, Result};
