//! Conditional-model estimation with noise-contrastive objectives.

pub mod asymptotics;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod optimize;
pub mod rng;
pub mod sampling;

pub use error::{Error, ErrorKind, Result};
