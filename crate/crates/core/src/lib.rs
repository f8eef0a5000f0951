pub mod corpus;
pub mod detector;
pub mod digest;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod vocab;

pub use error::{Error, Result};
