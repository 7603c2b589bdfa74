pub mod config;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
