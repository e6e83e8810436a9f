pub mod cost;
pub mod error;
pub mod exec;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod policy;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
