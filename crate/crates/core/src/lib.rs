pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod exit_policy;
pub mod flops;
pub mod halt_copy;
pub mod math;
pub mod training;

pub use error::{Error, Result};
