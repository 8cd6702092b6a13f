pub mod cli;
pub mod datasets;
pub mod editors;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod harness;
pub mod models;
pub mod tensor;

pub use error::{Error, Result};
