pub mod bttr;
mod codec;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod metrics;
pub mod sparse_tucker;
pub mod tensor;

pub use error::{Error, Result};
