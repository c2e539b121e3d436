pub mod bench;
pub mod config;
pub mod corpus;
pub mod error;
pub mod infer;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
