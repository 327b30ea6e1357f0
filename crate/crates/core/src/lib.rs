pub mod aggregation;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod init;
pub mod matching;
pub mod model;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
