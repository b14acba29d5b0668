pub mod embed;
pub mod episodes;
pub mod encoder;
pub mod error;
pub mod kernel;
pub mod loss;
pub mod rules;
pub mod runtime;
pub mod train;

pub use error::{Error, Result};
