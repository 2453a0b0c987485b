pub mod clue;
pub mod data;
pub mod dccrn;
pub mod error;
pub mod nn;
pub mod signal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
