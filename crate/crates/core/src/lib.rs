pub mod attack;
pub mod distill;
pub mod error;
pub mod harness;
pub mod model;
pub mod quant;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
