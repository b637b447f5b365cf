pub mod autograd;
pub mod data;
pub mod diagnostics;
pub mod distributions;
pub mod error;
pub mod mmd;
pub mod model;
pub mod objective;
pub mod trainer;

pub use error::{Error, Result};
