//! Load forecasting with a purified pattern pool and echo-based feature
//! reconstruction inside a transformer encoder-decoder.

pub mod array;
pub mod data;
pub mod decomposition;
pub mod echo;
pub mod error;
pub mod model;
pub mod pool;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
