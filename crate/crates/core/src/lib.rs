pub mod apr;
pub mod error;
pub mod eval;
pub mod field;
pub mod imaging;
pub mod nn;
pub mod scene;
pub mod se3;
pub mod trainer;

pub use error::{Error, Result};
