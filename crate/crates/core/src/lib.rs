pub mod error;
pub mod accel;
pub mod generator;
pub mod harness;
pub mod numerics;
pub mod policy;
pub mod reward;
pub mod trainer;

pub use error::{Error, Result};
