pub mod data;
pub mod diagnostics;
pub mod diff;
pub mod error;
pub mod experiment;
pub mod model;
pub mod morph;
pub mod noise;
pub mod objective;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
