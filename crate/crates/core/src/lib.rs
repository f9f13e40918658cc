pub mod config;
pub mod encoding;
pub mod error;
pub mod filters;
pub mod forensics;
pub mod model;
pub mod reports;
pub mod seeds;
pub mod sweeps;
pub mod tasks;
pub mod training;
pub mod tensor;

pub use error::{LabError, Result};
