pub mod cli;
pub mod data;
pub mod engine;
pub mod error;

pub use error::{Error, Result};
pub mod gradcheck;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod regnet;
pub mod rem;
pub mod resample;
pub mod trainer;
