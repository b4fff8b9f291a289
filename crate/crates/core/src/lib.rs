pub mod cure;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod mixed;
pub mod optim;
pub mod prediction;
pub mod simulation;

pub use error::{Error, Result};
