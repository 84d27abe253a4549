pub mod association;
pub mod cli;
pub mod data_io;
pub mod error;
pub mod hungarian;
pub mod matcher;
pub mod metrics;
pub mod numerics;
pub mod rescoring;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
