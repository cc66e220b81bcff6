//! Toolkit for stabilized dense material segmentation training.

pub mod augment;
pub mod cli;
pub mod error;
pub mod ingest;
pub mod io;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod split;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
