//! Dataset files, checkpoints, run directories, tiled inference on large
//! rasters and the `roadseg` command line, on top of `roadseg-core`.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod outputs;

pub use error::{IoError, Result};
