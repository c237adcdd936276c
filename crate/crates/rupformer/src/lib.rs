//! File formats, checkpoints and the command line around `rupformer-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod csv_io;
pub mod error;
pub mod forecast;
pub mod fsutil;
pub mod report;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{Error, Result};
