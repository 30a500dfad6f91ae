//! On-disk formats, phantom dataset generation and the experiment drivers
//! behind the `dualprompt` command-line tool.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod volume_io;

pub use error::{Error, Result};
