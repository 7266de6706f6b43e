//! File formats, dataset folders and the training driver behind the
//! `semi-llie` command.

pub mod archive;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fit;
pub mod imageio;

pub use error::{CliError, Result};
