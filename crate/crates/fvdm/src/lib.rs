//! File formats, TOML configuration and the command line for `fvdm-core`.

pub mod cli;
pub mod config;
mod error;
pub mod io;
pub mod oracle;

pub use error::{FvdmError, Result};
