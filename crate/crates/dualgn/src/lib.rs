//! Command-line front end for `dualgn-core`: configuration, IDX data,
//! CSV metrics, grid runs and the verification suites.

pub mod config;
pub mod error;
pub mod idx;
pub mod run;
pub mod verify;

pub use error::{CliError, Result};
