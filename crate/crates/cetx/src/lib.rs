//! File formats, configuration, report tables and commands built on
//! `cetx-core`.

mod binio;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csv_input;
pub mod error;
pub mod reports;
pub mod windows_file;

pub use error::{Error, Result};
