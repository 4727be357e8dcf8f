//! File formats, run manifests and the command pipeline around
//! `catext-core`.

pub mod coco;
pub mod commands;
pub mod dump;
pub mod error;
pub mod files;
pub mod report;
pub mod settings;

pub use commands::{execute, rerun, Command, Manifest};
pub use error::{CliError, Result};
