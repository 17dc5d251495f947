//! Command implementations behind the `facekp` binary.

pub mod bench;
pub mod checks;
pub mod config;
pub mod detect;
pub mod error;
pub mod eval_cmd;
pub mod pnm;
pub mod prep;
pub mod selftest;
pub mod synthetic;

pub use error::{CliError, CliResult};
