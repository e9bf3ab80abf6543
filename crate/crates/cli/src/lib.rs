//! Pipeline behind the `ndi` binary: demonstrations, density fitting,
//! training, evaluation and theory verification.

pub mod commands;
pub mod config;
pub mod demos;
pub mod verify;
mod error;

pub use error::CliError;
