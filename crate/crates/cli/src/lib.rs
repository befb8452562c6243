//! Command-line orchestration: configuration, the training loop and the
//! subcommands behind the `civt` binary.

pub mod commands;
pub mod config;
pub mod train;

pub use config::{DatasetKind, RunConfig};

/// The machine-readable failure line printed before a nonzero exit.
pub fn error_line(kind: &str, message: &str) -> String {
    format!("error: kind={kind} message={message:?}")
}
