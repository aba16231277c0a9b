//! Command implementations behind the `bitstash` binary.
//!
//! Every command produces its report as a string (CSV or markdown) plus any
//! warning lines; the binary writes the report to stdout or atomically to
//! `--out` and sends warnings to stderr.

pub mod args;
pub mod bench;
pub mod footprint;
pub mod hist;
pub mod opcount;
pub mod output;
pub mod train_cmd;

pub use args::{Cli, Command};

/// A command's rendered report and any diagnostics for stderr.
pub struct CommandOutput {
    pub text: String,
    pub warnings: Vec<String>,
}

impl CommandOutput {
    pub fn new(text: String) -> Self {
        Self { text, warnings: Vec::new() }
    }
}
