//! One module per subcommand.

pub mod check;
pub mod eval;
pub mod simulate;
pub mod toy3d;
pub mod train;

use std::path::Path;

use anyhow::{Context, Result};

use crate::config::{Config, Schema};

/// Result of a command that ran to completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    /// A check or evaluation did not meet its bar; one line per failure.
    Fail(Vec<String>),
}

pub fn load_config(path: &Path, schemas: &[Schema], seed: Option<u64>) -> Result<Config> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    Config::parse(&text, schemas, seed).with_context(|| format!("invalid config {}", path.display()))
}
