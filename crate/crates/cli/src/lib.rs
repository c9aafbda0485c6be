//! Configuration, checkpoints, output layout and subcommands behind the
//! `fpdiff` binary.

pub mod build;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod output;
