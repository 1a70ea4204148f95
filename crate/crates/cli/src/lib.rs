//! Experiment runner behind the `accept` binary.

pub mod commands;
pub mod error;
pub mod runner;
pub mod spec;
