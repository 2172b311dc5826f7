//! File formats, budgeted training runs and the command line for adaptlab.
//!
//! The algorithms live in `adaptlab-core`; this crate adds everything that
//! needs `std`: the binary container for weights, adapters and checkpoints,
//! corpus and CoNLL readers, flat TOML configs, metrics logs, wall-clock
//! budgets, the results store and the `adaptlab` binary.
#![forbid(unsafe_code)]

pub mod artifacts;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod corpus;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod results;
pub mod runner;
pub mod synthetic;

pub use error::{Error, Result};
