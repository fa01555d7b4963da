//! Experiment runner and property-suite drivers for trustlab.
//!
//! - [`config`]: the TOML experiment schema and `--set` overrides
//! - [`presets`]: named experiments, sweeps and the bound-verification sweep
//! - [`runner`]: runs with metrics CSV, config echo, summary and snapshots
//! - [`suites`]: bound and divergence property sweeps
//! - [`commands`]: subcommand bodies with exit-code mapping
//! - [`render`]: static SVG line charts
//! - [`reference`]: generated config reference page

// Negated float comparisons are deliberate: NaN must fail the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod presets;
pub mod reference;
pub mod render;
pub mod runner;
pub mod suites;

use std::fmt;

/// Why a command failed, which decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or config: exit 2.
    Usage(anyhow::Error),
    /// A checked property does not hold: exit 1.
    Violation(String),
    /// The command could not finish (I/O, gradient blowup): exit 1.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Violation(_) | Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(e) => write!(f, "error: {e:#}"),
            Failure::Violation(w) => write!(f, "property violation:\n{w}"),
            Failure::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

pub type CmdResult = Result<(), Failure>;
