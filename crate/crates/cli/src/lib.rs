//! Command-line front end: phantom generation, slice assimilation and
//! parameter studies.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod study;

pub use commands::{assimilate_dataset, cmd_assimilate, cmd_phantom, cmd_study, write_slice, SliceResult};
pub use config::{RunConfig, StudyParams};
pub use error::{CliError, CliResult};
pub use study::{loglog_slope, run_study, Series, StudyKind, StudyReport};
