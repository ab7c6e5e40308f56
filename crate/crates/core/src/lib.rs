//! Regression assertions for computational notebooks: property discovery,
//! instrumented repeated execution, tolerance synthesis, test running,
//! mutation analysis and cross-version assertion transfer.

pub mod bounds;
pub mod catalog;
pub mod config;
pub mod error;
pub mod finder;
pub mod harness;
pub mod instrument;
pub mod literal;
pub mod mutation;
pub mod notebook;
pub mod pipeline;
pub mod protocol;
pub mod pysrc;
pub mod report;
pub mod runner;
pub mod synth;
pub mod versions;

pub use error::{Error, Result};
