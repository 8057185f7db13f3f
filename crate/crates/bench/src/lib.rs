//! Experiment harness for `cbfrrt`: planning problem generation and the
//! easy/hard split, planner comparison tables, end-to-end controller
//! evaluation, and the `cbfrrt` command-line tool.

pub mod cli;
mod error;
pub mod evaluate;
pub mod harness;
pub mod pipeline;
pub mod problems;

pub use error::{BenchError, Result};
