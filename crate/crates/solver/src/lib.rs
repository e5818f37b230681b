//! Benchmark case definitions, configuration, and output plumbing for the
//! solver binary.

pub mod cases;
pub mod checkpoint;
pub mod config;
