//! Command-line harness and annotation HTTP service.

pub mod api;
pub mod cli;
