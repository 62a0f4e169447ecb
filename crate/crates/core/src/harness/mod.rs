//! Experiment drivers behind the `cedit` command line.

pub mod config;
pub mod experiments;
pub mod io;
pub mod plot;
