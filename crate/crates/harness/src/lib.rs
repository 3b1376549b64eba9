//! Experiment configs, training loops, metrics files, run comparison and
//! the verification suites behind the `momentum` command.

pub mod compare;
pub mod config;
pub mod experiments;
pub mod metrics;
pub mod verify;
