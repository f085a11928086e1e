//! Experiment harness for the charcom testbed: benchmark generation, method
//! runs, sweeps, persistence and reports.

pub mod bench;
pub mod cli;
pub mod persist;
pub mod report;
pub mod runner;
pub mod sweeps;
pub mod world;
