//! Workload driver for the swarm-core simulator.
//!
//! [`config::Scenario`] describes a run, [`runner::run_scenario`] executes
//! it deterministically and checks the journaled histories, and
//! [`experiments`] wraps multi-run sweeps. The `swarm` binary exposes all of
//! this on the command line.

pub mod config;
pub mod experiments;
pub mod metrics;
pub mod output;
pub mod runner;
pub mod workload;
