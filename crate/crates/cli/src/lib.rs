//! Experiment runner for the self-healing network simulator.

pub mod config;
pub mod experiment;
pub mod report;
