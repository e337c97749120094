//! Experiment runner, reports and plots for fast adversarial training.

pub mod config;
pub mod plots;
pub mod report;
pub mod runner;
pub mod svg;
