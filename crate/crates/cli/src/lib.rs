//! Command-line driver for pseudo-class training: synthetic data generation,
//! training with checkpoints and resume, feature extraction, cross-validated
//! evaluation, hyperparameter sweeps and a markdown report.

pub mod artifacts;
pub mod commands;
pub mod config;
