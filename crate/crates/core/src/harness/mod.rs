//! Datasets, evaluation, reporting, and config-driven experiments.

pub mod dataset;
pub mod eval;
pub mod experiment;
pub mod report;
