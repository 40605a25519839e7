//! Experiment plumbing shared by the command-line tool: configuration files,
//! synthetic dataset generation with regenerable manifests, run manifests,
//! checkpoint evaluation, and metric CSVs.

mod kv;

pub mod config;
pub mod dataset;
pub mod eval;
pub mod manifest;
pub mod report;
