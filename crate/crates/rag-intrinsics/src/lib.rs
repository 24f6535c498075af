//! Std companion to `rag-intrinsics-core`: the scripted and HTTP backends,
//! run configuration, dataset and report files, metrics over run reports and
//! the `rag-intrinsics` command line.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod http;
pub mod metrics;
pub mod recording;
pub mod scripted;

pub use rag_intrinsics_core as core_lib;
