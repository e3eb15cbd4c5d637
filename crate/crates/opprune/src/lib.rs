//! File formats, command-line tooling, threaded evaluation and the
//! external-evaluator bridge around `opprune-core`.

pub mod bridge;
pub mod cli;
pub mod format;
pub mod parallel;
pub mod trace_log;
pub mod viz;

pub use opprune_core as core;
