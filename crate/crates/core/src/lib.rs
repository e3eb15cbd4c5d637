//! Operation-level pruning policy search for transformer decoder prefill.
//!
//! A decoder's prefill compute is split into atomic operations
//! `(token group, layer, module)`. Policies (sets of pruned operations) are
//! priced by an exact FLOPs model and scored by pluggable [`Evaluator`]s.
//! The search sorts operations from most to least redundant and the
//! resulting sequence is truncated to whatever FLOPs budget is requested.
//!
//! This crate is `no_std` (it needs `alloc`). File formats, the CLI, threaded
//! evaluation and the external-process bridge live in the `opprune` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod eval;
pub mod flops;
pub mod model;
pub mod oracle;
pub mod presets;
pub mod search;
pub mod toy;
pub mod trace;

pub use eval::{CallCounter, EvalError, Evaluator, Score};
pub use flops::{
    layer_flops, module_proportions, policy_counts, policy_flops, truncate_to_budget, Flops,
    FlopsError, FlopsReport, LayerFlops, PerLayerCounts, Truncation,
};
pub use model::{
    admissible_candidates, all_operations, validate_policy, Architecture, ConfigDigest,
    ConstraintFlags, DecoderConfig, DecoderShape, GroupId, GroupKind, GroupSpec, ModelError,
    ModuleKind, Operation, Policy, TokenLayout, ValidationReport, Violation,
};
pub use oracle::{SyntheticOracle, SyntheticOracleSpec};
pub use search::{
    binary_search_free, default_thresholds, greedy_sort, presort_filter, run_pipeline, Candidate,
    FilterResult, PipelineOutput, SearchConfig, SearchError, SearchMode, SortedSequence,
    StepRecord, ThresholdSchedule,
};
pub use toy::{ToyDecoder, ToyDecoderSpec, ToyError, ToyMetric};
pub use trace::{NullSink, TraceEvent, TraceSink, VecSink};
