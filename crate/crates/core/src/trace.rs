//! Search trace events. Every evaluator call made by the search shows up in
//! exactly one event, so call counts can be rebuilt from a trace alone.

use alloc::string::String;
use alloc::vec::Vec;

use crate::eval::Score;
use crate::model::{GroupId, ModuleKind};
use crate::search::Candidate;

#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    /// One call: the unpruned score.
    Baseline { score: Score, calls: u64 },
    /// One call: pruning `modules` of `group` at every layer from `start_layer` on.
    FreeProbe {
        group: GroupId,
        modules: Vec<ModuleKind>,
        start_layer: u16,
        score: Score,
        qualifies: bool,
        calls: u64,
    },
    /// No call. `l_star` is `layers + 1` when nothing qualified.
    FreeResult {
        group: GroupId,
        modules: Vec<ModuleKind>,
        l_star: u16,
        calls: u64,
    },
    /// `evaluated` calls: every remaining candidate rescored against the
    /// current prefix.
    Refresh {
        step: usize,
        threshold_index: Option<usize>,
        evaluated: usize,
        calls: u64,
    },
    /// One call: the cached argmax re-scored against the current prefix.
    Confirm {
        step: usize,
        candidate: Candidate,
        cached: Score,
        score: Score,
        threshold: Option<Score>,
        passed: bool,
        calls: u64,
    },
    /// No call.
    ThresholdAdvance {
        step: usize,
        from: usize,
        to: Option<usize>,
        calls: u64,
    },
    /// No call; `candidate` appended to the sequence.
    Commit {
        step: usize,
        candidate: Candidate,
        score: Score,
        calls: u64,
    },
}

impl TraceEvent {
    /// Evaluator calls this event accounts for.
    pub fn call_cost(&self) -> u64 {
        match self {
            TraceEvent::Baseline { .. } | TraceEvent::FreeProbe { .. } | TraceEvent::Confirm { .. } => 1,
            TraceEvent::Refresh { evaluated, .. } => *evaluated as u64,
            _ => 0,
        }
    }

    /// Evaluator call count after this event.
    pub fn calls(&self) -> u64 {
        match self {
            TraceEvent::Baseline { calls, .. }
            | TraceEvent::FreeProbe { calls, .. }
            | TraceEvent::FreeResult { calls, .. }
            | TraceEvent::Refresh { calls, .. }
            | TraceEvent::Confirm { calls, .. }
            | TraceEvent::ThresholdAdvance { calls, .. }
            | TraceEvent::Commit { calls, .. } => *calls,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("trace sink: {0}")]
pub struct SinkError(pub String);

pub trait TraceSink {
    fn record(&mut self, event: &TraceEvent) -> Result<(), SinkError>;
}

/// Discards everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _: &TraceEvent) -> Result<(), SinkError> {
        Ok(())
    }
}

/// Keeps events in memory.
#[derive(Debug, Default, Clone)]
pub struct VecSink(pub Vec<TraceEvent>);

impl TraceSink for VecSink {
    fn record(&mut self, event: &TraceEvent) -> Result<(), SinkError> {
        self.0.push(event.clone());
        Ok(())
    }
}

impl<S: TraceSink + ?Sized> TraceSink for &mut S {
    fn record(&mut self, event: &TraceEvent) -> Result<(), SinkError> {
        (**self).record(event)
    }
}
