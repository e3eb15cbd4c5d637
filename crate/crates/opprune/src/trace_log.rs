//! JSON-lines trace writer. Each event is written and flushed as it
//! happens, so a crashed run still leaves a usable partial trace.

use std::io::Write;

use opprune_core::model::{ModuleKind, TokenLayout};
use opprune_core::search::Candidate;
use opprune_core::trace::{SinkError, TraceEvent, TraceSink};
use serde::Serialize;

use crate::format::OpRecord;

#[derive(Debug, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceLine {
    Baseline {
        score: f64,
        calls: u64,
    },
    FreeProbe {
        group: String,
        modules: Vec<ModuleKind>,
        start_layer: u16,
        score: f64,
        qualifies: bool,
        calls: u64,
    },
    FreeResult {
        group: String,
        modules: Vec<ModuleKind>,
        l_star: u16,
        calls: u64,
    },
    Refresh {
        step: usize,
        threshold_index: Option<usize>,
        evaluated: usize,
        calls: u64,
    },
    Confirm {
        step: usize,
        ops: Vec<OpRecord>,
        cached: f64,
        score: f64,
        threshold: Option<f64>,
        passed: bool,
        calls: u64,
    },
    ThresholdAdvance {
        step: usize,
        from: usize,
        to: Option<usize>,
        calls: u64,
    },
    Commit {
        step: usize,
        ops: Vec<OpRecord>,
        score: f64,
        calls: u64,
    },
}

fn cand(layout: &TokenLayout, c: &Candidate) -> Vec<OpRecord> {
    c.ops().map(|o| OpRecord::from_op(layout, &o)).collect()
}

impl TraceLine {
    pub fn new(layout: &TokenLayout, e: &TraceEvent) -> Self {
        match e.clone() {
            TraceEvent::Baseline { score, calls } => TraceLine::Baseline { score, calls },
            TraceEvent::FreeProbe {
                group,
                modules,
                start_layer,
                score,
                qualifies,
                calls,
            } => TraceLine::FreeProbe {
                group: layout.name(group).into(),
                modules,
                start_layer,
                score,
                qualifies,
                calls,
            },
            TraceEvent::FreeResult {
                group,
                modules,
                l_star,
                calls,
            } => TraceLine::FreeResult {
                group: layout.name(group).into(),
                modules,
                l_star,
                calls,
            },
            TraceEvent::Refresh {
                step,
                threshold_index,
                evaluated,
                calls,
            } => TraceLine::Refresh {
                step,
                threshold_index,
                evaluated,
                calls,
            },
            TraceEvent::Confirm {
                step,
                candidate,
                cached,
                score,
                threshold,
                passed,
                calls,
            } => TraceLine::Confirm {
                step,
                ops: cand(layout, &candidate),
                cached,
                score,
                threshold,
                passed,
                calls,
            },
            TraceEvent::ThresholdAdvance {
                step,
                from,
                to,
                calls,
            } => TraceLine::ThresholdAdvance {
                step,
                from,
                to,
                calls,
            },
            TraceEvent::Commit {
                step,
                candidate,
                score,
                calls,
            } => TraceLine::Commit {
                step,
                ops: cand(layout, &candidate),
                score,
                calls,
            },
        }
    }
}

pub struct JsonlSink<W: Write> {
    out: W,
    layout: TokenLayout,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W, layout: TokenLayout) -> Self {
        JsonlSink { out, layout }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> TraceSink for JsonlSink<W> {
    fn record(&mut self, event: &TraceEvent) -> Result<(), SinkError> {
        let line = serde_json::to_string(&TraceLine::new(&self.layout, event))
            .map_err(|e| SinkError(e.to_string()))?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| SinkError(e.to_string()))
    }
}

/// Forwards every event to two sinks.
pub struct Tee<A, B>(pub A, pub B);

impl<A: TraceSink, B: TraceSink> TraceSink for Tee<A, B> {
    fn record(&mut self, event: &TraceEvent) -> Result<(), SinkError> {
        self.0.record(event)?;
        self.1.record(event)
    }
}
