//! The scoring contract used by the search.

use alloc::string::String;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::model::Policy;

/// Higher is better.
pub type Score = f64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("evaluator failure: {0}")]
    Failed(String),
    #[error("evaluator timed out")]
    Timeout,
    #[error("evaluator protocol error: {0}")]
    Protocol(String),
}

/// Scores a pruning policy, e.g. validation accuracy with the policy's
/// operations skipped.
///
/// Implementations must be deterministic and count every call to
/// [`evaluate`](Evaluator::evaluate) (including those made by the default
/// [`baseline`](Evaluator::baseline)).
pub trait Evaluator: Sync {
    fn evaluate(&self, policy: &Policy) -> Result<Score, EvalError>;

    /// Score of the unpruned model.
    fn baseline(&self, empty: &Policy) -> Result<Score, EvalError> {
        debug_assert!(empty.is_empty());
        self.evaluate(empty)
    }

    fn call_count(&self) -> u64;

    /// Whether `evaluate` may be called from several threads at once.
    fn concurrency_safe(&self) -> bool;
}

impl<E: Evaluator + ?Sized> Evaluator for &E {
    fn evaluate(&self, policy: &Policy) -> Result<Score, EvalError> {
        (**self).evaluate(policy)
    }

    fn baseline(&self, empty: &Policy) -> Result<Score, EvalError> {
        (**self).baseline(empty)
    }

    fn call_count(&self) -> u64 {
        (**self).call_count()
    }

    fn concurrency_safe(&self) -> bool {
        (**self).concurrency_safe()
    }
}

#[derive(Debug, Default)]
pub struct CallCounter(AtomicU64);

impl CallCounter {
    pub fn new() -> Self {
        CallCounter(AtomicU64::new(0))
    }

    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}
