//! Threaded batch evaluation.

use std::num::NonZeroUsize;
use std::thread;

use opprune_core::eval::{EvalError, Evaluator, Score};
use opprune_core::model::Policy;
use opprune_core::search::BatchEval;

/// Splits a batch into contiguous chunks, one per worker thread, and
/// returns results in input order.
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    threads: NonZeroUsize,
}

impl Threaded {
    pub fn new(threads: NonZeroUsize) -> Self {
        Threaded { threads }
    }

    pub fn available() -> Self {
        Threaded::new(thread::available_parallelism().unwrap_or(NonZeroUsize::MIN))
    }

    pub fn threads(&self) -> usize {
        self.threads.get()
    }
}

impl BatchEval for Threaded {
    fn evaluate_all(
        &self,
        evaluator: &dyn Evaluator,
        policies: &[Policy],
    ) -> Vec<Result<Score, EvalError>> {
        if policies.len() < 2 || self.threads.get() == 1 {
            return policies.iter().map(|p| evaluator.evaluate(p)).collect();
        }
        let chunk = policies.len().div_ceil(self.threads.get());
        thread::scope(|s| {
            let handles: Vec<_> = policies
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|p| evaluator.evaluate(p))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluator thread panicked"))
                .collect()
        })
    }
}
